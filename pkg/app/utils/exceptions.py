from typing import Any, FrozenSet, Optional


class ObstacleLabError(Exception):
    """Base exception for the obstacle SPDE lab."""
    kind = "internal"
    exit_code = 2

    def error_line(self) -> str:
        """Single machine-parsable line written to stderr by the CLI."""
        detail = " ".join(str(self).split())
        return f"E:{self.kind}:{detail}"


class ConfigurationError(ObstacleLabError):
    """Exception raised for configuration errors."""
    kind = "config"


class ExpressionError(ObstacleLabError):
    """Exception raised for coefficient expression errors."""
    kind = "expression"


class ParseError(ExpressionError):
    """Malformed expression source."""

    def __init__(self, offset: int, expected: FrozenSet[str], found: str = ""):
        self.offset = offset
        self.expected = frozenset(expected)
        self.found = found
        wanted = ", ".join(sorted(self.expected))
        super().__init__(f"offset {offset}: expected one of {{{wanted}}}, found {found!r}")


class UnknownIdentifier(ExpressionError):
    def __init__(self, offset: int, name: str):
        self.offset = offset
        self.name = name
        super().__init__(f"offset {offset}: unknown identifier {name!r}")


class ArityError(ExpressionError):
    def __init__(self, offset: int, name: str, expected: int, got: int):
        self.offset = offset
        self.name = name
        self.expected = expected
        self.got = got
        super().__init__(f"offset {offset}: {name}() takes {expected} argument(s), got {got}")


class EvalError(ExpressionError):
    """Division by zero, sqrt of a negative number or a non-finite result."""

    def __init__(self, detail: str, node: Optional[int] = None, step: Optional[int] = None):
        self.detail = detail
        self.node = node
        self.step = step
        where = []
        if step is not None:
            where.append(f"k={step}")
        if node is not None:
            where.append(f"j={node}")
        suffix = f" at ({', '.join(where)})" if where else ""
        super().__init__(f"{detail}{suffix}")

    def at_step(self, step: int) -> "EvalError":
        return EvalError(self.detail, node=self.node, step=step)


class ObstacleCrossing(ObstacleLabError):
    """Lower obstacle above the upper obstacle somewhere on the grid."""
    kind = "obstacle"


class NotContractive(ObstacleLabError):
    """Assumption (H)(iv) fails: alpha + beta^2/2 >= 1/2."""
    kind = "contraction"


class NoConvergence(ObstacleLabError):
    kind = "convergence"
    exit_code = 3

    def __init__(self, max_iter: int, last_norm_sq: float, trace: Any = None, solution: Any = None):
        self.max_iter = max_iter
        self.last_norm_sq = last_norm_sq
        self.trace = trace
        self.solution = solution
        super().__init__(f"no convergence after {max_iter} iterations, last norm_sq={last_norm_sq:.6g}")


class IllPosed(ObstacleLabError):
    kind = "illposed"


class UnsupportedPhi(ObstacleLabError):
    kind = "phi"


class PreconditionUnmet(ObstacleLabError):
    """A check's hypothesis does not hold for the supplied instances."""
    kind = "precondition"
    exit_code = 1

    def __init__(self, hypothesis: str, detail: str = ""):
        self.hypothesis = hypothesis
        super().__init__(f"{hypothesis}: {detail}" if detail else hypothesis)
