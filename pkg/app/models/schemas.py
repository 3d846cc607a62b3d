from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, FrozenSet, List, Optional, Tuple
from enum import Enum

import numpy as np

from app.services.expression_service import Expr, is_zero, parse, variables
from app.utils.exceptions import ExpressionError

TIME_SPACE = frozenset({"t", "x"})
SPACE_ONLY = frozenset({"x"})
ALL_VARIABLES = frozenset({"t", "x", "y", "z1"})


class SolverMode(str, Enum):
    """Reflection treatment of the grid and lattice solvers."""
    FREE = "free"
    PROJECTED = "projected"
    PENALIZED = "penalized"


class PenaltyMode(str, Enum):
    PAPER = "paper"    # lower obstacle reflected, upper obstacle penalized
    DOUBLE = "double"  # both obstacles penalized


class CheckStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    CONDITIONAL = "conditional"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class _ArrayModel(BaseModel):
    """Immutable model holding numpy arrays; arrays are made read-only."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @field_validator("*")
    @classmethod
    def _lock_arrays(cls, value: Any) -> Any:
        if isinstance(value, np.ndarray):
            value = value.copy()
            value.setflags(write=False)
        return value


def _check_expression(src: str, allowed: FrozenSet[str], what: str) -> str:
    try:
        used = variables(parse(src))
    except ExpressionError as e:
        raise ValueError(f"{what}: {e}") from e
    extra = used - allowed
    if extra:
        raise ValueError(f"{what} may only use {sorted(allowed)}, found {sorted(extra)}")
    return src


class LipschitzData(_Frozen):
    C: float = Field(0.0, ge=0)
    alpha: float = Field(0.0, ge=0)
    beta: float = Field(0.0, ge=0)


class SeparabilityWitness(_Frozen):
    """Data (Ψ̃, f̃, g̃, h̃) of the auxiliary linear equation separating the obstacles."""
    psi: str = "0"
    f: str = "0"
    g: str = "0"
    h: List[str] = Field(default_factory=lambda: ["0"])

    @field_validator("psi")
    @classmethod
    def _psi(cls, v: str) -> str:
        return _check_expression(v, SPACE_ONLY, "witness psi")

    @field_validator("f", "g")
    @classmethod
    def _drift(cls, v: str) -> str:
        return _check_expression(v, TIME_SPACE, "witness coefficient")

    @field_validator("h")
    @classmethod
    def _noise(cls, v: List[str]) -> List[str]:
        return [_check_expression(s, TIME_SPACE, "witness h") for s in v]


class ProblemSpec(_Frozen):
    """Two-obstacle problem data. An absent obstacle is ±∞."""
    T: float = Field(..., gt=0)
    dim: int = Field(1, ge=1, le=1)
    d1: int = Field(1, ge=1)
    psi: str = "0"
    f: str = "0"
    g: str = "0"
    h: List[str] = Field(default_factory=lambda: ["0"])
    L: Optional[str] = None
    U: Optional[str] = None
    lip: LipschitzData = Field(default_factory=LipschitzData)
    separability_witness: Optional[SeparabilityWitness] = None

    @field_validator("psi")
    @classmethod
    def _psi(cls, v: str) -> str:
        return _check_expression(v, SPACE_ONLY, "psi")

    @field_validator("f", "g")
    @classmethod
    def _drift(cls, v: str) -> str:
        return _check_expression(v, ALL_VARIABLES, "coefficient")

    @field_validator("h")
    @classmethod
    def _noise(cls, v: List[str]) -> List[str]:
        return [_check_expression(s, ALL_VARIABLES, "h") for s in v]

    @field_validator("L", "U")
    @classmethod
    def _obstacle(cls, v: Optional[str]) -> Optional[str]:
        return None if v is None else _check_expression(v, TIME_SPACE, "obstacle")

    @model_validator(mode="after")
    def _noise_dimension(self):
        if len(self.h) != self.d1:
            raise ValueError(f"h has {len(self.h)} components but d1={self.d1}")
        if self.separability_witness is not None and len(self.separability_witness.h) != self.d1:
            raise ValueError("witness h must have d1 components")
        return self

    @property
    def psi_expr(self) -> Expr:
        return parse(self.psi)

    @property
    def f_expr(self) -> Expr:
        return parse(self.f)

    @property
    def g_expr(self) -> Expr:
        return parse(self.g)

    @property
    def h_exprs(self) -> Tuple[Expr, ...]:
        return tuple(parse(s) for s in self.h)

    @property
    def L_expr(self) -> Optional[Expr]:
        return None if self.L is None else parse(self.L)

    @property
    def U_expr(self) -> Optional[Expr]:
        return None if self.U is None else parse(self.U)

    @property
    def obstacles_active(self) -> bool:
        return self.L is not None or self.U is not None

    @property
    def has_noise(self) -> bool:
        return not all(is_zero(e) for e in self.h_exprs)

    @property
    def depends_on_solution(self) -> bool:
        """True when f, g or h reads y or z1 (nonlinear problem)."""
        used = variables(self.f_expr) | variables(self.g_expr)
        for e in self.h_exprs:
            used = used | variables(e)
        return bool(used & {"y", "z1"})


class Discretization(_Frozen):
    R: float = Field(..., gt=0)
    Nx: int = Field(..., ge=3)
    Nt: int = Field(..., ge=1)
    theta: float = Field(1.0, ge=0, le=1)


class Grid(_ArrayModel):
    """Derived time/space grid; interior nodes x_j = -R + (j+1)·dx."""
    T: float
    R: float
    Nx: int
    Nt: int
    theta: float
    dt: float
    dx: float
    ts: np.ndarray
    xs: np.ndarray

    @property
    def domain_length(self) -> float:
        return 2.0 * self.R

    @property
    def cell_length_sum(self) -> float:
        return self.Nx * self.dx


class NoisePath(_ArrayModel):
    seed: int = Field(..., ge=0, lt=2**64)
    path_index: int = 0
    dt: float
    increments: np.ndarray  # (Nt, d1), step k covers [t_k, t_{k+1}]

    @property
    def Nt(self) -> int:
        return int(self.increments.shape[0])

    @property
    def d1(self) -> int:
        return int(self.increments.shape[1])


class FieldSeries(_ArrayModel):
    values: np.ndarray  # (Nt+1, Nx)
    grad: np.ndarray    # (Nt+1, Nx)


class DiscreteMeasure(_ArrayModel):
    """Per-cell mass ν([t_k, t_{k+1}) × [x_j - dx/2, x_j + dx/2))."""
    increments: np.ndarray  # (Nt, Nx)

    @property
    def total_mass(self) -> float:
        return float(self.increments.sum())


class GridDiagnostics(_ArrayModel):
    max_upper_excess: float
    max_lower_excess: float
    energy_l2: np.ndarray    # ‖u_t‖² per slice
    energy_grad: np.ndarray  # ‖∇u_t‖² per slice


class GridSolution(_ArrayModel):
    grid: Grid
    mode: SolverMode
    penalty: float = 0.0
    penalty_mode: PenaltyMode = PenaltyMode.PAPER
    u: FieldSeries
    nu_plus: DiscreteMeasure
    nu_minus: DiscreteMeasure
    diagnostics: GridDiagnostics
    pre_reflection: np.ndarray  # field after heat and source steps, before reflection
    lower: np.ndarray  # L on every node, -inf when absent
    upper: np.ndarray  # U on every node, +inf when absent


class ContractionConstants(_Frozen):
    eps: float
    mu: float
    delta: float
    delta0: float = Field(..., ge=0, lt=1)


class PicardRecord(_Frozen):
    iter: int
    norm_sq: float = Field(..., ge=0)
    ratio: Optional[float] = None


class PicardTrace(_Frozen):
    records: List[PicardRecord] = Field(default_factory=list)
    flagged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.records)


class LatticeSolution(_ArrayModel):
    """Recombining walk lattice: node j sits at x = j·√dt, |j| <= Nt + j0."""
    dt: float
    sqrt_dt: float
    R: float
    Nt: int
    j0: int
    xs: np.ndarray
    y: np.ndarray   # (Nt+1, nodes)
    z: np.ndarray
    kp: np.ndarray  # (Nt, nodes) pointwise K⁺ increments
    km: np.ndarray
    lower: np.ndarray  # L on every node, -inf when absent or in free mode
    upper: np.ndarray

    def exact_mask(self, k: int) -> np.ndarray:
        """Nodes at level k whose value is free of lattice-edge effects."""
        j = np.arange(self.xs.size) - (self.Nt + self.j0)
        return np.abs(j) <= self.j0 + k


class HypothesisViolation(_Frozen):
    hypothesis: str
    t: float
    x: float
    magnitude: float
    count: int


class HypothesisReport(_Frozen):
    violations: List[HypothesisViolation] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)

    @property
    def admissible(self) -> bool:
        return not self.violations

    def names(self) -> List[str]:
        return [v.hypothesis for v in self.violations]


class CheckReport(_Frozen):
    check: str
    instance: str = ""
    status: CheckStatus
    metric: str = ""
    value: float = 0.0
    details: Dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status != CheckStatus.FAIL
