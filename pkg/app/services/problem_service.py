from typing import List, Optional, Tuple

import numpy as np

from app.models.schemas import (
    Discretization,
    Grid,
    HypothesisReport,
    HypothesisViolation,
    LipschitzData,
    NoisePath,
    ProblemSpec,
)
from app.services.expression_service import Expr, eval_slice
from app.utils.exceptions import ConfigurationError
from app.utils.logger import get_logger

logger = get_logger(__name__)

# (HO)(i): an obstacle whose largest one-step jump does not shrink under dt/2 is flagged
_JUMP_SHRINK_RATIO = 0.9
_JUMP_FLOOR = 1e-9


def validate_contraction(lip: LipschitzData) -> bool:
    """Assumption (H)(iv): alpha + beta²/2 < 1/2, strictly."""
    return lip.alpha + 0.5 * lip.beta ** 2 < 0.5


def build_grid(spec: ProblemSpec, disc: Discretization) -> Grid:
    dt = spec.T / disc.Nt
    dx = 2.0 * disc.R / (disc.Nx + 1)
    ts = np.linspace(0.0, spec.T, disc.Nt + 1)
    xs = -disc.R + dx * np.arange(1, disc.Nx + 1)
    if not (np.isclose(dt * disc.Nt, spec.T, rtol=1e-14, atol=0.0)
            and np.isclose(dx * (disc.Nx + 1), 2.0 * disc.R, rtol=1e-14, atol=0.0)):
        raise ConfigurationError("inconsistent grid spacing")
    return Grid(T=spec.T, R=disc.R, Nx=disc.Nx, Nt=disc.Nt, theta=disc.theta, dt=dt, dx=dx, ts=ts, xs=xs)


def make_noise(seed: int, Nt: int, d1: int, dt: float, path_index: int = 0) -> NoisePath:
    """Brownian increments for one path; generator seeded with seed XOR path_index."""
    if Nt < 1 or d1 < 1:
        raise ConfigurationError(f"noise needs Nt >= 1 and d1 >= 1, got Nt={Nt}, d1={d1}")
    rng = np.random.default_rng(seed ^ path_index)
    increments = rng.standard_normal((Nt, d1)) * np.sqrt(dt)
    return NoisePath(seed=seed, path_index=path_index, dt=dt, increments=increments)


def coarsen_noise(noise: NoisePath, factor: int) -> NoisePath:
    """Same Brownian path on a grid `factor` times coarser."""
    if factor < 1 or noise.Nt % factor:
        raise ConfigurationError(f"cannot coarsen {noise.Nt} steps by {factor}")
    increments = noise.increments.reshape(noise.Nt // factor, factor, noise.d1).sum(axis=1)
    return NoisePath(seed=noise.seed, path_index=noise.path_index, dt=noise.dt * factor, increments=increments)


def noise_for(spec: ProblemSpec, grid: Grid, seed: int, path_index: int = 0) -> NoisePath:
    return make_noise(seed, grid.Nt, spec.d1, grid.dt, path_index)


def obstacle_slice(expr: Optional[Expr], t: float, xs: np.ndarray, sign: float) -> np.ndarray:
    """Obstacle values on a slice; an absent obstacle is sign·∞."""
    if expr is None:
        return np.full(xs.shape, sign * np.inf)
    return eval_slice(expr, t, xs)


def obstacle_slices(spec: ProblemSpec, t: float, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return obstacle_slice(spec.L_expr, t, xs, -1.0), obstacle_slice(spec.U_expr, t, xs, 1.0)


def _worst(name: str, excess: np.ndarray, ts: np.ndarray, xs: np.ndarray) -> Optional[HypothesisViolation]:
    """Collapse a nonnegative violation array (time × space) into its worst entry."""
    bad = excess > 0.0
    if not bad.any():
        return None
    k, j = np.unravel_index(int(np.argmax(excess)), excess.shape)
    return HypothesisViolation(
        hypothesis=name,
        t=float(ts[k]),
        x=float(xs[j]),
        magnitude=float(excess[k, j]),
        count=int(bad.sum()),
    )


def _largest_jump(expr: Expr, ts: np.ndarray, xs: np.ndarray) -> float:
    values = np.stack([eval_slice(expr, t, xs) for t in ts])
    return float(np.abs(np.diff(values, axis=0)).max()) if len(ts) > 1 else 0.0


def _continuity_warnings(spec: ProblemSpec, grid: Grid) -> List[str]:
    warnings: List[str] = []
    half_ts = np.linspace(0.0, spec.T, 2 * grid.Nt + 1)
    for label, expr in (("L", spec.L_expr), ("U", spec.U_expr)):
        if expr is None:
            continue
        coarse = _largest_jump(expr, grid.ts, grid.xs)
        fine = _largest_jump(expr, half_ts, grid.xs)
        if coarse > _JUMP_FLOOR and fine > _JUMP_SHRINK_RATIO * coarse:
            message = f"(HO)(i): obstacle {label} looks discontinuous in t (jump {coarse:.3g} does not shrink with dt)"
            logger.warning("obstacle time discontinuity", obstacle=label, jump=coarse, half_step_jump=fine)
            warnings.append(message)
    return warnings


def check_hypotheses(spec: ProblemSpec, disc: Discretization) -> HypothesisReport:
    """Grid check of L <= U, (HO)(ii) at T and the contraction property (H)(iv)."""
    grid = build_grid(spec, disc)
    violations: List[HypothesisViolation] = []

    lower = np.stack([obstacle_slices(spec, t, grid.xs)[0] for t in grid.ts])
    upper = np.stack([obstacle_slices(spec, t, grid.xs)[1] for t in grid.ts])
    with np.errstate(invalid="ignore"):
        crossing = np.nan_to_num(np.maximum(lower - upper, 0.0), nan=0.0, posinf=0.0)
    found = _worst("L<=U", crossing, grid.ts, grid.xs)
    if found:
        violations.append(found)

    psi = eval_slice(spec.psi_expr, spec.T, grid.xs)
    terminal = np.nan_to_num(
        np.maximum(np.maximum(lower[-1] - psi, psi - upper[-1]), 0.0), nan=0.0, posinf=0.0
    )
    found = _worst("(HO)(ii)", terminal[np.newaxis, :], grid.ts[-1:], grid.xs)
    if found:
        violations.append(found)

    if not validate_contraction(spec.lip):
        margin = spec.lip.alpha + 0.5 * spec.lip.beta ** 2 - 0.5
        violations.append(HypothesisViolation(hypothesis="(H)(iv)", t=0.0, x=0.0, magnitude=margin, count=1))

    report = HypothesisReport(violations=violations, warnings=_continuity_warnings(spec, grid))
    if violations:
        logger.info("hypotheses violated", violated=report.names())
    return report


def refine_noise(noise: NoisePath) -> NoisePath:
    """Brownian-bridge refinement to dt/2; coarsening the result by 2 gives back `noise`.

    The midpoints are drawn from a generator keyed on (seed, path_index, Nt),
    so the refinement of a given path is reproducible.
    """
    rng = np.random.default_rng([noise.seed, noise.path_index, noise.Nt])
    bridge = 0.5 * np.sqrt(noise.dt) * rng.standard_normal(noise.increments.shape)
    half = 0.5 * noise.increments
    increments = np.stack([half + bridge, half - bridge], axis=1).reshape(2 * noise.Nt, noise.d1)
    return NoisePath(seed=noise.seed, path_index=noise.path_index, dt=0.5 * noise.dt, increments=increments)
