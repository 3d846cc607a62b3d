"""Pathwise backward finite-difference solver on D = [-R, R].

One step, going from slice k+1 to slice k, is split as heat step, source
step, then reflection (projection or penalty). Coefficients are frozen at the
later slice k+1; obstacles are taken at slice k.
"""
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded

from app.models.schemas import (
    DiscreteMeasure,
    Discretization,
    FieldSeries,
    Grid,
    GridDiagnostics,
    GridSolution,
    NoisePath,
    PenaltyMode,
    ProblemSpec,
    SolverMode,
)
from app.services.expression_service import Expr, eval_slice
from app.services.problem_service import build_grid, obstacle_slices
from app.utils.exceptions import ConfigurationError, EvalError, ObstacleCrossing, PreconditionUnmet
from app.utils.logger import get_logger

logger = get_logger(__name__)

BOUNDARY_ACTIVITY_TOL = 1e-6


@lru_cache(maxsize=64)
def _warn_cfl(dt: float, dx: float) -> None:
    logger.warning("explicit heat step violates dt <= dx^2", dt=dt, dx=dx, ratio=dt / dx ** 2)


def _neumann_second_difference(u: np.ndarray) -> np.ndarray:
    # ghost nodes copy the end values (zero flux)
    return np.diff(np.pad(u, 1, mode="edge"), 2)


@lru_cache(maxsize=64)
def _implicit_band(n: int, coupling: float) -> np.ndarray:
    """Banded form of I - coupling·D with D the Neumann second difference."""
    ab = np.zeros((3, n))
    ab[0, 1:] = -coupling
    ab[1, :] = 1.0 + 2.0 * coupling
    ab[1, 0] = ab[1, -1] = 1.0 + coupling
    ab[2, :-1] = -coupling
    ab.setflags(write=False)
    return ab


def heat_step(u_next: np.ndarray, dt: float, dx: float, theta: float) -> np.ndarray:
    """theta-scheme step of ½Δ with Neumann ends: (I - θ·dt·½Δ_h) u = (I + (1-θ)·dt·½Δ_h) u_next."""
    lam = dt / (2.0 * dx * dx)
    if theta == 0.0 and dt / dx ** 2 > 1.0:
        _warn_cfl(dt, dx)
    rhs = u_next
    if theta < 1.0:
        rhs = u_next + (1.0 - theta) * lam * _neumann_second_difference(u_next)
    if theta == 0.0:
        return np.array(rhs, dtype=np.float64)
    ab = _implicit_band(u_next.size, theta * lam)
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def source_step(
    u: np.ndarray,
    dt: float,
    dx: float,
    f_slice: np.ndarray,
    g_slice: np.ndarray,
    h_slices: np.ndarray,
    dB_k: np.ndarray,
) -> np.ndarray:
    """u + f·dt + div_h(g)·dt + Σ_j h_j·dB_k[j]; div_h is the central difference, one-sided at the ends."""
    div_g = np.gradient(g_slice, dx)
    out = u + f_slice * dt
    out = out + div_g * dt
    return out + np.asarray(dB_k) @ np.atleast_2d(h_slices)


def project_step(
    u: np.ndarray, L_slice: np.ndarray, U_slice: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Discrete Skorokhod reflection: clamp into [L, U] and return the pushes (dK⁺, dK⁻)."""
    if np.any(L_slice > U_slice):
        j = int(np.argmax(L_slice - U_slice))
        raise ObstacleCrossing(f"L > U at node {j} by {float(L_slice[j] - U_slice[j]):.6g}")
    projected = np.minimum(np.maximum(u, L_slice), U_slice)
    dKp = np.maximum(L_slice - u, 0.0)
    dKm = np.maximum(u - U_slice, 0.0)
    return projected, dKp, dKm


def _penalize_above(u: np.ndarray, U_slice: np.ndarray, a: float) -> Tuple[np.ndarray, np.ndarray]:
    # nodewise root of u' = u - a·(u' - U)⁺
    over = u > U_slice
    with np.errstate(invalid="ignore"):
        relaxed = np.where(over, np.minimum(u, U_slice + (u - U_slice) / (1.0 + a)), u)
    dKm = np.where(over, a * (relaxed - U_slice), 0.0)
    return relaxed, dKm


def _penalize_below(u: np.ndarray, L_slice: np.ndarray, a: float) -> Tuple[np.ndarray, np.ndarray]:
    # nodewise root of u' = u + a·(L - u')⁺
    under = u < L_slice
    with np.errstate(invalid="ignore"):
        relaxed = np.where(under, np.maximum(u, L_slice - (L_slice - u) / (1.0 + a)), u)
    dKp = np.where(under, a * (L_slice - relaxed), 0.0)
    return relaxed, dKp


def penalty_step(
    u: np.ndarray,
    L_slice: np.ndarray,
    U_slice: np.ndarray,
    n: float,
    dt: float,
    mode: PenaltyMode = PenaltyMode.PAPER,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Implicit penalization; `paper` reflects on L and penalizes U, `double` penalizes both."""
    if n < 0:
        raise ConfigurationError(f"penalty level must be nonnegative, got {n}")
    a = n * dt
    zeros = np.zeros_like(u)
    if mode == PenaltyMode.DOUBLE:
        if a == 0.0:
            return np.array(u, dtype=np.float64), zeros, zeros.copy()
        relaxed, dKm = _penalize_above(u, U_slice, a)
        relaxed, dKp = _penalize_below(relaxed, L_slice, a)
        return relaxed, dKp, dKm
    if a == 0.0:
        relaxed, dKm = np.array(u, dtype=np.float64), zeros
    else:
        relaxed, dKm = _penalize_above(u, U_slice, a)
    out = np.maximum(relaxed, L_slice)
    dKp = np.maximum(L_slice - relaxed, 0.0)
    return out, dKp, dKm


def eval_at_step(expr: Expr, k: int, t: float, xs: np.ndarray, ys, zs) -> np.ndarray:
    try:
        return eval_slice(expr, t, xs, ys, zs)
    except EvalError as e:
        logger.error("coefficient evaluation failed", step=k, detail=e.detail)
        raise e.at_step(k) from None


def coefficient_slices(
    spec: ProblemSpec, k: int, t: float, xs: np.ndarray, ys=None, zs=None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(f, g, h[d1]) on one slice, with y and z1 bound to the supplied fields."""
    f = eval_at_step(spec.f_expr, k, t, xs, ys, zs)
    g = eval_at_step(spec.g_expr, k, t, xs, ys, zs)
    h = np.stack([eval_at_step(e, k, t, xs, ys, zs) for e in spec.h_exprs])
    return f, g, h


def _check_terminal_ordering(spec: ProblemSpec, grid: Grid, psi: np.ndarray) -> None:
    lower, upper = obstacle_slices(spec, spec.T, grid.xs)
    gap = max(float(np.max(lower - psi)), float(np.max(psi - upper)))
    if gap > 0.0:
        raise PreconditionUnmet("(HO)(ii)", f"terminal value leaves [L(T), U(T)] by {gap:.6g}")


def _warn_boundary_activity(values: np.ndarray) -> None:
    scale = np.abs(values).max(axis=1)
    left = np.abs(values[:, 0] - values[:, 1])
    right = np.abs(values[:, -1] - values[:, -2])
    active = np.maximum(left, right) > BOUNDARY_ACTIVITY_TOL * scale
    if active.any():
        logger.warning(
            "solution varies at the truncation boundary; keep data and obstacle activity inside D",
            slices=int(active.sum()),
            worst=float(np.maximum(left, right).max()),
        )


def _excess(a: np.ndarray, b: np.ndarray) -> float:
    # max (a - b)⁺ with infinite obstacles contributing nothing
    with np.errstate(invalid="ignore"):
        diff = np.where(np.isfinite(a) & np.isfinite(b), a - b, -np.inf)
    return float(max(np.max(diff), 0.0))


def solve(
    spec: ProblemSpec,
    disc: Discretization,
    noise: NoisePath,
    frozen: Optional[FieldSeries] = None,
    mode: SolverMode = SolverMode.PROJECTED,
    penalty: float = 0.0,
    penalty_mode: PenaltyMode = PenaltyMode.PAPER,
) -> GridSolution:
    grid = build_grid(spec, disc)
    if noise.Nt != grid.Nt or noise.d1 != spec.d1:
        raise ConfigurationError(
            f"noise path has shape ({noise.Nt}, {noise.d1}), grid needs ({grid.Nt}, {spec.d1})"
        )
    if spec.depends_on_solution and frozen is None:
        raise ConfigurationError("coefficients reference y or z1: frozen fields are required")
    if mode == SolverMode.FREE and spec.obstacles_active:
        logger.warning("free mode ignores the obstacles")

    xs, ts, dt, dx = grid.xs, grid.ts, grid.dt, grid.dx
    Nt, Nx = grid.Nt, grid.Nx
    values = np.empty((Nt + 1, Nx))
    pre = np.empty((Nt + 1, Nx))
    lower = np.empty((Nt + 1, Nx))
    upper = np.empty((Nt + 1, Nx))
    dKp_all = np.zeros((Nt, Nx))
    dKm_all = np.zeros((Nt, Nx))

    psi = eval_at_step(spec.psi_expr, Nt, spec.T, xs, None, None)
    if mode == SolverMode.FREE:
        lower[:] = -np.inf
        upper[:] = np.inf
    else:
        _check_terminal_ordering(spec, grid, psi)
        lower[Nt], upper[Nt] = obstacle_slices(spec, ts[Nt], xs)
    values[Nt] = psi
    pre[Nt] = psi

    for k in range(Nt - 1, -1, -1):
        ys = frozen.values[k + 1] if frozen is not None else None
        zs = frozen.grad[k + 1] if frozen is not None else None
        f, g, h = coefficient_slices(spec, k, ts[k + 1], xs, ys, zs)
        v = heat_step(values[k + 1], dt, dx, grid.theta)
        v = source_step(v, dt, dx, f, g, h, noise.increments[k])
        pre[k] = v
        if mode == SolverMode.FREE:
            values[k] = v
            continue
        lower[k], upper[k] = obstacle_slices(spec, ts[k], xs)
        if mode == SolverMode.PROJECTED:
            values[k], dKp, dKm = project_step(v, lower[k], upper[k])
        else:
            values[k], dKp, dKm = penalty_step(v, lower[k], upper[k], penalty, dt, penalty_mode)
        dKp_all[k] = dKp
        dKm_all[k] = dKm

    grad = np.gradient(values, dx, axis=1)
    _warn_boundary_activity(values)
    diagnostics = GridDiagnostics(
        max_upper_excess=_excess(values, upper),
        max_lower_excess=_excess(lower, values),
        energy_l2=(values ** 2).sum(axis=1) * dx,
        energy_grad=(grad ** 2).sum(axis=1) * dx,
    )
    logger.debug("grid solve finished", mode=mode.value, penalty=penalty, Nt=Nt, Nx=Nx)
    return GridSolution(
        grid=grid,
        mode=mode,
        penalty=penalty,
        penalty_mode=penalty_mode,
        u=FieldSeries(values=values, grad=grad),
        nu_plus=DiscreteMeasure(increments=dKp_all * dx),
        nu_minus=DiscreteMeasure(increments=dKm_all * dx),
        diagnostics=diagnostics,
        pre_reflection=pre,
        lower=lower,
        upper=upper,
    )


def complementarity(sol: GridSolution) -> Tuple[float, float]:
    """(Σ (u - L)·dK⁺, Σ (U - u)·dK⁻) over the cells where the pushes act."""
    u = sol.u.values[:-1]
    kp = sol.nu_plus.increments
    km = sol.nu_minus.increments
    on_lower = kp > 0.0
    on_upper = km > 0.0
    lower_sum = float(np.sum((u[on_lower] - sol.lower[:-1][on_lower]) * kp[on_lower]))
    upper_sum = float(np.sum((sol.upper[:-1][on_upper] - u[on_upper]) * km[on_upper]))
    return lower_sum, upper_sum


def measure_apply(measure: DiscreteMeasure, grid: Grid, phi: Union[Expr, np.ndarray]) -> float:
    """Σ φ(t_k, x_j)·ν_kj for φ an expression in (t, x) or an array of cell weights."""
    if isinstance(phi, np.ndarray):
        weights = np.broadcast_to(phi, measure.increments.shape)
    else:
        weights = np.stack([eval_slice(phi, t, grid.xs) for t in grid.ts[:-1]])
    return float(np.sum(weights * measure.increments))
