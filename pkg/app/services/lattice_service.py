"""Backward induction on a recombining random-walk lattice, plus walk Monte Carlo.

The walk approximating W moves ±√dt per step. The reflected doubly stochastic
backward equation is solved node by node: conditional expectation over the two
children, explicit source terms, then the same reflection map as the grid
solver. The two-sided ∫g∗dW term is replaced by the drift +∫div g dt, which
requires g smooth in x.
"""
import math
from typing import Any, Dict, Literal, Optional

import numpy as np

from app.config import get_settings
from app.models.schemas import (
    Discretization,
    GridSolution,
    LatticeSolution,
    NoisePath,
    PenaltyMode,
    ProblemSpec,
    SolverMode,
)
from app.services import grid_service
from app.services.expression_service import Expr, eval_slice, is_zero, parse
from app.services.problem_service import build_grid, obstacle_slices
from app.utils.concurrency import ordered_map
from app.utils.exceptions import ConfigurationError, IllPosed
from app.utils.logger import get_logger

logger = get_logger(__name__)

ENERGY_CHECKPOINTS = 5


def _children_mean(y_next: np.ndarray) -> np.ndarray:
    # frontier nodes reuse themselves as the missing child
    padded = np.pad(y_next, 1, mode="edge")
    return 0.5 * (padded[2:] + padded[:-2])


def lattice_solve(
    spec: ProblemSpec,
    disc: Discretization,
    noise: NoisePath,
    mode: SolverMode = SolverMode.PROJECTED,
    penalty: float = 0.0,
    penalty_mode: PenaltyMode = PenaltyMode.PAPER,
) -> LatticeSolution:
    """Solve for (Y, Z, K⁺, K⁻) on nodes j·√dt, |j| <= Nt + ceil(R/√dt).

    Nonlinear coefficients are evaluated explicitly at y = ½(up + down) and
    z = symmetric difference of the next level.
    """
    grid = build_grid(spec, disc)
    if noise.Nt != grid.Nt or noise.d1 != spec.d1:
        raise ConfigurationError(
            f"noise path has shape ({noise.Nt}, {noise.d1}), lattice needs ({grid.Nt}, {spec.d1})"
        )
    dt, Nt = grid.dt, grid.Nt
    sqrt_dt = math.sqrt(dt)
    j0 = math.ceil(disc.R / sqrt_dt)
    half_width = Nt + j0
    xs = sqrt_dt * np.arange(-half_width, half_width + 1, dtype=np.float64)
    n_nodes = xs.size

    y = np.empty((Nt + 1, n_nodes))
    z = np.empty((Nt + 1, n_nodes))
    lower = np.empty((Nt + 1, n_nodes))
    upper = np.empty((Nt + 1, n_nodes))
    kp = np.zeros((Nt, n_nodes))
    km = np.zeros((Nt, n_nodes))

    y[Nt] = grid_service.eval_at_step(spec.psi_expr, Nt, spec.T, xs, None, None)
    z[Nt] = np.gradient(y[Nt], sqrt_dt)
    if mode == SolverMode.FREE:
        lower[:] = -np.inf
        upper[:] = np.inf
    else:
        lower[Nt], upper[Nt] = obstacle_slices(spec, spec.T, xs)

    for k in range(Nt - 1, -1, -1):
        t_next = grid.ts[k + 1]
        expectation = _children_mean(y[k + 1])
        z[k] = np.gradient(y[k + 1], sqrt_dt)
        f, g, h = grid_service.coefficient_slices(spec, k, t_next, xs, expectation, z[k])
        v = grid_service.source_step(expectation, dt, sqrt_dt, f, g, h, noise.increments[k])
        if mode == SolverMode.FREE:
            y[k] = v
            continue
        lower[k], upper[k] = obstacle_slices(spec, grid.ts[k], xs)
        if mode == SolverMode.PROJECTED:
            y[k], kp[k], km[k] = grid_service.project_step(v, lower[k], upper[k])
        else:
            y[k], kp[k], km[k] = grid_service.penalty_step(v, lower[k], upper[k], penalty, dt, penalty_mode)

    logger.debug("lattice solve finished", mode=mode.value, Nt=Nt, nodes=n_nodes, j0=j0)
    return LatticeSolution(
        dt=dt, sqrt_dt=sqrt_dt, R=disc.R, Nt=Nt, j0=j0, xs=xs,
        y=y, z=z, kp=kp, km=km, lower=lower, upper=upper,
    )


def feynman_kac_residual(grid_sol: GridSolution, lat: LatticeSolution, disc: Discretization) -> Dict[str, float]:
    """Sup distance between the lattice (Y, Z) and the grid (u, ∇u) read at the lattice nodes."""
    grid = grid_sol.grid
    if lat.Nt != grid.Nt:
        raise ConfigurationError(f"lattice has {lat.Nt} steps, grid has {grid.Nt}")
    inside = (lat.xs >= -disc.R + grid.dx) & (lat.xs <= disc.R - grid.dx)
    nodes = lat.xs[inside]
    sup_y = 0.0
    sup_z = 0.0
    for k in range(grid.Nt + 1):
        u_at = np.interp(nodes, grid.xs, grid_sol.u.values[k])
        grad_at = np.interp(nodes, grid.xs, grid_sol.u.grad[k])
        sup_y = max(sup_y, float(np.max(np.abs(lat.y[k][inside] - u_at))))
        sup_z = max(sup_z, float(np.max(np.abs(lat.z[k][inside] - grad_at))))
    return {"sup_err_y": sup_y, "sup_err_z": sup_z}


def _walk_nodes(lat: LatticeSolution, size: int, rng: np.random.Generator) -> np.ndarray:
    """Node indices (size, Nt) visited at t_0..t_{Nt-1}; starts uniform over the nodes in D."""
    centre = lat.Nt + lat.j0
    inner = int(math.floor(lat.R / lat.sqrt_dt))
    start = centre + rng.integers(-inner, inner + 1, size=size)
    if lat.Nt == 1:
        return start[:, np.newaxis]
    steps = 2 * rng.integers(0, 2, size=(size, lat.Nt - 1)) - 1
    path = np.empty((size, lat.Nt), dtype=np.int64)
    path[:, 0] = start
    path[:, 1:] = start[:, np.newaxis] + np.cumsum(steps, axis=1)
    return path


def _path_increments(lat: LatticeSolution, weighted: np.ndarray, size: int, seed: int, batch: int) -> np.ndarray:
    """weighted[k, node] gathered along `size` walks from generator seed XOR batch."""
    rng = np.random.default_rng(seed ^ batch)
    path = _walk_nodes(lat, size, rng)
    return weighted[np.arange(lat.Nt)[np.newaxis, :], path]


def _batches(M: int, batch_size: int):
    return [(b, min(batch_size, M - b * batch_size)) for b in range(math.ceil(M / batch_size))]


def _run_batches(lat: LatticeSolution, weighted: np.ndarray, M: int, seed: int,
                 batch_size: Optional[int], workers: Optional[int], reduce) -> np.ndarray:
    settings = get_settings()
    batch_size = batch_size or settings.mc_batch_size
    workers = workers or settings.workers
    parts = ordered_map(
        lambda item: reduce(_path_increments(lat, weighted, item[1], seed, item[0])),
        _batches(M, batch_size),
        workers,
    )
    return np.concatenate(parts, axis=0)


def measure_mc(
    lat: LatticeSolution,
    phi: Optional[Expr],
    M: int,
    seed: int,
    which: Literal["kp", "km"] = "km",
    batch_size: Optional[int] = None,
    workers: Optional[int] = None,
) -> Dict[str, float]:
    """E^m Σ_k φ(t_k, W_k)·ΔK_k over walks started uniformly in D, weighted by |D|.

    `phi=None` means φ ≡ 1 (total mass).
    """
    if M < 1:
        raise ConfigurationError(f"need at least one path, got M={M}")
    increments = lat.kp if which == "kp" else lat.km
    if phi is None:
        weighted = increments
    else:
        weighted = np.stack([eval_slice(phi, k * lat.dt, lat.xs) for k in range(lat.Nt)]) * increments
    totals = _run_batches(lat, weighted, M, seed, batch_size, workers, lambda rows: rows.sum(axis=1))
    domain = 2.0 * lat.R
    estimate = domain * float(totals.mean())
    stderr = domain * float(totals.std(ddof=1)) / math.sqrt(M) if M > 1 else 0.0
    logger.debug("measure estimate", which=which, M=M, estimate=estimate, stderr=stderr)
    return {"estimate": estimate, "stderr": stderr}


def energy_identity_check(
    spec: ProblemSpec,
    disc: Discretization,
    M: int,
    seed: int,
    batch_size: Optional[int] = None,
    workers: Optional[int] = None,
) -> Dict[str, Any]:
    """‖u_t‖² + Σ_{s>=t}‖∇u_s‖²·dt against E^m(A_T − A_t)² at five checkpoints before T.

    A is the accumulated lower push along walk paths; the problem must be a
    deterministic one-sided lower obstacle problem with zero data.
    """
    if spec.has_noise:
        raise IllPosed("energy identity needs a deterministic problem (h = 0)")
    if spec.U is not None:
        raise IllPosed("energy identity needs the upper obstacle disabled")
    if not all(is_zero(parse(s)) for s in (spec.f, spec.g, spec.psi)):
        raise IllPosed("energy identity needs f = g = 0 and psi = 0")
    if M < 1:
        raise ConfigurationError(f"need at least one path, got M={M}")

    grid = build_grid(spec, disc)
    still = NoisePath(seed=seed, dt=grid.dt, increments=np.zeros((grid.Nt, spec.d1)))
    grid_sol = grid_service.solve(spec, disc, still, mode=SolverMode.PROJECTED)
    lat = lattice_solve(spec, disc, still, mode=SolverMode.PROJECTED)

    diag = grid_sol.diagnostics
    grad_tail = np.concatenate([np.cumsum(diag.energy_grad[:-1][::-1])[::-1], [0.0]]) * grid.dt
    lhs_full = diag.energy_l2 + grad_tail

    checkpoints = np.linspace(0, grid.Nt, ENERGY_CHECKPOINTS + 1).round().astype(int)[:-1]

    def tails(rows: np.ndarray) -> np.ndarray:
        remaining = np.cumsum(rows[:, ::-1], axis=1)[:, ::-1]
        return remaining[:, checkpoints] ** 2

    squares = _run_batches(lat, lat.kp, M, seed, batch_size, workers, tails)
    domain = 2.0 * disc.R
    rhs = domain * squares.mean(axis=0)
    stderr = domain * squares.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros_like(rhs)
    lhs = lhs_full[checkpoints]

    scale = np.maximum(np.abs(lhs), np.abs(rhs))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0.0, np.abs(lhs - rhs) / scale, 0.0)
    result = {
        "t": grid.ts[checkpoints],
        "lhs_series": lhs,
        "rhs_series": rhs,
        "stderr": stderr,
        "max_rel_err": float(rel.max()),
    }
    logger.info("energy identity", max_rel_err=result["max_rel_err"], M=M)
    return result
