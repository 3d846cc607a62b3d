"""Picard iteration for nonlinear coefficients in the weighted norm ‖·‖_{μ,δ}.

Iterate n+1 solves the linear two-obstacle problem whose f, g, h are frozen
at iterate n. The weight constants come from the Lipschitz data (C, α, β).
"""
from typing import List, Literal, Optional

import numpy as np
from scipy.optimize import bisect

from app.models.schemas import (
    ContractionConstants,
    Discretization,
    FieldSeries,
    Grid,
    GridSolution,
    LipschitzData,
    NoisePath,
    PicardRecord,
    PicardTrace,
    ProblemSpec,
    SolverMode,
)
from app.services import grid_service
from app.services.problem_service import build_grid, validate_contraction
from app.utils.exceptions import NoConvergence, NotContractive
from app.utils.logger import get_logger

logger = get_logger(__name__)

DELTA_FLOOR = 1e-6
EPS_TOL = 1e-12
RATIO_SLACK = 0.1


def _margin(eps: float, lip: LipschitzData) -> float:
    """(1 - α - Cε) - (Cε + α + β²(1+ε)); positive iff ε is admissible."""
    C, alpha, beta = lip.C, lip.alpha, lip.beta
    return (1.0 - alpha - C * eps) - (C * eps + alpha + beta ** 2 * (1.0 + eps))


def contraction_constants(lip: LipschitzData) -> ContractionConstants:
    if not validate_contraction(lip):
        raise NotContractive(f"alpha + beta^2/2 = {lip.alpha + 0.5 * lip.beta ** 2:.6g} >= 1/2")
    C, alpha, beta = lip.C, lip.alpha, lip.beta

    if 2.0 * C + beta ** 2 == 0.0:
        eps = 1.0  # every ε is admissible
    else:
        upper = 1.0
        while _margin(upper, lip) > 0.0:
            upper *= 2.0
        eps_max = bisect(_margin, 0.0, upper, args=(lip,), xtol=EPS_TOL)
        eps = min(1.0, 0.5 * eps_max)

    denominator = 1.0 - alpha - C * eps
    numerator = C * eps + alpha + beta ** 2 * (1.0 + eps)
    delta0 = numerator / denominator
    if C > 0.0:
        mu = 1.0 / eps + denominator * C * (C + 1.0) * (1.0 + 1.0 / eps) / numerator
        delta = (mu - 1.0 / eps) / denominator
    else:
        # the μ equality degenerates; keep the norm definite
        mu = 1.0 / eps
        delta = DELTA_FLOOR
    consts = ContractionConstants(eps=eps, mu=mu, delta=delta, delta0=delta0)
    logger.debug("contraction constants", **consts.model_dump())
    return consts


def weighted_norm_sq(du: FieldSeries, consts: ContractionConstants, grid: Grid) -> float:
    """Σ_k e^{μ t_k}(δ‖du_k‖² + ‖∇du_k‖²)·dt over k = 0..Nt-1, with ‖·‖² = Σ_j (·)²·dx."""
    values = du.values[:-1]
    grads = du.grad[:-1]
    weights = np.exp(consts.mu * grid.ts[:-1])
    per_slice = consts.delta * (values ** 2).sum(axis=1) * grid.dx + (grads ** 2).sum(axis=1) * grid.dx
    return float(np.sum(weights * per_slice) * grid.dt)


def _difference(a: FieldSeries, b: FieldSeries) -> FieldSeries:
    return FieldSeries(values=a.values - b.values, grad=a.grad - b.grad)


def _zero_field(grid: Grid) -> FieldSeries:
    zeros = np.zeros((grid.Nt + 1, grid.Nx))
    return FieldSeries(values=zeros, grad=zeros.copy())


def picard_solve(
    spec: ProblemSpec,
    disc: Discretization,
    noise: NoisePath,
    tol: float,
    max_iter: int,
    initial: Literal["zero", "free"] = "zero",
    mode: SolverMode = SolverMode.PROJECTED,
) -> tuple[GridSolution, PicardTrace]:
    """Iterate linear solves until the increment's weighted norm² drops below tol²."""
    consts = contraction_constants(spec.lip)
    grid = build_grid(spec, disc)

    previous = _zero_field(grid)
    if initial == "free":
        previous = grid_service.solve(spec, disc, noise, frozen=previous, mode=SolverMode.FREE).u

    records: List[PicardRecord] = []
    flagged = False
    solution: Optional[GridSolution] = None
    last_norm: Optional[float] = None
    for iteration in range(1, max_iter + 1):
        solution = grid_service.solve(spec, disc, noise, frozen=previous, mode=mode)
        norm_sq = weighted_norm_sq(_difference(solution.u, previous), consts, grid)
        ratio = None
        if last_norm is not None:
            ratio = norm_sq / last_norm if last_norm > 0.0 else 0.0
            if ratio > consts.delta0 + RATIO_SLACK:
                flagged = True
                logger.warning("measured ratio above delta0 + slack", iter=iteration, ratio=ratio, delta0=consts.delta0)
        records.append(PicardRecord(iter=iteration, norm_sq=norm_sq, ratio=ratio))
        logger.debug("picard iteration", iter=iteration, norm_sq=norm_sq, ratio=ratio)
        if norm_sq < tol ** 2:
            trace = PicardTrace(records=records, flagged=flagged)
            logger.info("picard converged", iterations=iteration, norm_sq=norm_sq)
            return solution, trace
        previous = solution.u
        last_norm = norm_sq

    trace = PicardTrace(records=records, flagged=flagged)
    logger.error("picard did not converge", max_iter=max_iter, norm_sq=last_norm)
    raise NoConvergence(max_iter, float(last_norm), trace=trace, solution=solution)
