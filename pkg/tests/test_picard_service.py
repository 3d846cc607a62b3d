import math

import numpy as np
import pytest

from app.models.schemas import ContractionConstants, FieldSeries, LipschitzData
from app.services import grid_service
from app.services.picard_service import contraction_constants, picard_solve, weighted_norm_sq
from app.services.problem_service import build_grid
from app.utils.exceptions import NoConvergence, NotContractive


def test_constants_without_coupling():
    consts = contraction_constants(LipschitzData())
    assert consts.eps == 1.0
    assert consts.delta0 == 0.0
    assert consts.mu == 1.0
    assert consts.delta == 1e-6


def test_constants_gradient_only():
    consts = contraction_constants(LipschitzData(alpha=0.2, beta=0.4))
    assert consts.eps == 1.0
    assert consts.delta0 == pytest.approx((0.2 + 0.16 * 2.0) / 0.8)


def test_constants_worked_example():
    consts = contraction_constants(LipschitzData(C=1.0))
    assert consts.eps == pytest.approx(0.25, rel=1e-9)
    assert consts.delta0 == pytest.approx(1.0 / 3.0, rel=1e-9)
    assert consts.mu == pytest.approx(34.0, rel=1e-9)
    assert consts.delta == pytest.approx(40.0, rel=1e-9)


@pytest.mark.parametrize("C, alpha, beta", [(0.1, 0.3, 0.5), (2.0, 0.0, 0.9), (0.5, 0.45, 0.1)])
def test_constants_satisfy_their_relations(C, alpha, beta):
    consts = contraction_constants(LipschitzData(C=C, alpha=alpha, beta=beta))
    eps = consts.eps
    denominator = 1.0 - alpha - C * eps
    numerator = C * eps + alpha + beta ** 2 * (1.0 + eps)
    assert 0.0 < eps <= 1.0
    assert numerator < denominator
    assert 0.0 <= consts.delta0 < 1.0
    assert consts.delta0 == pytest.approx(numerator / denominator, abs=1e-10)
    assert consts.mu == pytest.approx(1.0 / eps + consts.delta * denominator, abs=1e-10)
    assert consts.delta * numerator == pytest.approx(C * (C + 1.0) * (1.0 + 1.0 / eps), abs=1e-10)


@pytest.mark.parametrize("alpha, beta", [(0.5, 0.0), (0.0, 1.0), (0.3, 0.7)])
def test_not_contractive(alpha, beta):
    with pytest.raises(NotContractive):
        contraction_constants(LipschitzData(alpha=alpha, beta=beta))


def test_weighted_norm_of_constant(instance):
    _, spec, disc, _ = instance("free_constant")
    grid = build_grid(spec, disc)
    shape = (grid.Nt + 1, grid.Nx)
    consts = ContractionConstants(eps=1.0, mu=0.0, delta=1.0, delta0=0.0)
    zero = FieldSeries(values=np.zeros(shape), grad=np.zeros(shape))
    assert weighted_norm_sq(zero, consts, grid) == 0.0
    constant = FieldSeries(values=np.full(shape, 2.0), grad=np.zeros(shape))
    assert weighted_norm_sq(constant, consts, grid) == pytest.approx(4.0 * grid.cell_length_sum * spec.T)


def test_weighted_norm_matches_direct_sum(small_disc):
    from app.models.schemas import ProblemSpec

    grid = build_grid(ProblemSpec(T=1.0), small_disc)
    rng = np.random.default_rng(0)
    shape = (grid.Nt + 1, grid.Nx)
    du = FieldSeries(values=rng.normal(size=shape), grad=rng.normal(size=shape))
    consts = ContractionConstants(eps=0.5, mu=3.0, delta=2.0, delta0=0.5)
    direct = 0.0
    for k in range(grid.Nt):
        weight = math.exp(consts.mu * grid.ts[k])
        for j in range(grid.Nx):
            direct += weight * (consts.delta * du.values[k, j] ** 2 + du.grad[k, j] ** 2) * grid.dx * grid.dt
    assert weighted_norm_sq(du, consts, grid) == pytest.approx(direct, rel=1e-12)


def test_linear_problem_converges_in_two_iterations(instance):
    _, spec, disc, noise = instance("reflected_ode")
    sol, trace = picard_solve(spec, disc, noise, tol=1e-8, max_iter=5)
    assert trace.iterations == 2
    assert trace.records[-1].norm_sq == 0.0
    direct = grid_service.solve(spec, disc, noise)
    np.testing.assert_array_equal(sol.u.values, direct.u.values)


def test_exponential_decay(instance):
    config, spec, disc, noise = instance("exp_decay")
    sol, trace = picard_solve(spec, disc, noise, config.picard.tol, config.picard.max_iter)
    assert np.max(np.abs(sol.u.values[0] - math.exp(-1.0))) <= 1e-3
    delta0 = contraction_constants(spec.lip).delta0
    assert all(r.ratio <= delta0 + 0.1 for r in trace.records[1:])
    assert not trace.flagged


def test_initial_guess_does_not_change_the_limit(instance):
    config, spec, disc, noise = instance("exp_decay")
    tol = config.picard.tol
    from_zero, _ = picard_solve(spec, disc, noise, tol, config.picard.max_iter, initial="zero")
    from_free, _ = picard_solve(spec, disc, noise, tol, config.picard.max_iter, initial="free")
    diff = FieldSeries(values=from_zero.u.values - from_free.u.values, grad=from_zero.u.grad - from_free.u.grad)
    consts = contraction_constants(spec.lip)
    assert weighted_norm_sq(diff, consts, from_zero.grid) <= (10.0 * tol) ** 2


def test_no_convergence_keeps_trace(instance):
    _, spec, disc, noise = instance("exp_decay")
    with pytest.raises(NoConvergence) as info:
        picard_solve(spec, disc, noise, tol=1e-6, max_iter=1)
    assert info.value.trace.iterations == 1
    assert info.value.solution is not None
    assert info.value.exit_code == 3


def test_gradient_coupling_contracts(instance):
    config, spec, disc, noise = instance("gradient_contraction")
    _, trace = picard_solve(spec, disc, noise, config.picard.tol, config.picard.max_iter)
    delta0 = contraction_constants(spec.lip).delta0
    assert delta0 == pytest.approx(0.3 / 0.7)
    assert max(r.ratio for r in trace.records[1:]) <= delta0 + 0.1


def test_broken_contraction_raises(instance):
    _, spec, disc, noise = instance("broken_contraction")
    with pytest.raises(NotContractive):
        picard_solve(spec, disc, noise, tol=1e-6, max_iter=10)
