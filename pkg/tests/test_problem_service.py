import math

import numpy as np
import pytest

from app.models.schemas import Discretization, LipschitzData, NoisePath, ProblemSpec
from app.services.expression_service import parse
from app.services.problem_service import (
    build_grid,
    check_hypotheses,
    coarsen_noise,
    make_noise,
    obstacle_slice,
    refine_noise,
    validate_contraction,
)
from app.utils.exceptions import ConfigurationError


@pytest.mark.parametrize(
    "alpha, beta, expected",
    [
        (0.0, 0.0, True),
        (0.4, 0.0, True),
        (0.5, 0.0, False),
        (0.0, 1.0, False),
        (0.2, 0.7, True),
        (0.3, 0.7, False),
    ],
)
def test_validate_contraction(alpha, beta, expected):
    assert validate_contraction(LipschitzData(C=3.0, alpha=alpha, beta=beta)) is expected


def test_build_grid_geometry():
    spec = ProblemSpec(T=2.0)
    grid = build_grid(spec, Discretization(R=1.5, Nx=29, Nt=40))
    assert grid.dt == pytest.approx(0.05)
    assert grid.dx == pytest.approx(0.1)
    assert grid.xs.size == 29
    assert grid.xs[0] == pytest.approx(-1.4)
    assert grid.xs[-1] == pytest.approx(1.4)
    assert grid.ts[0] == 0.0 and grid.ts[-1] == 2.0
    assert grid.cell_length_sum == pytest.approx(2.9)


def test_noise_is_reproducible_and_keyed_by_path():
    a = make_noise(5, 50, 2, 0.02)
    b = make_noise(5, 50, 2, 0.02)
    other = make_noise(5, 50, 2, 0.02, path_index=1)
    assert a.increments.shape == (50, 2)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, other.increments)
    assert not np.array_equal(a.increments, make_noise(6, 50, 2, 0.02).increments)


def test_noise_moments():
    M = 1_000_000
    dB = make_noise(3, M, 1, 1.0).increments[:, 0]
    assert abs(dB.mean()) <= 4.0 / math.sqrt(M)
    assert dB.var() == pytest.approx(1.0, abs=0.01)
    lag = np.corrcoef(dB[:-1], dB[1:])[0, 1]
    assert abs(lag) <= 5.0 / math.sqrt(M)


def test_noise_rejects_empty_shape():
    with pytest.raises(ConfigurationError):
        make_noise(0, 0, 1, 0.1)


def test_noise_path_keeps_its_own_copy():
    increments = np.zeros((4, 1))
    noise = NoisePath(seed=0, dt=0.25, increments=increments)
    increments[0, 0] = 1.0
    assert noise.increments[0, 0] == 0.0
    assert increments.flags.writeable
    assert not noise.increments.flags.writeable


def test_coarsen_sums_increments():
    noise = make_noise(9, 12, 1, 0.1)
    coarse = coarsen_noise(noise, 3)
    assert coarse.Nt == 4
    assert coarse.dt == pytest.approx(0.3)
    np.testing.assert_allclose(coarse.increments[:, 0], noise.increments[:, 0].reshape(4, 3).sum(axis=1))
    with pytest.raises(ConfigurationError):
        coarsen_noise(noise, 5)


def test_refine_is_a_bridge_of_the_same_path():
    noise = make_noise(4, 30, 2, 1.0 / 30)
    fine = refine_noise(noise)
    assert fine.Nt == 60
    assert fine.dt == pytest.approx(noise.dt / 2)
    np.testing.assert_allclose(coarsen_noise(fine, 2).increments, noise.increments, atol=1e-14)
    np.testing.assert_array_equal(refine_noise(noise).increments, fine.increments)


@pytest.mark.parametrize("h, noisy", [(["0"], False), (["0.0*x"], False), (["0*t", "0"], False), (["0.2*cos(x)"], True)])
def test_has_noise(h, noisy):
    assert ProblemSpec(T=1.0, d1=len(h), h=h).has_noise is noisy


def test_absent_obstacle_is_infinite():
    xs = np.linspace(-1.0, 1.0, 4)
    assert np.all(obstacle_slice(None, 0.0, xs, -1.0) == -np.inf)
    assert np.all(obstacle_slice(None, 0.0, xs, 1.0) == np.inf)
    np.testing.assert_array_equal(obstacle_slice(parse("x"), 0.0, xs, 1.0), xs)


def test_hypotheses_admissible(small_disc):
    report = check_hypotheses(ProblemSpec(T=1.0, L="-1", U="1", psi="0"), small_disc)
    assert report.admissible
    assert report.warnings == []


def test_terminal_value_outside_band(small_disc):
    report = check_hypotheses(ProblemSpec(T=1.0, L="0.5", U="1", psi="0"), small_disc)
    assert report.names() == ["(HO)(ii)"]
    violation = report.violations[0]
    assert violation.magnitude == pytest.approx(0.5)
    assert violation.count == small_disc.Nx


def test_crossing_obstacles(small_disc):
    report = check_hypotheses(ProblemSpec(T=1.0, L="1", U="x", psi="1"), small_disc)
    assert "L<=U" in report.names()


def test_contraction_violation(small_disc):
    report = check_hypotheses(ProblemSpec(T=1.0, lip=LipschitzData(alpha=0.4, beta=0.6)), small_disc)
    assert report.names() == ["(H)(iv)"]


def test_time_discontinuous_obstacle_warns(small_disc):
    step = ProblemSpec(T=1.0, L="min(1, max(0, (t - 0.5)*1e9)) - 2", psi="0")
    assert len(check_hypotheses(step, small_disc).warnings) == 1
    smooth = ProblemSpec(T=1.0, L="-1 + 0.1*t", psi="0")
    assert check_hypotheses(smooth, small_disc).warnings == []
