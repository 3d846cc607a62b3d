import math

import numpy as np
import pytest

from conftest import still_noise
from app.models.schemas import Discretization, ProblemSpec, SolverMode
from app.services import grid_service
from app.services.expression_service import parse
from app.services.lattice_service import (
    energy_identity_check,
    feynman_kac_residual,
    lattice_solve,
    measure_mc,
)
from app.services.validation_service import random_ordered_pairs
from app.utils.exceptions import ConfigurationError, IllPosed


def test_lattice_geometry(small_disc):
    spec = ProblemSpec(T=1.0)
    lat = lattice_solve(spec, small_disc, still_noise(spec, small_disc))
    sqrt_dt = math.sqrt(1.0 / small_disc.Nt)
    assert lat.j0 == math.ceil(small_disc.R / sqrt_dt)
    assert lat.xs.size == 2 * (small_disc.Nt + lat.j0) + 1
    np.testing.assert_allclose(lat.xs, -lat.xs[::-1])
    assert lat.y.shape == (small_disc.Nt + 1, lat.xs.size)
    assert lat.kp.shape == (small_disc.Nt, lat.xs.size)
    assert lat.exact_mask(0).sum() == 2 * lat.j0 + 1
    assert lat.exact_mask(small_disc.Nt).all()


def test_constant_drift(small_disc):
    spec = ProblemSpec(T=1.0, f="1")
    lat = lattice_solve(spec, small_disc, still_noise(spec, small_disc))
    np.testing.assert_allclose(lat.y[0], 1.0, atol=1e-12)
    assert not lat.kp.any() and not lat.km.any()


def test_zero_data_stays_zero(small_disc):
    spec = ProblemSpec(T=1.0, L="-1", U="1")
    lat = lattice_solve(spec, small_disc, still_noise(spec, small_disc))
    assert not lat.y.any()
    assert not lat.kp.any() and not lat.km.any()


def test_reflected_ode_on_lattice(instance):
    _, spec, disc, noise = instance("reflected_ode")
    lat = lattice_solve(spec, disc, noise)
    centre = lat.Nt + lat.j0
    assert lat.y[0][centre] == pytest.approx(0.3, abs=spec.T / disc.Nt)
    assert np.all(lat.y <= lat.upper)
    assert np.all(lat.lower <= lat.y)


def test_noise_shape_mismatch(small_disc):
    spec = ProblemSpec(T=1.0)
    with pytest.raises(ConfigurationError):
        lattice_solve(spec, small_disc, still_noise(spec, Discretization(R=1.0, Nx=20, Nt=5)))


def test_feynman_kac_constant_solution(instance):
    _, spec, disc, noise = instance("free_constant")
    grid_sol = grid_service.solve(spec, disc, noise, mode=SolverMode.FREE)
    lat = lattice_solve(spec, disc, noise, mode=SolverMode.FREE)
    residual = feynman_kac_residual(grid_sol, lat, disc)
    assert residual["sup_err_y"] <= 1e-12
    assert residual["sup_err_z"] <= 1e-9


def test_feynman_kac_gaussian_heat(instance):
    _, spec, _, noise = instance("gaussian_heat")
    disc = Discretization(R=6.0, Nx=100, Nt=100)
    noise = still_noise(spec, disc)
    grid_sol = grid_service.solve(spec, disc, noise, mode=SolverMode.FREE)
    lat = lattice_solve(spec, disc, noise, mode=SolverMode.FREE)
    assert feynman_kac_residual(grid_sol, lat, disc)["sup_err_y"] <= 5e-2


def test_lattice_comparison_on_ordered_pair():
    disc = Discretization(R=3.0, Nx=40, Nt=40)
    first, second = random_ordered_pairs(1, seed=3)[0]
    noise = still_noise(first, disc)
    y1 = lattice_solve(first, disc, noise).y
    y2 = lattice_solve(second, disc, noise).y
    assert np.max(y1 - y2) <= 1e-10


def test_measure_mc_inactive_obstacle(instance):
    _, spec, disc, noise = instance("reflected_ode")
    lat = lattice_solve(spec, disc, noise)
    mc = measure_mc(lat, None, M=1000, seed=1, which="kp")
    assert mc == {"estimate": 0.0, "stderr": 0.0}


def test_measure_mc_total_mass(instance):
    _, spec, disc, noise = instance("reflected_ode")
    lat = lattice_solve(spec, disc, noise)
    mc = measure_mc(lat, None, M=2000, seed=1, which="km")
    assert mc["estimate"] == pytest.approx(0.7 * 2 * disc.R, rel=2e-2)
    assert mc["stderr"] == pytest.approx(0.0, abs=1e-9)


def test_measure_mc_test_function_off_support(instance):
    _, spec, disc, noise = instance("reflected_ode")
    lat = lattice_solve(spec, disc, noise)
    assert measure_mc(lat, parse("max(0, t - 0.8)"), M=500, seed=2)["estimate"] == 0.0


def test_measure_mc_independent_of_workers(instance):
    _, spec, disc, noise = instance("noisy_band")
    lat = lattice_solve(spec, disc, noise)
    serial = measure_mc(lat, parse("1 + x*x"), M=1000, seed=5, which="kp", batch_size=128, workers=1)
    threaded = measure_mc(lat, parse("1 + x*x"), M=1000, seed=5, which="kp", batch_size=128, workers=3)
    assert serial == threaded
    assert measure_mc(lat, None, M=1000, seed=5, batch_size=128) == measure_mc(lat, None, M=1000, seed=5, batch_size=128)


def test_measure_mc_needs_paths(instance):
    _, spec, disc, noise = instance("reflected_ode")
    lat = lattice_solve(spec, disc, noise)
    with pytest.raises(ConfigurationError):
        measure_mc(lat, None, M=0, seed=0)


@pytest.mark.parametrize(
    "spec",
    [
        ProblemSpec(T=1.0, L="-1", h=["0.1"]),
        ProblemSpec(T=1.0, L="-1", U="1"),
        ProblemSpec(T=1.0, L="-1", f="1"),
    ],
)
def test_energy_identity_preconditions(spec, small_disc):
    with pytest.raises(IllPosed):
        energy_identity_check(spec, small_disc, M=10, seed=0)


def test_energy_identity_trivial(small_disc):
    result = energy_identity_check(ProblemSpec(T=1.0, L="-1"), small_disc, M=100, seed=0)
    assert result["max_rel_err"] == 0.0
    assert len(result["t"]) == 5
    assert not np.any(result["lhs_series"]) and not np.any(result["rhs_series"])


@pytest.mark.slow
def test_energy_identity_bump(instance):
    config, spec, disc, _ = instance("energy_bump")
    result = energy_identity_check(spec, disc, M=config.validation.mc_paths, seed=config.noise.seed)
    lhs, rhs, stderr = result["lhs_series"], result["rhs_series"], result["stderr"]
    assert np.all(np.abs(lhs - rhs) <= 0.05 * np.abs(lhs) + 3.0 * stderr)
