import math

import numpy as np
import pytest

from conftest import still_noise
from app.config import SuiteConfig, SuiteEntry, load_instance, load_suite
from app.models.schemas import CheckStatus, Discretization, LipschitzData, PenaltyMode, ProblemSpec, SeparabilityWitness
from app.services import validation_service as vs
from app.services.expression_service import eval_slice
from app.utils.exceptions import ConfigurationError, NotContractive, PreconditionUnmet, UnsupportedPhi


# ---------------------------------------------------------------- comparison

def test_comparison_identical_problems(instance):
    _, spec, disc, noise = instance("noisy_band")
    report = vs.check_comparison(spec, spec, disc, noise)
    assert report.status == CheckStatus.PASS
    assert report.value == 0.0


def test_comparison_drift_shift(instance):
    _, low, disc, noise = instance("wide_band")
    _, high, _, _ = instance("wide_band_drift")
    report = vs.check_comparison(low, high, disc, noise)
    assert report.passed
    assert report.details["grid_worst"] <= 0.0


def test_comparison_terminal_shift(small_disc):
    low = ProblemSpec(T=1.0, L="-10", U="10")
    high = ProblemSpec(T=1.0, psi="0.1", L="-10", U="10")
    report = vs.check_comparison(low, high, small_disc, still_noise(low, small_disc))
    assert report.passed


def test_comparison_rejects_misordered_data(instance):
    _, low, disc, noise = instance("wide_band")
    _, high, _, _ = instance("wide_band_drift")
    with pytest.raises(PreconditionUnmet) as info:
        vs.check_comparison(high, low, disc, noise)
    assert info.value.hypothesis == "f1 <= f2"


def test_comparison_needs_shared_coefficients(small_disc):
    first = ProblemSpec(T=1.0, g="0")
    second = ProblemSpec(T=1.0, g="0.1*x")
    with pytest.raises(PreconditionUnmet):
        vs.check_comparison(first, second, small_disc, still_noise(first, small_disc))


def test_random_ordered_pairs_are_ordered():
    for first, second in vs.random_ordered_pairs(5, seed=1):
        assert first.g == second.g and first.h == second.h
        assert second.psi.startswith(f"({first.psi})")


def test_comparison_random_pairs():
    disc = Discretization(R=3.0, Nx=60, Nt=60)
    report = vs.check_comparison_random(disc, seed=5, count=20)
    assert report.passed
    assert report.details["failed"] == []


# ---------------------------------------------------------------- penalization

def test_penalization_sweep_reflected_ode(instance):
    _, spec, disc, noise = instance("reflected_ode")
    levels = [float(2 ** i) for i in range(9)]
    report = vs.check_penalization_sweep(spec, disc, noise, levels)
    assert report.passed
    assert report.details["monotone_u"] and report.details["monotone_excess"] and report.details["monotone_distance"]
    table = report.details["table"]
    assert [row["n"] for row in table] == levels
    assert table[-1]["max_upper_excess"] <= 5e-3
    assert table[0]["max_upper_excess"] > table[-1]["max_upper_excess"]


def test_penalization_sweep_inactive_obstacles(instance):
    _, spec, disc, noise = instance("wide_band_drift")
    report = vs.check_penalization_sweep(spec, disc, noise, [1.0, 4.0, 16.0])
    assert report.passed
    assert all(row["max_upper_excess"] == 0.0 for row in report.details["table"])
    assert all(row["sup_diff_to_projected"] == 0.0 for row in report.details["table"])


@pytest.mark.parametrize("levels", [[], [4.0, 2.0], [-1.0, 1.0]])
def test_penalization_sweep_rejects_levels(instance, levels):
    _, spec, disc, noise = instance("reflected_ode")
    with pytest.raises(ConfigurationError):
        vs.check_penalization_sweep(spec, disc, noise, levels)


def test_penalization_sweep_needs_one_sided_penalty(instance):
    _, spec, disc, noise = instance("reflected_ode")
    with pytest.raises(PreconditionUnmet) as info:
        vs.check_penalization_sweep(spec, disc, noise, [1.0, 2.0], penalty_mode=PenaltyMode.DOUBLE)
    assert info.value.hypothesis == "penalty_mode == paper"


# ---------------------------------------------------------------- Itô formula

def test_ito_free_drift_is_exact(instance):
    # u = T - t: both sides equal T²·Nx·dx
    _, spec, disc, noise = instance("free_constant")
    report = vs.check_ito_residual(spec, disc, noise, "square")
    assert report.value <= 1e-12
    assert report.details["refined_residual"] <= 1e-12
    assert report.details["lhs_value"] == pytest.approx(spec.T ** 2 * disc.Nx * 2 * disc.R / (disc.Nx + 1), rel=1e-12)
    assert report.passed


@pytest.mark.parametrize("phi", ["square", "positive_square"])
def test_ito_reflected_ode_is_exact_for_quadratics(instance, phi):
    _, spec, disc, noise = instance("reflected_ode")
    report = vs.check_ito_residual(spec, disc, noise, phi)
    assert report.value <= 1e-10
    assert report.passed, report.details


def test_ito_zero_data(small_disc):
    spec = ProblemSpec(T=1.0, L="-1", U="1")
    report = vs.check_ito_residual(spec, small_disc, still_noise(spec, small_disc))
    assert report.value == 0.0
    assert report.passed


def test_ito_unknown_phi(instance):
    _, spec, disc, noise = instance("reflected_ode")
    with pytest.raises(UnsupportedPhi):
        vs.check_ito_residual(spec, disc, noise, "cube")


def test_phi_catalog_derivatives():
    v = np.linspace(-2.0, 2.0, 41)
    step = 1e-6
    for name in vs.PHI_CATALOG:
        Phi, dPhi, d2Phi = vs.phi_functions(name)
        smooth = v[np.abs(v) > 0.1]
        np.testing.assert_allclose((Phi(smooth + step) - Phi(smooth - step)) / (2 * step), dPhi(smooth), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose((dPhi(smooth + step) - dPhi(smooth - step)) / (2 * step), d2Phi(smooth), rtol=1e-6, atol=1e-8)


def test_ito_difference_of_mirrored_problems(instance):
    _, first, disc, noise = instance("reflected_ode")
    _, second, _, _ = instance("reflected_ode_lower")
    report = vs.check_ito_difference(first, second, disc, noise, "square")
    assert report.passed, report.details


def test_ito_difference_positive_part_of_ordered_pair(instance):
    _, low, disc, noise = instance("wide_band")
    _, high, _, _ = instance("wide_band_drift")
    report = vs.check_ito_difference(low, high, disc, noise, "positive_square")
    assert report.value == 0.0
    assert report.passed


# ---------------------------------------------------------------- hypotheses

def test_separability_trivial_witness(small_disc):
    spec = ProblemSpec(T=1.0, L="-1", U="1", separability_witness=SeparabilityWitness())
    report = vs.check_separability(spec, small_disc, still_noise(spec, small_disc))
    assert report.passed
    assert report.value == 1.0


def test_separability_witness_below_lower(small_disc):
    spec = ProblemSpec(T=1.0, L="0.5", U="1", psi="0.5", separability_witness=SeparabilityWitness())
    report = vs.check_separability(spec, small_disc, still_noise(spec, small_disc))
    assert not report.passed
    assert report.value == pytest.approx(-0.5)


def test_separability_instance(instance):
    _, spec, disc, noise = instance("separability")
    report = vs.check_separability(spec, disc, noise)
    assert report.passed
    assert report.value == pytest.approx(0.1, abs=1e-12)


def test_separability_needs_witness(small_disc):
    spec = ProblemSpec(T=1.0, L="-1", U="1")
    with pytest.raises(PreconditionUnmet) as info:
        vs.check_separability(spec, small_disc, still_noise(spec, small_disc))
    assert info.value.hypothesis == "(HO)(iv)"


def test_lipschitz_declared_constants_hold():
    spec = ProblemSpec(T=1.0, f="clamp(y, -1, 1)", g="0.3*z1", h=["0.4*z1"], lip=LipschitzData(C=1.0, alpha=0.3, beta=0.4))
    report = vs.check_lipschitz_declared(spec, M=5000, seed=1)
    assert report.passed
    assert report.value == 0


def test_lipschitz_violation_has_witness():
    spec = ProblemSpec(T=1.0, f="y*y", lip=LipschitzData(C=1.0))
    report = vs.check_lipschitz_declared(spec, M=5000, seed=1)
    assert not report.passed
    witness = report.details["witnesses"]["f"]
    assert witness["difference"] > witness["bound"]
    assert max(abs(witness["y"]), abs(witness["y_prime"])) > 5.0


def test_hypotheses_report(instance):
    _, spec, disc, _ = instance("reflected_ode")
    assert vs.check_hypotheses_report(spec, disc).passed
    _, broken, disc, _ = instance("broken_contraction")
    report = vs.check_hypotheses_report(broken, disc)
    assert not report.passed
    assert report.details["violated"] == ["(H)(iv)"]


# ---------------------------------------------------------------- reflection and representation

@pytest.mark.parametrize("name", ["reflected_ode", "reflected_ode_lower", "noisy_band"])
def test_skorokhod(instance, name):
    _, spec, disc, noise = instance(name)
    report = vs.check_skorokhod(spec, disc, noise, name)
    assert report.status == CheckStatus.PASS
    assert report.value == 0.0


@pytest.mark.slow
def test_feynman_kac_gaussian(instance):
    _, spec, disc, noise = instance("gaussian_heat")
    assert vs.check_feynman_kac(spec, disc, noise).passed


def test_noisy_band_data_vanish_at_the_ends(instance):
    _, spec, disc, _ = instance("noisy_band")
    ends = np.array([-disc.R, disc.R])
    for expr in (spec.psi_expr, spec.f_expr, *spec.h_exprs):
        assert np.all(np.abs(eval_slice(expr, 0.5, ends)) <= 1e-6)


@pytest.mark.slow
def test_feynman_kac_noisy_band(instance):
    _, spec, disc, noise = instance("noisy_band")
    report = vs.check_feynman_kac(spec, disc, noise)
    assert report.passed, report.details


def test_feynman_kac_reflected_ode(instance):
    _, spec, disc, noise = instance("reflected_ode")
    report = vs.check_feynman_kac(spec, disc, noise)
    assert report.passed
    assert report.value <= 1e-10


def test_measure_identification(instance):
    _, spec, disc, noise = instance("reflected_ode")
    report = vs.check_measure_identification(spec, disc, noise, M=10_000, seed=1)
    assert report.passed
    assert report.details["grid_mass"] == pytest.approx(0.7 * 2 * disc.R, rel=2e-2)


def test_measure_identification_rejects_side(instance):
    _, spec, disc, noise = instance("reflected_ode")
    with pytest.raises(ConfigurationError):
        vs.check_measure_identification(spec, disc, noise, M=10, seed=1, which="both")


def test_picard_check_exp_decay(instance):
    config, spec, disc, noise = instance("exp_decay")
    report = vs.check_picard(spec, disc, noise, config.picard.tol, config.picard.max_iter, expected_u0="exp(-1)")
    assert report.status == CheckStatus.PASS
    assert report.details["u0_error"] <= 1e-3
    assert report.details["mu"] == pytest.approx(34.0, rel=1e-9)


def test_picard_check_broken(instance):
    _, spec, disc, noise = instance("broken_contraction")
    with pytest.raises(NotContractive):
        vs.check_picard(spec, disc, noise)


# ---------------------------------------------------------------- suites

def test_empty_suite():
    summary, reports = vs.run_suite(SuiteConfig())
    assert reports == []
    assert list(summary.columns) == vs.SUMMARY_COLUMNS


def test_unknown_check_is_rejected_before_running():
    suite = SuiteConfig(checks=[
        SuiteEntry(check="hypotheses", instance="reflected_ode"),
        SuiteEntry(check="telepathy", instance="reflected_ode"),
    ])
    with pytest.raises(ConfigurationError):
        vs.run_suite(suite)


def test_bad_params_are_rejected():
    suite = SuiteConfig(checks=[SuiteEntry(check="ito_residual", instance="reflected_ode", params={"colour": "red"})])
    with pytest.raises(ConfigurationError):
        vs.run_suite(suite)


def test_suite_runs_on_supplied_instances():
    suite = SuiteConfig(checks=[SuiteEntry(check="hypotheses", instance="reflected_ode")])
    assert set(vs.suite_instances(suite)) == {"reflected_ode"}
    _, reports = vs.run_suite(suite, instances={"reflected_ode": load_instance("broken_contraction")})
    assert reports[0].status == CheckStatus.FAIL
    with pytest.raises(ConfigurationError, match="missing"):
        vs.run_suite(suite, instances={})


def test_suite_instances_include_partners():
    suite = SuiteConfig(checks=[SuiteEntry(check="comparison", instance="wide_band", params={"other": "wide_band_drift"})])
    assert list(vs.suite_instances(suite)) == ["wide_band", "wide_band_drift"]


def test_broken_suite_reports_failure():
    summary, reports = vs.run_suite(load_suite("broken"))
    assert len(reports) == 1
    assert reports[0].status == CheckStatus.FAIL
    assert reports[0].metric == "contraction"
    assert math.isnan(reports[0].value)
    assert summary.loc[0, "instance"] == "broken_contraction"


def test_summary_columns():
    suite = SuiteConfig(checks=[
        SuiteEntry(check="hypotheses", instance="reflected_ode"),
        SuiteEntry(check="skorokhod", instance="reflected_ode"),
    ])
    summary, reports = vs.run_suite(suite)
    assert list(summary.columns) == vs.SUMMARY_COLUMNS
    assert list(summary["status"]) == ["pass", "pass"]
    assert all(r.passed for r in reports)


@pytest.mark.slow
def test_default_suite_passes():
    summary, reports = vs.run_suite(load_suite("default"))
    failed = summary[summary["status"] == "fail"]
    assert failed.empty, failed.to_dict("records")
