import math

import numpy as np
import pytest
from scipy import integrate, optimize

from mvlab.measure import EmpiricalMeasure, dkw_margin, stochastic_order, wasserstein
from mvlab.model import DissipativeConstants, custom, double_well, fit_dissipative_constants, multi_well
from mvlab.invariant import (
    PsiControls,
    PsiResult,
    canonical_seeds,
    find_invariant_measures,
    fixed_point_moment_bound,
    gibbs_oracle_1d,
    moment_certificate,
    psi,
    self_consistency_roots_1d,
)
from mvlab.measure import MeasureSummary
from mvlab.particle import InitialLaw

FAST = PsiControls(n_particles=2000, burn_in=1.0, window=1.0)

# frozen from the quadrature oracle; cross-checked against scipy.quad below
DW_MEAN_AT_0_9 = 0.9348985340733732
DW_ROOT_3_009 = 0.986217260360718


def quad_gibbs_mean(beta, sigma_sq, m):
    """Independent oracle: adaptive quadrature of exp(-2 V / sigma^2)."""

    def V(x):
        return x**4 / 4 - x**2 / 2 + beta * (x**2 / 2 - m * x)

    xs = np.linspace(-4, 4, 8001)
    shift = (2 * V(xs) / sigma_sq).min()

    def w(x):
        return math.exp(-2 * V(x) / sigma_sq + shift)

    z = integrate.quad(w, -6, 6, limit=400, points=[-1, 0, 1], epsabs=0, epsrel=1e-13)[0]
    num = integrate.quad(lambda x: x * w(x), -6, 6, limit=400, points=[-1, 0, 1], epsabs=0, epsrel=1e-13)[0]
    return num / z


# -- Gibbs oracle --


def test_gibbs_ou_is_standard_normal():
    g = gibbs_oracle_1d(custom([[0.0, -1.0]], sigma=math.sqrt(2.0)), 0.0)
    assert g.mean == pytest.approx(0.0, abs=1e-8)
    assert g.variance == pytest.approx(1.0, abs=1e-8)


def test_gibbs_symmetric_mean_zero():
    g = gibbs_oracle_1d(double_well(2.5, 0.3), 0.0)
    assert abs(g.mean) < 1e-10
    np.testing.assert_allclose(g.density, g.density[::-1], rtol=1e-9, atol=1e-300)


def test_gibbs_frozen_mean():
    g = gibbs_oracle_1d(double_well(2.5, 0.3), 0.9)
    assert g.mean == pytest.approx(quad_gibbs_mean(2.5, 0.09, 0.9), abs=1e-9)
    assert g.mean == pytest.approx(DW_MEAN_AT_0_9, abs=1e-12)


def test_gibbs_rejects_unsupported():
    from mvlab.errors import UnsupportedModelError

    with pytest.raises((UnsupportedModelError, ValueError)):
        gibbs_oracle_1d(double_well(2.5, 0.3, sigma_tanh=0.1), 0.0)


# -- self-consistency roots --


def test_roots_three_wells():
    roots = self_consistency_roots_1d(double_well(3.0, 0.3))
    assert len(roots) == 3
    assert roots[1] == pytest.approx(0.0, abs=1e-9)
    assert roots[0] == pytest.approx(-roots[2], abs=1e-9)
    assert 0 < roots[2] < 1
    assert roots[2] == pytest.approx(DW_ROOT_3_009, abs=1e-8)
    # independent check: m* solves m = mean(Gibbs(m)) under adaptive quadrature
    ref = optimize.brentq(lambda m: m - quad_gibbs_mean(3.0, 0.09, m), 0.5, 1.2, xtol=1e-12)
    assert roots[2] == pytest.approx(ref, abs=1e-7)


@pytest.mark.parametrize("beta,sigma", [(1.0, 0.5), (3.0, 0.3), (5.0, 1.2)])
def test_zero_always_a_root(beta, sigma):
    roots = self_consistency_roots_1d(double_well(beta, sigma))
    assert min(abs(r) for r in roots) < 1e-9


def test_roots_at_moderate_and_large_noise():
    assert len(self_consistency_roots_1d(double_well(3.0, math.sqrt(2.0)), (-3, 3))) == 3
    roots = self_consistency_roots_1d(double_well(3.0, 2.0), (-3, 3))
    assert roots == [pytest.approx(0.0, abs=1e-9)]


# -- Psi --


def test_psi_ou_standard_gaussian():
    ou = custom([[0.0, -1.0]], sigma=math.sqrt(2.0))
    out = psi(ou, EmpiricalMeasure.dirac(0.0), PsiControls(n_particles=10_000))
    var = float(out.law.variance()[0])
    assert abs(var - 1.0) < 3 * math.sqrt(2.0 / 10_000)
    assert abs(float(out.law.mean[0])) < 0.05


def test_psi_frozen_double_well_matches_gibbs():
    m = double_well(2.5, 0.3)
    out = psi(m, EmpiricalMeasure.dirac(0.0), PsiControls(n_particles=10_000))
    assert gibbs_oracle_1d(m, 0.0).w1_to(out.law) < 0.02


def test_psi_deterministic_equilibrium():
    m = custom([[1.0, -1.0]], sigma=0.0)
    out = psi(m, EmpiricalMeasure.dirac(1.0), FAST)
    np.testing.assert_array_equal(out.law.samples, 1.0)


def test_psi_monotone():
    m = double_well(3.0, 0.3)
    lo = psi(m, EmpiricalMeasure.dirac(0.1), FAST)
    hi = psi(m, EmpiricalMeasure.dirac(0.3), FAST)
    v = stochastic_order(lo.law, hi.law, tol=dkw_margin(FAST.n_particles))
    assert v.leq


def test_psi_reports_relaxation_and_window():
    out = psi(double_well(3.0, 0.3), EmpiricalMeasure.dirac(1.0), FAST)
    assert out.relaxation_time >= 0
    assert out.ergodic_window >= FAST.window
    assert out.residual_estimate < FAST.tol / 2


# -- moment certificates --


def test_fixed_point_bound_value():
    c = DissipativeConstants(2.25, 1.25, 1.0)
    assert fixed_point_moment_bound(c, 0.09, 1) == pytest.approx(1.045, abs=1e-15)


def test_certificate_fails_on_far_law():
    c = fit_dissipative_constants(double_well(2.5, 0.3))
    fake = PsiResult(EmpiricalMeasure.dirac(10.0), MeasureSummary.from_mean([0.0], 0.0), 0.0, 1.0, 0.0)
    cert = moment_certificate(fake, c, sigma_hi=0.09)
    assert not cert.passed
    assert cert.slack < 0


def test_certificate_p4_form():
    c = fit_dissipative_constants(double_well(2.5, 0.3))
    out = psi(double_well(2.5, 0.3), EmpiricalMeasure.dirac(0.0), FAST)
    assert moment_certificate(out, c, p=4.0, sigma_hi=0.09).passed
    with pytest.raises(ValueError):
        moment_certificate(out, c, p=1.5)


# -- fixed points --


def test_three_measures_double_well_small_n():
    m = double_well(3.0, 0.3)
    rep = find_invariant_measures(m, canonical_seeds(m), FAST)
    assert rep.count == 3
    assert rep.chain_ordered
    roots = self_consistency_roots_1d(m)
    np.testing.assert_allclose(sorted(rep.means[:, 0]), roots, atol=0.02)
    assert all(r < FAST.tol for r in rep.fixed_point_residuals)
    assert all(c.passed for c in rep.moment_certificates)


def test_high_noise_single_measure():
    m = double_well(3.0, 2.0)
    rep = find_invariant_measures(m, canonical_seeds(m), FAST)
    assert rep.count == 1
    assert abs(rep.means[0, 0]) < 0.1


def test_deterministic_multi_well_diracs():
    m = multi_well(24.0, 0.0)
    seeds = [InitialLaw.dirac(a) for a in (-2.0, 0.0, 2.0)]
    rep = find_invariant_measures(m, seeds, FAST)
    assert rep.count == 3
    for law, a in zip(rep.measures, (-2.0, 0.0, 2.0)):
        np.testing.assert_array_equal(law.samples, a)
    assert rep.chain_ordered


def test_report_json(tmp_path):
    m = multi_well(24.0, 0.0)
    rep = find_invariant_measures(m, [InitialLaw.dirac(0.0)], FAST)
    path = rep.to_json(str(tmp_path))
    import json

    doc = json.load(open(path))
    assert doc
    blob = EmpiricalMeasure.load(tmp_path / "invariant_measure_0.mvlm")
    assert wasserstein(blob, rep.measures[0]) == 0.0


def test_stopping_rule_ignores_seed_step():
    from mvlab.invariant import _close_to_fixed_point

    # a big first step (Dirac spreading out) must not fake fast contraction
    assert not _close_to_fixed_point([0.2, 0.03], 0.05)
    assert _close_to_fixed_point([0.2, 0.03, 0.01], 0.05)
    # slow contraction: q = 0.9 leaves r q / (1 - q) = 0.36 > tol
    assert not _close_to_fixed_point([0.2, 0.044, 0.04], 0.05)
    # residuals at the noise floor fall back to the plain step test
    assert _close_to_fixed_point([0.2, 0.01, 0.012], 0.05)
    assert _close_to_fixed_point([0.0], 0.05)


def test_stopping_rule_stagnant_floor():
    from mvlab.invariant import _close_to_fixed_point

    # a flat residual at the sampling floor counts as converged
    assert _close_to_fixed_point([0.09, 0.0091, 0.00908], 0.05)
    # a steady 13% contraction still far from the fixed point does not
    assert not _close_to_fixed_point([0.69, 0.0186, 0.0162], 0.05)


def test_repelled_rule():
    from mvlab.invariant import _repelled

    assert _repelled([0.0067, 0.0083], se=0.002, tol=0.05)
    assert not _repelled([0.0083, 0.0067], se=0.002, tol=0.05)  # shrinking: attracted
    assert not _repelled([0.0067, -0.0083], se=0.002, tol=0.05)  # sign flip: noise
    assert not _repelled([0.003, 0.004], se=0.002, tol=0.05)  # below the noise
    assert not _repelled([0.15, 0.25], se=0.002, tol=0.05)  # far from any fixed point
    assert _repelled([0.02, 0.06], se=0.002, tol=0.05)  # strong repulsion may overshoot tol


def test_multi_well_all_roots_found():
    # the middle measures repel Picard (Psi slope ~1.29 there) and are bracketed
    m = multi_well(24.0, 1.0)
    rep = find_invariant_measures(m, canonical_seeds(m), FAST)
    assert rep.count == 5 and rep.chain_ordered
    np.testing.assert_allclose(rep.means[:, 0], self_consistency_roots_1d(m), atol=0.02)
    assert [s.method for s in rep.seed_runs] == ["picard", "bisection", "picard", "bisection", "picard"]


def test_seed_next_to_unstable_point():
    m = double_well(3.0, 0.3)
    rep = find_invariant_measures(m, [InitialLaw.dirac(0.02), InitialLaw.dirac(0.2)], FAST)
    near, far = rep.seed_runs
    assert near.method == "bisection" and abs(near.result.law.mean[0]) < 0.02
    # a seed well inside a basin still follows Picard to the well
    assert far.method == "picard" and far.result.law.mean[0] > 0.9
