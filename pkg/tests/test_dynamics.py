import csv
import json
import math

import numpy as np
import pytest

from mvlab.dissipativity import builtin_config
from mvlab.dynamics import (
    EscapeOutcome,
    InstabilityReport,
    OrbitTrace,
    ProbeControls,
    ball_laws,
    comparison_probe,
    connecting_orbit_trace,
    instability_probe,
    middle_indices,
    multi_well_suite,
    shrinking_neighborhood_probe,
)
from mvlab.invariant import PsiControls, find_invariant_measures
from mvlab.measure import EmpiricalMeasure, stochastic_order
from mvlab.model import cross_coupled_2d, double_well, perturbed_double_well
from mvlab.particle import InitialLaw, IntegrationSchedule

SMALL = ProbeControls(n_particles=64, horizon_floor=20.0)


@pytest.fixture(scope="module")
def deterministic_report():
    m = double_well(3.0, 0.0)
    seeds = [InitialLaw.dirac(a) for a in (-1.0, 0.0, 1.0)]
    return m, find_invariant_measures(m, seeds, PsiControls(n_particles=64, burn_in=0.5, window=0.5))


# -- comparison --


def test_comparison_equal_laws():
    mu = EmpiricalMeasure(np.random.default_rng(0).normal(0, 0.5, 500))
    rep = comparison_probe(double_well(3.0, 0.3), mu, mu, IntegrationSchedule.uniform(1.0, 0.25))
    assert all(v.relation == "equal" for v in rep.verdicts)
    assert np.all(rep.order_fraction == 1.0)


def test_comparison_shifted_double_well():
    mu = EmpiricalMeasure(np.random.default_rng(1).normal(0, 0.5, 2000))
    rep = comparison_probe(double_well(3.0, 0.3), mu, mu.shifted(0.3), IntegrationSchedule.uniform(2.0, 0.1))
    assert len(rep.verdicts) == 21
    assert rep.passed
    assert rep.cooperative
    assert rep.order_fraction.min() >= 0.999


def test_comparison_upsamples_small_inputs():
    rep = comparison_probe(
        double_well(3.0, 0.3), EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(0.2),
        IntegrationSchedule.uniform(0.5, 0.25), n_particles=1000,
    )
    assert rep.passed
    assert rep.tolerance == pytest.approx(2 / math.sqrt(1000))


def test_comparison_negative_control():
    mu = EmpiricalMeasure(np.random.default_rng(2).normal(0, 0.5, 2000))
    rep = comparison_probe(double_well(-2.0, 0.3), mu, mu.shifted(0.3), IntegrationSchedule.uniform(3.0, 0.25))
    assert not rep.cooperative
    assert not rep.passed


def test_comparison_rejects_unordered_start():
    with pytest.raises(ValueError, match="witness"):
        comparison_probe(double_well(3.0, 0.3), EmpiricalMeasure([0.0, 3.0]), EmpiricalMeasure([1.0, 2.0]),
                         IntegrationSchedule(1e-3, 0.1))


def test_comparison_2d_needs_pairing():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 2))
    m = cross_coupled_2d(14.0, 0.3, 0.3)
    rep = comparison_probe(m, EmpiricalMeasure(x), EmpiricalMeasure(x + 0.2), IntegrationSchedule.uniform(0.5, 0.25))
    assert rep.passed
    with pytest.raises(ValueError, match="paired"):
        comparison_probe(m, EmpiricalMeasure(x), EmpiricalMeasure(x[:200] + 5.0), IntegrationSchedule(1e-3, 0.1))


# -- shrinking neighbourhoods --


def test_ball_laws_radii():
    laws = ball_laws(1.0, 0.64, r=0.61)
    for label, law, rho in laws:
        if law.kind == "dirac":
            assert abs(law.params["point"][0] - 1.0) == pytest.approx(rho)
        else:
            assert math.sqrt(float(law.params["cov"][0, 0])) == pytest.approx(rho)


def test_shrinking_from_the_center():
    m = double_well(2.8, math.sqrt(0.3))
    cfg = builtin_config("double_well", 1.0, 2.8, 0.3)
    rep = shrinking_neighborhood_probe(m, cfg, laws=[("dirac", InitialLaw.dirac(1.0), 0.0)], n_particles=2000)
    run = rep.runs[0]
    assert run.entry_time == 0.0 and run.stayed_in_inner
    assert rep.passed


def test_shrinking_from_offset_and_gaussian():
    m = double_well(2.8, math.sqrt(0.3))
    cfg = builtin_config("double_well", 1.0, 2.8, 0.3)
    mid = 0.5 * (cfg.r + cfg.r_bar)
    laws = [("d1.4", InitialLaw.dirac(1.4), 0.4), ("gmid", InitialLaw.gaussian(1.0, mid**2), mid)]
    rep = shrinking_neighborhood_probe(m, cfg, laws=laws, n_particles=2000)
    assert rep.config_passed
    assert rep.invariant and rep.entered
    assert rep.runs[1].radii[0] == pytest.approx(mid, rel=0.05)
    assert all(r.radii[-1] < cfg.r for r in rep.runs)


def test_shrinking_default_laws_are_inside_outer_ball():
    cfg = builtin_config("double_well", 1.0, 2.8, 0.3)
    for _, _, rho in ball_laws(cfg.a, cfg.r_bar, r=cfg.r):
        assert rho < cfg.r_bar


# -- instability --


def test_deterministic_middle_is_unstable(deterministic_report):
    m, rep = deterministic_report
    assert rep.count == 3
    out = instability_probe(m, rep, 1, controls=SMALL)
    assert out.verdict
    for o in out.outcomes:
        assert o.outcome == "escaped"
        assert o.target_index == (2 if o.direction > 0 else 0)
    assert out.ladder_consistent()
    assert out.smallest_escaping_epsilon == 0.02


def test_deterministic_well_is_stable(deterministic_report):
    m, rep = deterministic_report
    out = instability_probe(m, rep, 2, controls=SMALL)
    assert not out.verdict
    assert all(o.outcome == "returned" for o in out.outcomes)


def test_ladder_validation(deterministic_report):
    m, rep = deterministic_report
    with pytest.raises(ValueError):
        instability_probe(m, rep, 1, [0.05, 0.1], SMALL)
    with pytest.raises(ValueError):
        instability_probe(m, rep, 5, controls=SMALL)


def test_ladder_consistency_definition():
    center = EmpiricalMeasure.dirac(0.0)

    def rep(outcomes):
        return InstabilityReport(center, 1, [0.1, 0.05], [EscapeOutcome(e, d, o, None, None) for e, d, o in outcomes], 20.0)

    good = rep([(0.1, 1, "escaped"), (0.05, 1, "escaped"), (0.1, -1, "returned"), (0.05, -1, "returned")])
    assert good.ladder_consistent() and good.verdict
    bad = rep([(0.1, 1, "returned"), (0.05, 1, "escaped"), (0.1, -1, "returned"), (0.05, -1, "returned")])
    assert not bad.ladder_consistent()
    assert not bad.verdict


def test_middle_indices():
    assert middle_indices(3) == [1]
    assert middle_indices(5) == [1, 3]
    assert middle_indices(1) == []


# -- orbits --


def test_orbit_source_equals_target():
    mu = EmpiricalMeasure(np.random.default_rng(0).normal(0, 0.1, 200))
    tr = connecting_orbit_trace(double_well(3.0, 0.3), mu, mu, "increasing", epsilon=0.0, controls=SMALL)
    assert tr.captured and tr.capture_time == 0.0
    assert len(tr.checkpoints) == 1 and tr.monotone_flags == []
    assert tr.accepted


def test_deterministic_orbits(deterministic_report, tmp_path):
    m, rep = deterministic_report
    up = connecting_orbit_trace(m, rep.measures[1], rep.measures[2], "increasing", 0.05, SMALL)
    down = connecting_orbit_trace(m, rep.measures[1], rep.measures[0], "decreasing", 0.05, SMALL)
    for tr in (up, down):
        assert tr.accepted and tr.violations == 0
        assert tr.terminal_distance < SMALL.capture_radius
        d_src = tr.endpoint_distances["source"]
        assert np.all(np.diff(d_src) >= 0)
    files = up.write(str(tmp_path), "up")
    doc = json.load(open(files["json"]))
    assert doc["accepted"] is True
    with open(files["csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "w2_to_source", "w2_to_target", "mean_0"]
    assert len(rows) == len(up.checkpoints) + 1


def test_orbit_direction_checked(deterministic_report):
    m, rep = deterministic_report
    with pytest.raises(ValueError):
        connecting_orbit_trace(m, rep.measures[1], rep.measures[0], "increasing", 0.05, SMALL)


def test_orbit_trace_invariants():
    mu = EmpiricalMeasure.dirac(0.0)
    v = stochastic_order(mu, mu)
    dist = {"source": np.zeros(2), "target": np.zeros(2)}
    with pytest.raises(ValueError):
        OrbitTrace([(0.0, mu), (0.0, mu)], [v], dist, "increasing", 0.05, True, 0.0, 0.1)
    with pytest.raises(ValueError):
        OrbitTrace([(0.0, mu), (1.0, mu)], [], dist, "increasing", 0.05, True, 1.0, 0.1)
    ok = OrbitTrace([(0.0, mu), (1.0, mu)], [v], dist, "increasing", 0.05, True, 1.0, 0.1)
    assert ok.violations == 0 and ok.accepted


# -- composite suite --


def test_suite_on_unperturbed_family():
    # with no perturbation the perturbed family is the double well
    m = perturbed_double_well(3.0, 0.0, amp=0.0)
    seeds = [InitialLaw.dirac(a) for a in (-1.0, 0.0, 1.0)]
    inv = find_invariant_measures(m, seeds, PsiControls(n_particles=64, burn_in=0.5, window=0.5))
    rep = multi_well_suite(m, controls=SMALL, report=inv)
    assert rep.passed
    assert rep.count_ok and not rep.partial
    assert len(rep.orbits) == 2
    d = rep.to_dict()
    assert d["count"] == 3 and d["passed"]


def test_suite_rejects_custom():
    from mvlab.model import custom

    with pytest.raises(ValueError):
        multi_well_suite(custom([[0.0, -1.0]], sigma=1.0))
