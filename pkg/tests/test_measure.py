import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from mvlab.measure import (
    EmpiricalMeasure,
    SignedDiscreteMeasure,
    cone_membership,
    dkw_margin,
    kantorovich_norm,
    moment,
    stochastic_order,
    thin,
    transport,
    wasserstein,
)

small_floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
support_1d = st.lists(small_floats, min_size=1, max_size=8)
grid_points = st.lists(st.integers(-6, 6), min_size=1, max_size=8)


def cloud_2d(draw_n):
    return st.lists(st.tuples(small_floats, small_floats), min_size=1, max_size=draw_n)


def cdf_leq(x, y):
    """Oracle: F_x >= F_y at every atom (x below y in stochastic order)."""
    z = np.union1d(x, y)
    Fx = np.searchsorted(np.sort(x), z, side="right") / len(x)
    Fy = np.searchsorted(np.sort(y), z, side="right") / len(y)
    return bool(np.all(Fx >= Fy - 1e-12))


# -- construction and moments --


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((0, 1)))
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, np.nan])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], [0.3, 0.3])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], [-0.5, 1.5])


def test_moment_dirac_origin():
    assert moment(EmpiricalMeasure.dirac(0.0), 2) == 0.0


def test_moment_unit_pair():
    assert moment(EmpiricalMeasure([-1.0, 1.0]), 2) == pytest.approx(1.0, abs=1e-15)


def test_moment_three_points():
    # sqrt((0 + 1 + 4) / 3)
    assert moment(EmpiricalMeasure([0.0, 1.0, 2.0]), 2) == pytest.approx(math.sqrt(5 / 3), rel=1e-14)


def test_weighted_moment_matches_repeated_samples():
    a = EmpiricalMeasure([0.0, 1.0, 1.0, 3.0])
    b = EmpiricalMeasure([0.0, 1.0, 3.0], [0.25, 0.5, 0.25])
    for p in (1.0, 2.0, 3.5):
        assert a.moment(p) == pytest.approx(b.moment(p), rel=1e-14)
    np.testing.assert_allclose(a.mean, b.mean)


def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mu = EmpiricalMeasure(rng.normal(size=(50, 2)), rng.dirichlet(np.ones(50)))
    assert EmpiricalMeasure.from_bytes(mu.to_bytes()) == mu
    path = tmp_path / "m.mvlm"
    mu.save(path)
    back = EmpiricalMeasure.load(path)
    np.testing.assert_array_equal(back.samples, mu.samples)
    np.testing.assert_array_equal(back.weights, mu.weights)


# -- Wasserstein --


def test_w2_between_diracs():
    assert wasserstein(EmpiricalMeasure.dirac(0.3), EmpiricalMeasure.dirac(-1.1), 2) == pytest.approx(1.4, abs=1e-14)


def test_w1_unit_shift():
    assert wasserstein(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([1.0, 2.0]), 1) == pytest.approx(1.0, abs=1e-14)


@given(support_1d)
def test_w2_self_is_zero(xs):
    mu = EmpiricalMeasure(xs)
    assert wasserstein(mu, mu, 2) == pytest.approx(0.0, abs=1e-12)


@given(support_1d, support_1d)
def test_w1_matches_scipy(xs, ys):
    ours = wasserstein(EmpiricalMeasure(xs), EmpiricalMeasure(ys), 1)
    assert ours == pytest.approx(wasserstein_distance(xs, ys), abs=1e-9)


@given(support_1d, support_1d, support_1d)
def test_metric_axioms_1d(xs, ys, zs):
    a, b, c = EmpiricalMeasure(xs), EmpiricalMeasure(ys), EmpiricalMeasure(zs)
    ab, ba = wasserstein(a, b), wasserstein(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, abs=1e-9)
    assert wasserstein(a, c) <= ab + wasserstein(b, c) + 1e-9


@given(cloud_2d(6), cloud_2d(6), cloud_2d(6))
def test_metric_axioms_2d(xs, ys, zs):
    a, b, c = EmpiricalMeasure(xs), EmpiricalMeasure(ys), EmpiricalMeasure(zs)
    ab = wasserstein(a, b)
    assert ab == pytest.approx(wasserstein(b, a), abs=1e-9)
    assert wasserstein(a, c) <= ab + wasserstein(b, c) + 1e-9


def test_2d_assignment_matches_brute_force():
    from itertools import permutations

    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    best = min(np.mean(np.sum((x - y[list(p)]) ** 2, axis=1)) for p in permutations(range(6)))
    assert wasserstein(EmpiricalMeasure(x), EmpiricalMeasure(y), 2) == pytest.approx(math.sqrt(best), rel=1e-10)


def test_entropic_mode_above_cap():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 2))
    y = rng.normal(size=(300, 2)) + [1.0, 0.0]
    exact = transport(EmpiricalMeasure(x), EmpiricalMeasure(y), 2)
    approx = transport(EmpiricalMeasure(x), EmpiricalMeasure(y), 2, cap=100)
    assert exact.mode != approx.mode
    assert approx.value == pytest.approx(exact.value, rel=0.05)


def test_thin_1d_keeps_quantiles():
    mu = EmpiricalMeasure(np.linspace(0, 1, 1001))
    t = thin(mu, 11)
    assert t.n == 11
    assert wasserstein(mu, t, 1) < 0.05


# -- stochastic order --


def test_order_dominated():
    v = stochastic_order(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.5, 1.5]))
    assert v.relation == "dominated"
    assert v.leq and not v.geq


def test_order_equal():
    mu = EmpiricalMeasure([0.0, 2.0, 5.0])
    assert stochastic_order(mu, mu).relation == "equal"


def test_order_incomparable_has_witness():
    v = stochastic_order(EmpiricalMeasure([0.0, 3.0]), EmpiricalMeasure([1.0, 2.0]))
    assert v.relation == "incomparable"
    assert v.witness


def test_order_tolerance_absorbs_small_gap():
    rng = np.random.default_rng(1)
    x = rng.normal(size=2000)
    y = x + 0.001
    y[:3] -= 1.0  # a few stragglers cross
    assert stochastic_order(EmpiricalMeasure(x), EmpiricalMeasure(y)).relation == "incomparable"
    assert stochastic_order(EmpiricalMeasure(x), EmpiricalMeasure(y), tol=dkw_margin(2000)).leq


def test_order_2d_lp():
    mu = EmpiricalMeasure([[0.0, 0.0], [1.0, 0.0]])
    nu = EmpiricalMeasure([[0.0, 1.0], [1.0, 1.0]])
    assert stochastic_order(mu, nu).relation == "dominated"
    assert stochastic_order(nu, mu).relation == "dominates"
    crossed = EmpiricalMeasure([[1.0, -1.0]])
    v = stochastic_order(EmpiricalMeasure([[0.0, 0.0]]), crossed)
    assert v.relation == "incomparable"


@given(grid_points, grid_points)
def test_order_matches_cdf_oracle(xs, ys):
    v = stochastic_order(EmpiricalMeasure(xs), EmpiricalMeasure(ys))
    assert v.leq == cdf_leq(xs, ys)
    assert v.geq == cdf_leq(ys, xs)


@given(grid_points, grid_points)
def test_order_antisymmetric(xs, ys):
    v = stochastic_order(EmpiricalMeasure(xs), EmpiricalMeasure(ys))
    if v.leq and v.geq:
        assert v.relation == "equal"
        assert wasserstein(EmpiricalMeasure(xs), EmpiricalMeasure(ys), 1) == pytest.approx(0.0, abs=1e-12)


@given(st.lists(small_floats, min_size=1, max_size=8), st.data(), st.floats(1.0, 4.0))
def test_order_interval_moment_bound(xs, data, p):
    n = len(xs)
    s1 = data.draw(st.lists(st.floats(0, 3), min_size=n, max_size=n))
    s2 = data.draw(st.lists(st.floats(0, 3), min_size=n, max_size=n))
    lo = np.asarray(xs)
    mid = lo + s1
    hi = mid + s2
    mu, lam, nu = EmpiricalMeasure(lo), EmpiricalMeasure(mid), EmpiricalMeasure(hi)
    assert stochastic_order(mu, lam).leq and stochastic_order(lam, nu).leq
    assert lam.moment(p) ** p <= 2**p * (mu.moment(p) ** p + nu.moment(p) ** p) + 1e-9


# -- Kantorovich norm and cone --


def test_kantorovich_unit_difference():
    m = SignedDiscreteMeasure(np.array([1.0, 0.0]), np.array([1.0, -1.0]))
    assert kantorovich_norm(m) == pytest.approx(1.0, abs=1e-12)


def test_kantorovich_zero():
    assert kantorovich_norm(SignedDiscreteMeasure(np.zeros((0, 1)), np.zeros(0))) == 0.0
    cancel = SignedDiscreteMeasure(np.array([2.0, 2.0]), np.array([0.5, -0.5]))
    assert kantorovich_norm(cancel) == 0.0


def test_kantorovich_double_mass_at_origin():
    assert kantorovich_norm(SignedDiscreteMeasure(np.array([0.0]), np.array([2.0]))) == pytest.approx(2.0, abs=1e-12)


def test_kantorovich_positive_mass_away_from_origin():
    # f(x) = 1 + |x| is admissible, so the norm of delta_3 is 4
    assert kantorovich_norm(SignedDiscreteMeasure(np.array([3.0]), np.array([1.0]))) == pytest.approx(4.0, abs=1e-9)


@given(support_1d, support_1d)
def test_kantorovich_equals_w1_for_probabilities(xs, ys):
    mu, nu = EmpiricalMeasure(xs), EmpiricalMeasure(ys)
    k = kantorovich_norm(SignedDiscreteMeasure.difference(mu, nu))
    assert k == pytest.approx(wasserstein_distance(xs, ys), abs=1e-6)


@given(cloud_2d(4), cloud_2d(4))
def test_kantorovich_equals_w1_2d(xs, ys):
    mu, nu = EmpiricalMeasure(xs), EmpiricalMeasure(ys)
    k = kantorovich_norm(SignedDiscreteMeasure.difference(mu, nu))
    assert k == pytest.approx(wasserstein(mu, nu, 1), abs=1e-6)


def test_cone_cases():
    up = SignedDiscreteMeasure(np.array([1.0, 0.0]), np.array([1.0, -1.0]))
    down = SignedDiscreteMeasure(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    assert cone_membership(up)
    assert not cone_membership(down)
    assert cone_membership(SignedDiscreteMeasure(np.zeros((0, 1)), np.zeros(0)))


@given(grid_points, grid_points)
def test_cone_matches_order(xs, ys):
    mu, nu = EmpiricalMeasure(xs), EmpiricalMeasure(ys)
    in_cone = cone_membership(SignedDiscreteMeasure.difference(nu, mu))
    assert in_cone == stochastic_order(mu, nu).leq
