import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvlab import _accel
from mvlab.errors import BlowUpError, ConfigError
from mvlab.measure import EmpiricalMeasure, wasserstein
from mvlab.model import (
    cross_coupled_2d,
    custom,
    double_well,
    fit_dissipative_constants,
    multi_well,
    perturbed_double_well,
    shifted_model,
)
from mvlab.particle import (
    InitialLaw,
    IntegrationSchedule,
    ParticleEnsemble,
    coupled_pair,
    init_ensemble,
    simulate,
    simulate_frozen,
    step_mckean_vlasov,
)

# frozen on first run: mean of Gaussian(0, 0.01) with N = 1e4, seed 2024
GAUSS_MEAN_SEED_2024 = 0.0006749768514213656

STEPPING_MODELS = {
    "double_well": double_well(3.0, 0.3),
    "double_well_tanh": double_well(3.0, 0.3, sigma_tanh=0.05),
    "multi_well": multi_well(24.0, 1.0),
    "perturbed": perturbed_double_well(3.1, 0.2, amp=0.1, freq=2.0),
    "cross_2d": cross_coupled_2d(14.0, 0.4, 0.3),
    "kernel": custom([[0.0, 0.0, 0.0, -1.0]], kernel=[0.0, 1.0, 0.0, 0.5], sigma=0.4),
    "mean_sigma": custom([[0.0, -1.0]], mean_coupling=[[0.5]], sigma=[[0.5, 0.0, 0.1, 0.0, 0.0]], sigma_bounds=(0.1, 0.5)),
}


def _start(model, n=64, seed=3):
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(rng.normal(0.0, 0.7, size=(n, model.dimension)), 99)


@pytest.mark.parametrize("name", list(STEPPING_MODELS))
@pytest.mark.parametrize("scheme", ["euler_maruyama", "tamed_euler"])
def test_backends_agree(name, scheme):
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not importable")
    model = STEPPING_MODELS[name]
    prev = _accel.backend()
    out = {}
    try:
        for b in ("numba", "numpy"):
            _accel.set_backend(b)
            ens = _start(model)
            ens.advance(model, 200, 1e-3, scheme)
            out[b] = ens.states
    finally:
        _accel.set_backend(prev)
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=0, atol=1e-10)


def test_backends_agree_frozen():
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not importable")
    model = double_well(3.0, 0.3)
    prev = _accel.backend()
    out = {}
    try:
        for b in ("numba", "numpy"):
            _accel.set_backend(b)
            ens = _start(model)
            ens.advance(model, 200, 1e-3, frozen=EmpiricalMeasure([0.4]))
            out[b] = ens.states
    finally:
        _accel.set_backend(prev)
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=0, atol=1e-10)


def test_env_flag_selects_numpy():
    import subprocess
    import sys

    code = "from mvlab import backend; print(backend())"
    env = {"MVLAB_BACKEND": "numpy", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


# -- initial laws --


def test_dirac_init():
    ens = init_ensemble(InitialLaw.dirac(1.0), 4, 0)
    np.testing.assert_array_equal(ens.states, np.ones((4, 1)))


def test_cloud_init_is_identity():
    x = np.random.default_rng(0).normal(size=(17, 2))
    ens = init_ensemble(InitialLaw.cloud(x), None, 5)
    np.testing.assert_array_equal(ens.states, x)


def test_gaussian_init_mean():
    ens = init_ensemble(InitialLaw.gaussian(0.0, 0.01), 10_000, 2024)
    m = ens.states.mean()
    assert abs(m) < 3 * 0.1 / 100
    assert m == pytest.approx(GAUSS_MEAN_SEED_2024, abs=1e-15)


def test_init_from_config():
    law = InitialLaw.from_config({"kind": "uniform_box", "lo": [0.0], "hi": [2.0]})
    ens = init_ensemble(law, 1000, 1)
    assert ens.states.min() >= 0.0 and ens.states.max() <= 2.0
    with pytest.raises(ConfigError, match="point"):
        InitialLaw.from_config({"kind": "dirac"})


# -- stepping --


def test_zero_model_is_static():
    m = custom([[0.0, 0.0]], sigma=0.0)
    ens = ParticleEnsemble([[0.2], [-1.0]], 1)
    out = step_mckean_vlasov(ens, m, 0.01)
    np.testing.assert_array_equal(out.states, ens.states)
    assert out.time == pytest.approx(0.01)
    assert ens.time == 0.0


def test_one_euler_step():
    out = step_mckean_vlasov(ParticleEnsemble([[1.0]], 0), custom([[0.0, -1.0]], sigma=0.0), 0.1)
    assert out.states[0, 0] == pytest.approx(0.9, abs=1e-15)


def test_double_well_critical_points_fixed():
    ens = ParticleEnsemble([[-1.0], [1.0]], 0)
    out = step_mckean_vlasov(ens, double_well(0.0, 0.0), 1e-3)
    np.testing.assert_array_equal(out.states, ens.states)


def test_symmetric_pair_stays_symmetric():
    # with beta > 0 the pair is pulled toward its mean 0, but never off it
    ens = ParticleEnsemble([[-1.0], [1.0]], 0)
    out = step_mckean_vlasov(ens, double_well(7.0, 0.0), 1e-3)
    assert out.states[0, 0] == -out.states[1, 0]
    assert out.states[1, 0] == pytest.approx(1.0 - 7e-3, abs=1e-15)


def test_tamed_step_bounded():
    m = custom([[0.0, 0.0, 0.0, -1.0]], sigma=0.0)
    out = step_mckean_vlasov(ParticleEnsemble([[100.0]], 0), m, 0.1, scheme="tamed_euler")
    # drift -1e6 tamed to -1e6 / (1 + 1e5)
    assert out.states[0, 0] == pytest.approx(100.0 - 0.1 * 1e6 / (1 + 0.1 * 1e6), rel=1e-12)


@given(st.floats(-3, 3), st.floats(0, 10), st.integers(2, 20))
def test_dirac_preserved_without_noise(x0, beta, n):
    ens = ParticleEnsemble(np.full((n, 1), x0), 0)
    ens.advance(double_well(beta, 0.0), 300, 1e-3)
    assert np.all(ens.states == ens.states[0])


def test_blow_up_reported():
    m = custom([[0.0, 0.0, 0.0, 1.0]], sigma=0.0)
    ens = ParticleEnsemble([[0.0], [2.0]], 0)
    with pytest.raises(BlowUpError) as exc:
        ens.advance(m, 10_000, 1e-2)
    assert exc.value.particle == 1


# -- schedules and simulate --


def test_schedule_validation():
    with pytest.raises(ConfigError):
        IntegrationSchedule(0.0, 1.0)
    with pytest.raises(ConfigError):
        IntegrationSchedule(1e-3, 1.0, (0.5, 0.2))
    with pytest.raises(ConfigError):
        IntegrationSchedule(1e-3, 1.0, (0.0, 2.0))
    with pytest.raises(ConfigError):
        IntegrationSchedule(0.5, 1.0, (0.0, 0.1))
    assert len(IntegrationSchedule.uniform(10.0, 1.0).checkpoint_times) == 11


def test_t_zero_returns_initial_law():
    ens = init_ensemble(InitialLaw.gaussian(0.0, 1.0), 500, 1)
    res = simulate(ens, double_well(3.0, 0.3), IntegrationSchedule(1e-3, 0.0))
    assert len(res) == 1
    assert res[0][1] == ens.law()


def test_ou_variance():
    ou = custom([[0.0, -1.0]], sigma=np.sqrt(2.0))
    n = 10_000
    res = simulate(init_ensemble(0.0, n, 7), ou, IntegrationSchedule.uniform(10.0, 5.0))
    var = float(res[-1][1].variance()[0])
    target = 1 - np.exp(-20.0)
    assert abs(var - target) < 3 * np.sqrt(2.0 / n)


def test_zero_noise_flow_to_well():
    res = simulate(init_ensemble(0.5, 8, 0), double_well(0.0, 0.0), IntegrationSchedule.uniform(20.0, 10.0, dt=1e-2))
    np.testing.assert_allclose(res[-1][1].samples, 1.0, atol=1e-6)


def test_semigroup_bit_identical():
    m = double_well(3.0, 0.3)
    ens = init_ensemble(InitialLaw.gaussian(0.0, 0.25), 1000, 5)
    one = simulate(ens, m, IntegrationSchedule.uniform(1.0, 0.5))
    two = simulate(one.final, m, IntegrationSchedule(1e-3, 0.5))
    direct = simulate(ens, m, IntegrationSchedule.uniform(1.5, 0.5))
    np.testing.assert_array_equal(two.final.states, direct.final.states)
    assert wasserstein(two[-1][1], direct[-1][1]) == 0.0


def test_determinism():
    m = multi_well(24.0, 1.0)
    runs = [simulate(init_ensemble(0.3, 500, 11), m, IntegrationSchedule.uniform(0.5, 0.25)).final.states for _ in range(2)]
    np.testing.assert_array_equal(runs[0], runs[1])


def test_moment_control():
    m = double_well(2.5, 0.3)
    c = fit_dissipative_constants(m)
    ceiling = (c.gamma + m.sigma_sq_sup * m.dimension / 2) / (c.alpha - c.beta_w)
    res = simulate(init_ensemble(InitialLaw.gaussian(0.5, 0.5), 5000, 3), m, IntegrationSchedule.uniform(5.0, 0.5))
    assert max(law.second_moment for law in res.laws) <= 1.2 * ceiling


def test_frozen_matches_decoupled_model():
    # freezing the mean at 0 is the same as an uncoupled SDE with drift -(x^3 - x + beta x)
    beta = 2.5
    ens = init_ensemble(InitialLaw.gaussian(0.0, 0.2), 300, 8)
    a = simulate_frozen(double_well(beta, 0.3), EmpiricalMeasure([0.0]), ens, IntegrationSchedule(1e-3, 0.5))
    b = simulate(ens, custom([[0.0, 1.0 - beta, 0.0, -1.0]], sigma=0.3), IntegrationSchedule(1e-3, 0.5))
    np.testing.assert_allclose(a.final.states, b.final.states, atol=1e-12)


def test_frozen_equilibrium():
    m = custom([[0.0, -1.0]], mean_coupling=[[1.0]], sigma=0.0)
    res = simulate_frozen(m, EmpiricalMeasure([1.0]), init_ensemble(1.0, 4, 0), IntegrationSchedule.uniform(2.0, 1.0))
    np.testing.assert_array_equal(res[-1][1].samples, 1.0)


def test_shift_covariance():
    m = double_well(3.0, 0.3)
    a = 1.0
    x0 = np.random.default_rng(2).normal(1.0, 0.3, size=(400, 1))
    base = simulate(ParticleEnsemble(x0, 4), m, IntegrationSchedule(1e-3, 1.0))
    shifted = simulate(ParticleEnsemble(x0 - a, 4), shifted_model(m, a), IntegrationSchedule(1e-3, 1.0))
    np.testing.assert_allclose(shifted.final.states + a, base.final.states, atol=1e-9)


# -- coupled runs --


def test_coupled_identical():
    m = double_well(2.5, 0.3)
    ens = init_ensemble(InitialLaw.gaussian(0.0, 0.3), 500, 1)
    res = coupled_pair(m, m, ens, ens, IntegrationSchedule.uniform(1.0, 0.25))
    assert np.all(res.order_fraction == 1.0)


def test_coupled_shift_keeps_order():
    m = double_well(2.5, 0.3)
    ens = init_ensemble(InitialLaw.gaussian(0.0, 0.3), 5000, 1)
    res = coupled_pair(m, m, ens, ens.with_states(ens.states + 0.5), IntegrationSchedule.uniform(5.0, 0.25))
    assert res.order_fraction.min() >= 0.999


def test_coupled_drift_gap():
    lower = custom([[-1.0, -1.0]], sigma=0.5)
    upper = custom([[0.0, -1.0]], sigma=0.5)
    ens = init_ensemble(0.0, 1000, 2)
    res = coupled_pair(lower, upper, ens, ens, IntegrationSchedule.uniform(2.0, 0.5))
    assert np.all(res.order_fraction == 1.0)


def test_coupled_requires_shared_streams():
    m = double_well(2.5, 0.3)
    a = init_ensemble(0.0, 10, 1)
    with pytest.raises(ValueError):
        coupled_pair(m, m, a, init_ensemble(0.0, 10, 2), IntegrationSchedule(1e-3, 0.1))
    with pytest.raises(ValueError):
        coupled_pair(m, double_well(2.5, 0.4), a, a, IntegrationSchedule(1e-3, 0.1))
