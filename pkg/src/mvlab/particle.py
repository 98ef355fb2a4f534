"""Interacting particle approximation: ensembles, schedules, simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .errors import BlowUpError, ConfigError
from .measure import EmpiricalMeasure, MeasureSummary
from .model import ModelSpec, as_summary
from .rng import derive_seed, particle_keys, seed_key

SCHEMES = ("euler_maruyama", "tamed_euler")
DEFAULT_DT = 1e-3


class ParticleEnsemble:
    """N particle states plus the position in their noise streams.

    Particle ``i`` draws its increments from the stream keyed by
    ``(seed_root, offset + i)``; ``step`` counts steps taken so far, so every
    particle's stream position is ``step * dim``.
    """

    def __init__(self, states, seed_root: int, time: float = 0.0, step: int = 0, offset: int = 0):
        x = np.array(states, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("states must be a nonempty (N, d) array")
        if not np.all(np.isfinite(x)):
            raise ValueError("states must be finite")
        self.states = np.ascontiguousarray(x)
        self.seed_root = int(seed_root) % (1 << 64)
        self.time = float(time)
        self.step = int(step)
        self.offset = int(offset)
        self._keys = None

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def keys(self) -> np.ndarray:
        if self._keys is None:
            self._keys = particle_keys(seed_key(self.seed_root), self.n, self.offset)
        return self._keys

    @property
    def stream_counters(self) -> np.ndarray:
        return np.full(self.n, self.step * self.dim, dtype=np.int64)

    def copy(self) -> "ParticleEnsemble":
        out = ParticleEnsemble(self.states.copy(), self.seed_root, self.time, self.step, self.offset)
        out._keys = self._keys
        return out

    def law(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)

    def with_states(self, states) -> "ParticleEnsemble":
        """Same noise streams, new positions (used to build coupled pairs)."""
        out = ParticleEnsemble(states, self.seed_root, self.time, self.step, self.offset)
        if out.n == self.n:
            out._keys = self._keys
        return out

    def advance(self, model: ModelSpec, n_steps: int, dt: float, scheme: str = "euler_maruyama", frozen=None) -> None:
        """In-place stepping; raises BlowUpError if a particle leaves the box."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        if model.dimension != self.dim:
            raise ValueError(f"model dimension {model.dimension} != ensemble dimension {self.dim}")
        if n_steps <= 0:
            return
        ref_mean = ref_samples = None
        if frozen is not None:
            s = as_summary(model, frozen)
            ref_mean = s.mean
            if model.interaction_kind == "pairwise_kernel":
                if s.samples is None:
                    raise ValueError("frozen pairwise-kernel dynamics need the frozen sample cloud")
                ref_samples = s.samples
        t0 = self.time
        status, idx, done = _kernels.advance(
            self.states, self.step, n_steps, dt, model, self.keys,
            ref_mean=ref_mean, ref_samples=ref_samples, frozen=frozen is not None, tamed=scheme == "tamed_euler",
        )
        if status:
            self.step += done + 1
            self.time = t0 + (done + 1) * dt
            raise BlowUpError(idx, self.time, self.states[idx].tolist())
        self.step += n_steps
        self.time = t0 + n_steps * dt


@dataclass(frozen=True)
class IntegrationSchedule:
    dt: float
    t_end: float
    checkpoint_times: Tuple[float, ...] = ()
    scheme: str = "euler_maruyama"

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.t_end >= 0:
            raise ConfigError("t_end must be >= 0")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        cps = tuple(float(t) for t in self.checkpoint_times)
        if not cps:
            cps = (0.0, float(self.t_end)) if self.t_end > 0 else (0.0,)
        object.__setattr__(self, "checkpoint_times", cps)
        arr = np.asarray(cps)
        if np.any(arr < 0) or np.any(np.diff(arr) <= 0):
            raise ConfigError("checkpoint times must be nonnegative and strictly increasing")
        if arr[-1] > self.t_end * (1 + 1e-12) + 1e-12:
            raise ConfigError("t_end must be >= the last checkpoint")
        gaps = np.diff(np.concatenate([[0.0], arr]))
        gaps = gaps[gaps > 0]
        if gaps.size and self.dt > gaps.min() * (1 + 1e-9):
            raise ConfigError("dt exceeds the smallest checkpoint spacing")

    @classmethod
    def uniform(cls, t_end: float, spacing: float, dt: float = DEFAULT_DT, scheme: str = "euler_maruyama"):
        """Checkpoints at 0, spacing, 2*spacing, ..., t_end."""
        k = int(round(t_end / spacing))
        times = tuple(i * spacing for i in range(k + 1)) if t_end > 0 else (0.0,)
        return cls(dt, t_end, times, scheme)

    @property
    def checkpoint_steps(self) -> np.ndarray:
        return np.rint(np.asarray(self.checkpoint_times) / self.dt).astype(np.int64)

    @property
    def total_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SimulationResult:
    checkpoints: List[Tuple[float, EmpiricalMeasure]]
    final: ParticleEnsemble

    def __iter__(self):
        return iter(self.checkpoints)

    def __len__(self):
        return len(self.checkpoints)

    def __getitem__(self, k):
        return self.checkpoints[k]

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.checkpoints])

    @property
    def laws(self) -> List[EmpiricalMeasure]:
        return [m for _, m in self.checkpoints]


# -- initial laws -----------------------------------------------------------


@dataclass(frozen=True)
class InitialLaw:
    kind: str  # dirac | gaussian | uniform_box | cloud
    params: dict = field(default_factory=dict)

    @classmethod
    def dirac(cls, point):
        return cls("dirac", {"point": np.atleast_1d(np.asarray(point, dtype=float))})

    @classmethod
    def gaussian(cls, mean, cov):
        return cls("gaussian", {"mean": np.atleast_1d(np.asarray(mean, dtype=float)), "cov": np.asarray(cov, dtype=float)})

    @classmethod
    def uniform_box(cls, lo, hi):
        return cls("uniform_box", {"lo": np.atleast_1d(np.asarray(lo, dtype=float)), "hi": np.atleast_1d(np.asarray(hi, dtype=float))})

    @classmethod
    def cloud(cls, samples):
        mu = samples if isinstance(samples, EmpiricalMeasure) else EmpiricalMeasure(samples)
        return cls("cloud", {"measure": mu})

    @classmethod
    def from_config(cls, cfg):
        if not isinstance(cfg, dict) or "kind" not in cfg:
            raise ConfigError("initial law needs a 'kind' field")
        kind = cfg["kind"]
        try:
            if kind == "dirac":
                return cls.dirac(cfg["point"])
            if kind == "gaussian":
                return cls.gaussian(cfg["mean"], cfg["cov"])
            if kind == "uniform_box":
                return cls.uniform_box(cfg["lo"], cfg["hi"])
        except KeyError as exc:
            raise ConfigError(f"initial law {kind!r} missing field {exc.args[0]!r}") from None
        raise ConfigError(f"unknown initial law kind {kind!r}")


def _coerce_law(law) -> InitialLaw:
    if isinstance(law, InitialLaw):
        return law
    if isinstance(law, EmpiricalMeasure):
        return InitialLaw.cloud(law)
    if isinstance(law, dict):
        return InitialLaw.from_config(law)
    return InitialLaw.dirac(law)


def init_ensemble(law, n: Optional[int], seed: int, offset: int = 0) -> ParticleEnsemble:
    """Draw N i.i.d. initial states; ``seed`` also roots the noise streams."""
    law = _coerce_law(law)
    if law.kind == "cloud":
        mu = law.params["measure"]
        if n is None or n == mu.n:
            if mu.is_uniform:
                return ParticleEnsemble(mu.samples, seed, offset=offset)
        rng = np.random.default_rng(derive_seed(seed, "init", offset))
        idx = rng.choice(mu.n, size=n, replace=True, p=mu.weights)
        return ParticleEnsemble(mu.samples[idx], seed, offset=offset)
    if n is None or n < 1:
        raise ValueError("particle count must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "init", offset))
    if law.kind == "dirac":
        p = law.params["point"]
        return ParticleEnsemble(np.tile(p, (n, 1)), seed, offset=offset)
    if law.kind == "gaussian":
        m = law.params["mean"]
        cov = law.params["cov"]
        d = m.shape[0]
        cov = np.eye(d) * cov if cov.ndim == 0 else (np.diag(cov) if cov.ndim == 1 else cov)
        if cov.shape != (d, d):
            raise ValueError("covariance shape does not match mean")
        evals = np.linalg.eigvalsh(cov)
        if np.any(evals < -1e-12):
            raise ValueError("covariance must be positive semidefinite")
        return ParticleEnsemble(rng.multivariate_normal(m, cov, size=n, method="eigh"), seed, offset=offset)
    if law.kind == "uniform_box":
        lo, hi = law.params["lo"], law.params["hi"]
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("uniform box needs lo <= hi componentwise")
        return ParticleEnsemble(lo + (hi - lo) * rng.random((n, lo.shape[0])), seed, offset=offset)
    raise ValueError(f"unknown law kind {law.kind!r}")


# -- stepping ---------------------------------------------------------------


def step_mckean_vlasov(ens: ParticleEnsemble, model: ModelSpec, dt: float, scheme: str = "euler_maruyama") -> ParticleEnsemble:
    out = ens.copy()
    out.advance(model, 1, dt, scheme)
    return out


def _run(ens, model, schedule, frozen):
    work = ens.copy()
    steps = schedule.checkpoint_steps
    out = []
    t0 = work.time
    done = 0
    for k in steps:
        work.advance(model, int(k) - done, schedule.dt, schedule.scheme, frozen)
        done = int(k)
        out.append((t0 + done * schedule.dt, work.law()))
    work.advance(model, schedule.total_steps - done, schedule.dt, schedule.scheme, frozen)
    return SimulationResult(out, work)


def simulate(ens: ParticleEnsemble, model: ModelSpec, schedule: IntegrationSchedule) -> SimulationResult:
    """Empirical law at every checkpoint; ``result.final`` continues the run."""
    return _run(ens, model, schedule, None)


def simulate_frozen(model: ModelSpec, frozen_mu, ens: ParticleEnsemble, schedule: IntegrationSchedule) -> SimulationResult:
    """As ``simulate`` with the measure argument pinned to ``frozen_mu``."""
    if frozen_mu is None:
        raise ValueError("frozen_mu is required")
    return _run(ens, model, schedule, frozen_mu)


@dataclass
class CoupledResult:
    times: np.ndarray
    laws_a: List[EmpiricalMeasure]
    laws_b: List[EmpiricalMeasure]
    order_fraction: np.ndarray  # share of i with X_i <= Y_i componentwise
    final_a: ParticleEnsemble
    final_b: ParticleEnsemble


def coupled_pair(modelA: ModelSpec, modelB: ModelSpec, ensA: ParticleEnsemble, ensB: ParticleEnsemble, schedule: IntegrationSchedule) -> CoupledResult:
    """Run two systems on identical noise and track pathwise order."""
    if ensA.states.shape != ensB.states.shape:
        raise ValueError("coupled ensembles need equal N and dimension")
    if ensA.seed_root != ensB.seed_root or ensA.offset != ensB.offset or ensA.step != ensB.step:
        raise ValueError("coupled ensembles must share seed_root and stream position")
    if modelA.dimension != modelB.dimension or not np.array_equal(modelA.sigma, modelB.sigma):
        raise ValueError("coupled models must share the diffusion coefficient")
    a, b = ensA.copy(), ensB.copy()
    steps = schedule.checkpoint_steps
    times, la, lb, frac = [], [], [], []
    done = 0
    t0 = a.time
    for k in steps:
        a.advance(modelA, int(k) - done, schedule.dt, schedule.scheme)
        b.advance(modelB, int(k) - done, schedule.dt, schedule.scheme)
        done = int(k)
        times.append(t0 + done * schedule.dt)
        la.append(a.law())
        lb.append(b.law())
        frac.append(float(np.mean(np.all(a.states <= b.states, axis=1))))
    a.advance(modelA, schedule.total_steps - done, schedule.dt, schedule.scheme)
    b.advance(modelB, schedule.total_steps - done, schedule.dt, schedule.scheme)
    return CoupledResult(np.array(times), la, lb, np.array(frac), a, b)


def summary_of(ens: ParticleEnsemble) -> MeasureSummary:
    return ens.law().summary()
