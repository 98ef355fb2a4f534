"""Probes for the law-level flow: comparison, trapping balls, instability, orbits.

Every probe runs the interacting particle system forward and reads off
distances and order verdicts between empirical laws.  Cells that are
independent of each other (epsilon/direction pairs, sampled initial laws) run
on a thread pool; each cell derives its own seed so results do not depend on
scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dissipativity import DissipativityConfig, check_config
from .errors import BlowUpError, ConfigError
from .invariant import (
    InvariantMeasureReport,
    PsiControls,
    _json_default,
    _w2,
    canonical_seeds,
    find_invariant_measures,
    order_between,
)
from .measure import EmpiricalMeasure, OrderVerdict, dkw_margin, quantile_atoms, stochastic_order
from .model import ModelSpec, check_cooperativity, ordered_grid
from .particle import (
    CoupledResult,
    IntegrationSchedule,
    InitialLaw,
    ParticleEnsemble,
    coupled_pair,
    init_ensemble,
)
from .rng import derive_seed

DEFAULT_LADDER = (0.1, 0.05, 0.02)


@dataclass(frozen=True)
class ProbeControls:
    """Shared knobs for the forward-simulation probes.

    ``capture_radius`` defaults to twice the fixed-point tolerance of the
    invariant-measure search; ``horizon`` of None means 10x the slowest
    measured relaxation time, floored at ``horizon_floor``.
    """

    n_particles: int = 10_000
    dt: float = 1e-3
    scheme: str = "euler_maruyama"
    check_every: float = 0.25
    capture_radius: float = 0.1
    horizon: Optional[float] = None
    horizon_floor: float = 20.0
    seed: int = 0
    threads: int = 1

    def resolve_horizon(self, relaxation: float = 0.0) -> float:
        if self.horizon is not None:
            return float(self.horizon)
        return max(10.0 * relaxation, self.horizon_floor)


def _pool_map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _order(mu: EmpiricalMeasure, nu: EmpiricalMeasure, seed: int = 0) -> OrderVerdict:
    return order_between(mu, nu, seed)


# -- comparison principle ---------------------------------------------------------


@dataclass
class ComparisonReport:
    times: np.ndarray
    verdicts: List[OrderVerdict]
    order_fraction: np.ndarray
    tolerance: float
    cooperative: bool

    @property
    def violations(self) -> int:
        return sum(not v.leq for v in self.verdicts)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _coupled_states(mu0: EmpiricalMeasure, nu0: EmpiricalMeasure, n: int) -> Tuple[np.ndarray, np.ndarray]:
    if mu0.dim == 1:
        # matching quantiles realise the ordered coupling in one dimension
        return quantile_atoms(mu0, n).samples.copy(), quantile_atoms(nu0, n).samples.copy()
    if mu0.n == nu0.n == n and mu0.is_uniform and nu0.is_uniform and np.all(mu0.samples <= nu0.samples):
        return mu0.samples.copy(), nu0.samples.copy()
    raise ValueError("in d > 1 pass equal-size clouds already paired so that x_i <= y_i componentwise")


def comparison_probe(
    model: ModelSpec,
    mu0: EmpiricalMeasure,
    nu0: EmpiricalMeasure,
    schedule: IntegrationSchedule,
    n_particles: Optional[int] = None,
    seed: int = 0,
    model_b: Optional[ModelSpec] = None,
) -> ComparisonReport:
    """Run mu0 and nu0 on shared noise and test the order at each checkpoint."""
    if mu0.dim == 1:
        init = stochastic_order(mu0, nu0)
        if not init.leq:
            raise ValueError(f"initial laws are not ordered ({init.relation}); witness {init.witness}")
    # in d > 1 the componentwise pairing is itself the ordered coupling
    n = n_particles or max(mu0.n, nu0.n)
    xa, xb = _coupled_states(mu0, nu0, n)
    ea, eb = ParticleEnsemble(xa, seed), ParticleEnsemble(xb, seed)
    res: CoupledResult = coupled_pair(model, model_b or model, ea, eb, schedule)
    tol = dkw_margin(n)
    verdicts = [
        stochastic_order(a, b, tol=tol) if a.dim == 1 else order_between(a, b, seed)
        for a, b in zip(res.laws_a, res.laws_b)
    ]
    coop = check_cooperativity(model, ordered_grid(model, box=2.0, n=5)).passed
    return ComparisonReport(res.times, verdicts, res.order_fraction, tol, coop)


# -- trapping balls -------------------------------------------------------------------


@dataclass
class BallRun:
    label: str
    initial_radius: float
    times: np.ndarray
    radii: np.ndarray
    stderr: np.ndarray
    stayed_in_outer: bool
    entry_time: Optional[float]
    stayed_in_inner: bool

    def entered_by(self, t_hat: float) -> bool:
        return self.entry_time is not None and self.entry_time <= t_hat


@dataclass
class ShrinkingReport:
    a: np.ndarray
    r: float
    r_bar: float
    t_hat: float
    horizon: float
    runs: List[BallRun]
    config_passed: bool

    @property
    def invariant(self) -> bool:
        return all(b.stayed_in_outer for b in self.runs)

    @property
    def entered(self) -> bool:
        return all(b.entered_by(self.t_hat) and b.stayed_in_inner for b in self.runs)

    @property
    def passed(self) -> bool:
        return self.config_passed and self.invariant and self.entered


def ball_laws(a, r_bar: float, fractions=(0.0, 0.5, 0.9, 0.98), r: Optional[float] = None) -> List[Tuple[str, InitialLaw, float]]:
    """Diracs and isotropic Gaussians centred near ``a`` at graded W2 radii."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    d = a.size
    u = np.ones(d) / math.sqrt(d)
    out = []
    for f in fractions:
        rho = f * r_bar
        out.append((f"dirac+{f:g}", InitialLaw.dirac(a + rho * u), rho))
        if rho > 0:
            out.append((f"dirac-{f:g}", InitialLaw.dirac(a - rho * u), rho))
            out.append((f"gauss{f:g}", InitialLaw.gaussian(a, np.eye(d) * rho**2 / d), rho))
    if r is not None:
        mid = 0.5 * (r + r_bar)
        out.append(("gauss-mid", InitialLaw.gaussian(a, np.eye(d) * mid**2 / d), mid))
    return out


def _ball_radius(states: np.ndarray, a: np.ndarray) -> Tuple[float, float]:
    sq = np.sum((states - a) ** 2, axis=1)
    return math.sqrt(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0


def shrinking_neighborhood_probe(
    model: ModelSpec,
    cfg: DissipativityConfig,
    sample_count: Optional[int] = None,
    schedule: Optional[IntegrationSchedule] = None,
    n_particles: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    laws=None,
    slack_se: float = 3.0,
) -> ShrinkingReport:
    """Check that W2-balls around delta_a trap and shrink the flow.

    Each sampled law starts inside B(delta_a, r_bar).  At every checkpoint
    ||mu_t - delta_a||_2 must stay <= r_bar, and it must drop below r no later
    than T_hat = (r_bar^2 - r^2) / theta and stay there.  Radii are compared
    after allowing ``slack_se`` standard errors of the second-moment estimate.
    """
    rep = check_config(model, cfg)
    if rep.r_bar is None:
        raise ConfigError("configuration has no admissible r_bar")
    r, r_bar, t_hat = cfg.r, rep.r_bar, rep.t_hat
    a = cfg.a
    if laws is None:
        laws = ball_laws(a, r_bar, r=r)
        if sample_count is not None:
            laws = laws[:sample_count]
    if schedule is None:
        end = min(t_hat, 10.0) if math.isfinite(t_hat) else 10.0
        schedule = IntegrationSchedule.uniform(end, end / 40)
    horizon = schedule.t_end

    def one(item):
        k, (label, law, rho) = item
        ens = init_ensemble(law, n_particles, derive_seed(seed, "ball", k))
        times, radii, errs = [0.0], [], []
        rad, se = _ball_radius(ens.states, a)
        radii.append(rad)
        errs.append(se)
        done = 0
        for step in schedule.checkpoint_steps:
            if step == 0:
                continue
            ens.advance(model, int(step) - done, schedule.dt, schedule.scheme)
            done = int(step)
            rad, se = _ball_radius(ens.states, a)
            times.append(ens.time)
            radii.append(rad)
            errs.append(se)
        times, radii, errs = np.array(times), np.array(radii), np.array(errs)
        sq_hi = radii**2 - slack_se * errs
        outer = bool(np.all(sq_hi <= r_bar**2))
        inside = sq_hi <= r**2
        entry = None
        stayed = False
        if inside.any():
            first = int(np.argmax(inside))
            entry = float(times[first])
            stayed = bool(np.all(inside[first:]))
        return BallRun(label, rho, times, radii, errs, outer, entry, stayed)

    runs = _pool_map(one, list(enumerate(laws)), threads)
    return ShrinkingReport(a, r, r_bar, t_hat, horizon, runs, rep.passed)


# -- instability ------------------------------------------------------------------------


@dataclass
class EscapeOutcome:
    epsilon: float
    direction: int  # +1 or -1
    outcome: str  # escaped | returned | inconclusive
    target_index: Optional[int]
    time: Optional[float]
    final_distances: List[float] = field(default_factory=list)

    def to_dict(self):
        return dict(vars(self))


@dataclass
class InstabilityReport:
    center: EmpiricalMeasure
    center_index: int
    epsilon_ladder: List[float]
    outcomes: List[EscapeOutcome]
    horizon: float

    @property
    def verdict(self) -> bool:
        """Every epsilon has a direction that reaches another, order-related measure."""
        return all(
            any(o.outcome == "escaped" for o in self.outcomes if o.epsilon == e) for e in self.epsilon_ladder
        )

    @property
    def inconclusive(self) -> List[EscapeOutcome]:
        return [o for o in self.outcomes if o.outcome == "inconclusive"]

    @property
    def smallest_escaping_epsilon(self) -> Optional[float]:
        es = [o.epsilon for o in self.outcomes if o.outcome == "escaped"]
        return min(es) if es else None

    def ladder_consistent(self) -> bool:
        """An escape at epsilon implies an escape in the same direction at every larger epsilon."""
        for o in self.outcomes:
            if o.outcome != "escaped":
                continue
            for p in self.outcomes:
                if p.direction == o.direction and p.epsilon > o.epsilon and p.outcome != "escaped":
                    return False
        return True

    def to_dict(self):
        return {
            "center_index": self.center_index,
            "center_mean": self.center.mean.tolist(),
            "epsilon_ladder": list(self.epsilon_ladder),
            "outcomes": [o.to_dict() for o in self.outcomes],
            "horizon": self.horizon,
            "verdict": self.verdict,
            "smallest_escaping_epsilon": self.smallest_escaping_epsilon,
        }


def _relaxation(report: InvariantMeasureReport) -> float:
    return max((p.relaxation_time for p in report.psi_results if p is not None), default=0.0)


def _watch(model, ens, measures, skip, controls, horizon):
    """Advance until the law comes within the capture radius of a measure other
    than ``skip``; returns (index, time, distances) with index None on timeout."""
    every = max(1, int(round(controls.check_every / controls.dt)))
    total = int(round(horizon / controls.dt))
    means = [m.mean for m in measures]
    done = 0
    law = None
    while done < total:
        n = min(every, total - done)
        ens.advance(model, n, controls.dt, controls.scheme)
        done += n
        law = ens.law()
        for j, m in enumerate(measures):
            # |mean difference| <= W2, so far-off measures need no transport solve
            if j == skip or np.linalg.norm(law.mean - means[j]) >= controls.capture_radius:
                continue
            if _w2(law, m, controls.seed) < controls.capture_radius:
                return j, ens.time, [_w2(law, mm, controls.seed) for mm in measures]
    dists = [] if law is None else [_w2(law, m, controls.seed) for m in measures]
    return None, ens.time, dists


def instability_probe(
    model: ModelSpec,
    report: InvariantMeasureReport,
    middle_index: int,
    epsilon_ladder: Sequence[float] = DEFAULT_LADDER,
    controls: ProbeControls = ProbeControls(),
) -> InstabilityReport:
    """Shift the chosen measure by +-eps*1 and see where the flow takes it."""
    ladder = [float(e) for e in epsilon_ladder]
    if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("epsilon ladder must be positive and strictly decreasing")
    if not 0 <= middle_index < report.count:
        raise ValueError(f"middle_index {middle_index} out of range for {report.count} measures")
    center = report.measures[middle_index]
    d = center.dim
    horizon = controls.resolve_horizon(_relaxation(report))
    cells = [(e, s) for e in ladder for s in (+1, -1)]

    def one(cell):
        eps, sgn = cell
        start = quantile_atoms(center, controls.n_particles) if d == 1 else center
        init = start.samples + sgn * eps * np.ones(d)
        ens = ParticleEnsemble(init, derive_seed(controls.seed, "instability", middle_index, eps, sgn))
        try:
            j, t, dists = _watch(model, ens, report.measures, middle_index, controls, horizon)
        except BlowUpError as exc:
            return EscapeOutcome(eps, sgn, "inconclusive", None, exc.time, [])
        if j is not None:
            rel = report.order_verdicts[middle_index][j]
            related = rel is not None and rel.relation in ("dominated", "dominates")
            return EscapeOutcome(eps, sgn, "escaped" if related else "inconclusive", j, t, [float(x) for x in dists])
        if dists and dists[middle_index] < controls.capture_radius:
            return EscapeOutcome(eps, sgn, "returned", middle_index, t, [float(x) for x in dists])
        return EscapeOutcome(eps, sgn, "inconclusive", None, None, [float(x) for x in dists])

    outcomes = _pool_map(one, cells, controls.threads)
    return InstabilityReport(center, middle_index, ladder, outcomes, horizon)


# -- connecting orbits ---------------------------------------------------------------


@dataclass
class OrbitTrace:
    checkpoints: List[Tuple[float, EmpiricalMeasure]]
    monotone_flags: List[OrderVerdict]
    endpoint_distances: Dict[str, np.ndarray]
    direction: str
    epsilon: float
    captured: bool
    capture_time: Optional[float]
    capture_radius: float

    def __post_init__(self):
        t = self.times
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("orbit times must be strictly increasing")
        if len(self.monotone_flags) != max(len(self.checkpoints) - 1, 0):
            raise ValueError("need one order flag per adjacent checkpoint pair")

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.checkpoints])

    @property
    def violations(self) -> int:
        want = "dominated" if self.direction == "increasing" else "dominates"
        return sum(v.relation not in (want, "equal") for v in self.monotone_flags)

    @property
    def stalled(self) -> bool:
        return not self.captured

    @property
    def accepted(self) -> bool:
        return self.captured and self.violations == 0

    @property
    def terminal_distance(self) -> float:
        return float(self.endpoint_distances["target"][-1])

    def summary(self) -> dict:
        return {
            "direction": self.direction,
            "epsilon": self.epsilon,
            "checkpoints": len(self.checkpoints),
            "captured": self.captured,
            "capture_time": self.capture_time,
            "terminal_w2_to_target": self.terminal_distance,
            "order_violations": self.violations,
            "accepted": self.accepted,
        }

    def write(self, out_dir: str, name: str = "orbit") -> Dict[str, str]:
        """JSON summary, per-checkpoint measure blobs and a plot-data CSV."""
        os.makedirs(out_dir, exist_ok=True)
        blobs = []
        for k, (_, m) in enumerate(self.checkpoints):
            fn = f"{name}_t{k:04d}.mvlm"
            m.save(os.path.join(out_dir, fn))
            blobs.append(fn)
        doc = dict(self.summary())
        doc["times"] = self.times.tolist()
        doc["flags"] = [v.to_dict() for v in self.monotone_flags]
        doc["blobs"] = blobs
        jpath = os.path.join(out_dir, f"{name}.json")
        with open(jpath, "w") as fh:
            json.dump(doc, fh, indent=2, default=_json_default)
        cpath = os.path.join(out_dir, f"{name}.csv")
        d = self.checkpoints[0][1].dim
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "w2_to_source", "w2_to_target"] + [f"mean_{i}" for i in range(d)])
            for (t, m), a, b in zip(self.checkpoints, self.endpoint_distances["source"], self.endpoint_distances["target"]):
                w.writerow([f"{t:.17g}", f"{a:.17g}", f"{b:.17g}"] + [f"{v:.17g}" for v in m.mean])
        return {"json": jpath, "csv": cpath}


def connecting_orbit_trace(
    model: ModelSpec,
    source: EmpiricalMeasure,
    target: EmpiricalMeasure,
    direction: str,
    epsilon: float = 0.05,
    controls: ProbeControls = ProbeControls(),
    horizon: Optional[float] = None,
) -> OrbitTrace:
    """Push ``source`` by +-epsilon towards ``target`` and record the forward orbit.

    Stops at the first checkpoint within the capture radius of the target.
    Adjacent checkpoints are compared in stochastic order; the forward-only
    trace stands in for the two-sided orbit, with the start next to the source.
    """
    if direction not in ("increasing", "decreasing"):
        raise ValueError("direction must be 'increasing' or 'decreasing'")
    if source.dim != target.dim:
        raise ValueError("source and target dimensions differ")
    rel = order_between(source, target, controls.seed)
    if source is not target and _w2(source, target, controls.seed) >= controls.capture_radius:
        want = rel.leq if direction == "increasing" else rel.geq
        if not want:
            raise ValueError(f"target is not {'above' if direction == 'increasing' else 'below'} the source ({rel.relation})")
    d = source.dim
    sgn = 1.0 if direction == "increasing" else -1.0
    start = quantile_atoms(source, controls.n_particles) if d == 1 else source
    ens = ParticleEnsemble(start.samples + sgn * epsilon * np.ones(d), derive_seed(controls.seed, "orbit", direction, epsilon))
    horizon = controls.resolve_horizon() if horizon is None else horizon
    every = max(1, int(round(controls.check_every / controls.dt)))
    total = int(round(horizon / controls.dt))

    cps = [(0.0, ens.law())]
    ds = [_w2(cps[0][1], source, controls.seed)]
    dt_ = [_w2(cps[0][1], target, controls.seed)]
    flags: List[OrderVerdict] = []
    captured = dt_[0] < controls.capture_radius
    done = 0
    while not captured and done < total:
        n = min(every, total - done)
        ens.advance(model, n, controls.dt, controls.scheme)
        done += n
        law = ens.law()
        flags.append(_order(cps[-1][1], law, controls.seed + len(cps)))
        cps.append((ens.time, law))
        ds.append(_w2(law, source, controls.seed))
        dt_.append(_w2(law, target, controls.seed))
        captured = dt_[-1] < controls.capture_radius
    return OrbitTrace(
        cps, flags, {"source": np.array(ds), "target": np.array(dt_)}, direction, float(epsilon),
        bool(captured), cps[-1][0] if captured else None, controls.capture_radius,
    )


# -- composite suite ----------------------------------------------------------------------


_EXPECTED = {"double_well": 3, "perturbed_double_well": 3, "cross_coupled_2d": 3, "multi_well": 5}


@dataclass
class SuiteReport:
    family: str
    invariant: InvariantMeasureReport
    instability: List[InstabilityReport]
    orbits: List[Tuple[int, int, OrbitTrace]]
    expected_count: int
    failing: List[str] = field(default_factory=list)

    @property
    def count_ok(self) -> bool:
        return self.invariant.count == self.expected_count

    @property
    def partial(self) -> bool:
        return bool(self.failing)

    @property
    def passed(self) -> bool:
        return (
            self.count_ok
            and self.invariant.chain_ordered
            and all(r.verdict for r in self.instability)
            and all(o.accepted for _, _, o in self.orbits)
            and not self.partial
        )

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "count": self.invariant.count,
            "expected_count": self.expected_count,
            "means": self.invariant.means.tolist(),
            "chain_ordered": self.invariant.chain_ordered,
            "instability": [r.to_dict() for r in self.instability],
            "orbits": [dict(o.summary(), source=i, target=j) for i, j, o in self.orbits],
            "failing": self.failing,
            "passed": self.passed,
        }


def middle_indices(count: int) -> List[int]:
    """Interior measures of an alternating stable/unstable chain of odd length."""
    return list(range(1, count - 1, 2))


def multi_well_suite(
    model: ModelSpec,
    psi_controls: PsiControls = PsiControls(),
    controls: ProbeControls = ProbeControls(),
    epsilon_ladder: Sequence[float] = DEFAULT_LADDER,
    orbit_epsilon: float = 0.05,
    report: Optional[InvariantMeasureReport] = None,
) -> SuiteReport:
    """Measures, instability of each middle measure, and the orbits leaving them."""
    if model.family not in _EXPECTED:
        raise ValueError(f"no suite for family {model.family!r}")
    inv = report if report is not None else find_invariant_measures(model, canonical_seeds(model), psi_controls)
    failing = []
    if inv.count != _EXPECTED[model.family]:
        failing.append(f"count {inv.count} != {_EXPECTED[model.family]}")
    if not inv.chain_ordered:
        failing.append("measures are not a verified chain")
    inst, orbits = [], []
    if inv.count >= 3 and inv.count % 2 == 1:
        for k in middle_indices(inv.count):
            rep = instability_probe(model, inv, k, epsilon_ladder, controls)
            inst.append(rep)
            if rep.inconclusive:
                failing.append(f"instability at {k}: {len(rep.inconclusive)} inconclusive cells")
            horizon = controls.resolve_horizon(_relaxation(inv))
            for j, direction in ((k + 1, "increasing"), (k - 1, "decreasing")):
                tr = connecting_orbit_trace(model, inv.measures[k], inv.measures[j], direction, orbit_epsilon, controls, horizon)
                orbits.append((k, j, tr))
                if tr.stalled:
                    failing.append(f"orbit {k}->{j} stalled")
    return SuiteReport(model.family, inv, inst, orbits, _EXPECTED[model.family], failing)
