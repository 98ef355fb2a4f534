"""The measure-iterating map Psi, its fixed points, and 1-D quadrature oracles.

Psi(mu) is the stationary law of the SDE whose measure argument is frozen at
mu.  It is realised by running the frozen particle system past a burn-in and
pooling snapshots over an ergodic window; the window is accepted once its two
halves agree in W2.  Invariant measures of the McKean-Vlasov equation are the
fixed points of Psi, reached here by plain Picard iteration from Dirac seeds.
Fixed points that repel Picard (slope of Psi above one along the order
direction) are located by bisection on the sign of the mean drift instead.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import NonConvergenceError, NumericalError, UnsupportedModelError
from .measure import (
    EmpiricalMeasure,
    MeasureSummary,
    OrderVerdict,
    dkw_margin,
    quantile_atoms,
    stochastic_order,
    thin,
    wasserstein,
)
from .model import DissipativeConstants, ModelSpec, as_summary, fit_dissipative_constants
from .particle import InitialLaw, ParticleEnsemble, init_ensemble

ORDER_ATOMS_2D = 256
W2_ATOMS_2D = 2048


@dataclass(frozen=True)
class PsiControls:
    n_particles: int = 10_000
    dt: float = 1e-3
    scheme: str = "euler_maruyama"
    tol: float = 0.05
    burn_in: float = 1.0
    window: float = 2.0
    snapshot_every: float = 0.05
    patience: int = 4
    max_iter: int = 30
    merge_radius: Optional[float] = None
    seed: int = 0
    threads: int = 1

    @property
    def merge(self) -> float:
        return 2 * self.tol if self.merge_radius is None else self.merge_radius


@dataclass
class PsiResult:
    law: EmpiricalMeasure
    frozen_input_summary: MeasureSummary
    relaxation_time: float
    ergodic_window: float
    residual_estimate: float
    doublings: int = 0
    final_state: Optional[np.ndarray] = None


def _w2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, seed: int = 0) -> float:
    """W2 that stays exact: 1-D quantile coupling, thinned assignment above."""
    if mu.dim == 1:
        return wasserstein(mu, nu, 2)
    return wasserstein(thin(mu, W2_ATOMS_2D, seed), thin(nu, W2_ATOMS_2D, seed + 1), 2)


def _start_states(mu: EmpiricalMeasure, n: int, seed: int) -> np.ndarray:
    if mu.dim == 1:
        return quantile_atoms(mu, n).samples.copy()  # sorted quantiles keep ordered inputs coupled
    if mu.n == n and mu.is_uniform:
        return mu.samples.copy()
    rng = np.random.default_rng(seed)
    idx = rng.choice(mu.n, size=n, replace=mu.n < n, p=mu.weights)
    return mu.samples[idx]


def _pool(snaps: List[np.ndarray]) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.concatenate(snaps, axis=0))


def psi(model: ModelSpec, mu, controls: PsiControls = PsiControls(), start: Optional[EmpiricalMeasure] = None) -> PsiResult:
    """One application of Psi.  ``start`` (default: ``mu`` itself) seeds the frozen run."""
    mu = mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(np.atleast_2d(mu))
    summary = as_summary(model, mu)
    c = controls
    states = _start_states(start if start is not None else mu, c.n_particles, c.seed)
    ens = ParticleEnsemble(states, c.seed)
    every = max(1, int(round(c.snapshot_every / c.dt)))
    burn = int(round(c.burn_in / c.dt))
    means_t, means = [0.0], [ens.states.mean(axis=0)]
    for _ in range(0, burn, every):
        ens.advance(model, min(every, burn - (len(means) - 1) * every), c.dt, c.scheme, frozen=mu)
        means_t.append(ens.time)
        means.append(ens.states.mean(axis=0))
    window = c.window
    residual = math.inf
    doublings = 0
    while True:
        n_snap = max(2, int(round(window / (every * c.dt))))
        snaps = []
        for _ in range(n_snap):
            ens.advance(model, every, c.dt, c.scheme, frozen=mu)
            snaps.append(ens.states.copy())
            means_t.append(ens.time)
            means.append(ens.states.mean(axis=0))
        half = n_snap // 2
        residual = _w2(_pool(snaps[:half]), _pool(snaps[half:]), c.seed)
        if residual < c.tol / 2:
            break
        if doublings >= c.patience:
            raise NonConvergenceError(
                f"Psi window residual {residual:.4g} >= {c.tol / 2:.4g} after {doublings} doublings",
                {"residual": residual, "window": window, "doublings": doublings, "time": ens.time},
            )
        doublings += 1
        window *= 2
    pooled = _pool(snaps)
    law = thin(pooled, c.n_particles, c.seed) if model.dimension == 1 else _subsample(pooled, c.n_particles, c.seed)
    means = np.asarray(means)
    target = pooled.mean
    scale = np.sqrt(np.maximum(pooled.variance().sum(), 1e-300) / c.n_particles)
    close = np.linalg.norm(means - target, axis=1) <= max(c.tol / 2, 3 * scale)
    # relaxation: first time after which the ensemble mean stays near the window mean
    bad = np.nonzero(~close)[0]
    relax = 0.0 if bad.size == 0 else means_t[min(bad[-1] + 1, len(means_t) - 1)]
    return PsiResult(law, summary, float(relax), float(window), float(residual), doublings, ens.states.copy())


def _subsample(mu: EmpiricalMeasure, n: int, seed: int) -> EmpiricalMeasure:
    if mu.n <= n:
        return mu
    rng = np.random.default_rng(seed)
    return EmpiricalMeasure(mu.samples[np.sort(rng.choice(mu.n, n, replace=False))])


# -- 1-D quadrature oracles ---------------------------------------------------


@dataclass
class GibbsTable:
    x: np.ndarray
    density: np.ndarray
    mean: float
    variance: float
    half_width: float

    @property
    def second_moment(self) -> float:
        return self.variance + self.mean**2

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,density\n")
            for a, b in zip(self.x, self.density):
                fh.write(f"{a!r},{b!r}\n")

    def cdf(self) -> np.ndarray:
        inc = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.x)
        return np.concatenate([[0.0], np.cumsum(inc)])

    def w1_to(self, mu: EmpiricalMeasure) -> float:
        """W1 between this density and a 1-D empirical law (integral of |F - G|)."""
        xs = np.sort(mu.samples[:, 0])
        F = self.cdf()
        G = np.searchsorted(xs, self.x, side="right") / xs.size
        dx = np.diff(self.x)
        inner = float(np.sum(0.5 * (np.abs(F - G)[1:] + np.abs(F - G)[:-1]) * dx))
        outside = float(np.sum(np.clip(self.x[0] - xs, 0, None)) + np.sum(np.clip(xs - self.x[-1], 0, None))) / xs.size
        return inner + outside


def _potential_coeffs(model: ModelSpec, m: float):
    """Ascending coefficients of U with U' = -b (frozen mean m), minus the sine part."""
    if model.dimension != 1:
        raise UnsupportedModelError("the Gibbs oracle is one-dimensional")
    if model.interaction_kind != "mean_field_quadratic":
        raise UnsupportedModelError("the Gibbs oracle needs mean-field (quadratic) interaction")
    if model.sigma[0, 1] != 0.0:
        raise UnsupportedModelError("the Gibbs oracle needs sigma constant in x")
    b = np.array(model.poly[0], dtype=float)
    b = np.pad(b, (0, max(0, 2 - b.size)))
    b[1] += model.coupling[0, 0]
    b[0] += model.mean_coupling[0, 0] * m
    return -np.polynomial.polynomial.polyint(b)


def gibbs_oracle_1d(model: ModelSpec, frozen_mean: float, n_grid: int = 20001, tail: float = 1e-10) -> GibbsTable:
    """Stationary density of dX = b(X, m) dt + sigma dW by quadrature on [-L, L]."""
    U = _potential_coeffs(model, frozen_mean)
    sig = float(model.diffusion_diag(np.zeros(1), np.array([frozen_mean]))[0])
    if sig == 0.0:
        raise UnsupportedModelError("the Gibbs oracle needs sigma > 0")
    amp, freq, phase = model.perturbation[0]

    def logdens(x):
        u = np.polynomial.polynomial.polyval(x, U)
        if amp != 0.0:
            u = u - amp * (np.cos(freq * x + phase) - np.cos(phase)) / freq
        return -2.0 * u / sig**2

    # grow the window until the density at its edges is negligible
    L = 1.0
    probe = np.linspace(-L, L, 2001)
    for _ in range(60):
        probe = np.linspace(-L, L, 4001)
        lp = logdens(probe)
        top = lp.max()
        if lp[0] - top < math.log(tail) - 20 and lp[-1] - top < math.log(tail) - 20:
            break
        L *= 1.5
    else:
        raise NumericalError("Gibbs density does not decay; drift is not confining")

    def moments(n):
        x = np.linspace(-L, L, n)
        lp = logdens(x)
        w = np.exp(lp - lp.max())
        Z = np.trapezoid(w, x)
        rho = w / Z
        mean = np.trapezoid(x * rho, x)
        var = np.trapezoid((x - mean) ** 2 * rho, x)
        return x, rho, float(mean), float(var)

    x, rho, mean, var = moments(n_grid)
    for _ in range(4):
        x2, rho2, mean2, var2 = moments(2 * n_grid - 1)
        if abs(mean2 - mean) < 1e-11 and abs(var2 - var) < 1e-11 * max(1.0, var):
            return GibbsTable(x2, rho2, mean2, var2, L)
        n_grid = 2 * n_grid - 1
        x, rho, mean, var = x2, rho2, mean2, var2
    raise NumericalError("Gibbs quadrature did not converge under grid refinement")


def self_consistency_roots_1d(
    model: ModelSpec, mean_interval=(-2.0, 2.0), n_scan: int = 401, xtol: float = 1e-8, n_grid: int = 4001
) -> List[float]:
    """All roots of G(m) = m - mean(Gibbs(m)) in the interval (scan + bisection)."""
    lo, hi = mean_interval

    def G(m):
        return m - gibbs_oracle_1d(model, m, n_grid=n_grid).mean

    ms = np.linspace(lo, hi, n_scan)
    gs = np.array([G(m) for m in ms])
    roots = [float(m) for m, g in zip(ms, gs) if abs(g) < 1e-12]
    for k in range(n_scan - 1):
        a, b = gs[k], gs[k + 1]
        if abs(a) < 1e-12 or abs(b) < 1e-12:
            continue
        if a * b < 0:
            roots.append(float(optimize.bisect(G, ms[k], ms[k + 1], xtol=xtol)))
    roots.sort()
    out = []
    for r in roots:
        if not out or r - out[-1] > 10 * xtol:
            out.append(r)
    return out


# -- fixed points -------------------------------------------------------------


@dataclass
class SeedRun:
    index: int
    converged: bool
    iterations: int
    residuals: List[float]
    result: Optional[PsiResult]
    input_law: Optional[EmpiricalMeasure]
    message: str = ""
    method: str = "picard"


@dataclass
class MomentCertificate:
    passed: bool
    slack: float
    lhs: float
    rhs: float
    p: float


@dataclass
class InvariantMeasureReport:
    measures: List[EmpiricalMeasure]
    fixed_point_residuals: List[float]
    order_verdicts: List[List[Optional[OrderVerdict]]]
    basins: dict
    moment_certificates: List[MomentCertificate]
    seed_runs: List[SeedRun] = field(default_factory=list)
    psi_results: List[PsiResult] = field(default_factory=list)
    constants: Optional[DissipativeConstants] = None

    @property
    def count(self) -> int:
        return len(self.measures)

    @property
    def means(self) -> np.ndarray:
        return np.array([m.mean for m in self.measures])

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.seed_runs)

    @property
    def chain_ordered(self) -> bool:
        """Each measure is verified below the next one."""
        return all(
            self.order_verdicts[i][i + 1] is not None and self.order_verdicts[i][i + 1].relation == "dominated"
            for i in range(self.count - 1)
        )

    def to_json(self, out_dir: str, prefix: str = "invariant") -> str:
        os.makedirs(out_dir, exist_ok=True)
        files = []
        for k, m in enumerate(self.measures):
            name = f"{prefix}_measure_{k}.mvlm"
            m.save(os.path.join(out_dir, name))
            files.append(name)
        doc = {
            "count": self.count,
            "measures": [
                {
                    "file": f,
                    "mean": m.mean.tolist(),
                    "second_moment": m.second_moment,
                    "fixed_point_residual": r,
                    "moment_certificate": vars(c),
                }
                for f, m, r, c in zip(files, self.measures, self.fixed_point_residuals, self.moment_certificates)
            ],
            "order": [[None if v is None else v.to_dict() for v in row] for row in self.order_verdicts],
            "basins": {str(k): v for k, v in self.basins.items()},
            "seeds": [
                {"index": s.index, "converged": s.converged, "iterations": s.iterations, "residuals": s.residuals, "message": s.message}
                for s in self.seed_runs
            ],
            "constants": None if self.constants is None else vars(self.constants),
        }
        path = os.path.join(out_dir, f"{prefix}_report.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, default=_json_default)
        return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def moment_certificate(psi_out: PsiResult, constants: DissipativeConstants, p: float = 2.0, sigma_hi: float = 0.0, d: int = 1) -> MomentCertificate:
    """Check the Psi moment estimate for this frozen input/output pair.

    p = 2:  ||Psi(mu)||_2^2 <= (beta/alpha)||mu||_2^2 + (2 gamma + sigma_hi d) / (2 alpha)
    p > 2:  ||Psi(mu)||_p^p <= 2/(p alpha) ((p-2)/(p alpha))^((p-2)/2)
                               * (2 beta ||mu||_2^2 + 2 gamma + sigma_hi (d + p - 2))^(p/2)
    """
    if p < 2:
        raise ValueError("moment certificates need p >= 2")
    a, b, g = constants.alpha, constants.beta_w, constants.gamma
    m2 = psi_out.frozen_input_summary.second_moment
    if p == 2:
        rhs = (b / a) * m2 + (2 * g + sigma_hi * d) / (2 * a)
    else:
        rhs = (2 / (p * a)) * ((p - 2) / (p * a)) ** ((p - 2) / 2) * (2 * b * m2 + 2 * g + sigma_hi * (d + p - 2)) ** (p / 2)
    lhs = psi_out.law.moment(p) ** p
    return MomentCertificate(bool(lhs <= rhs), float(rhs - lhs), float(lhs), float(rhs), float(p))


def fixed_point_moment_bound(constants: DissipativeConstants, sigma_hi: float, d: int) -> float:
    """Second-moment ceiling for any invariant measure: (2 gamma + sigma_hi d) / (2 (alpha - beta))."""
    return (2 * constants.gamma + sigma_hi * d) / (2 * (constants.alpha - constants.beta_w))


def _as_measure(seed, n: int, root: int) -> EmpiricalMeasure:
    if isinstance(seed, EmpiricalMeasure):
        return seed
    return init_ensemble(seed, n, root).law()


STAGNANT_RATIO = 0.98


def _close_to_fixed_point(residuals: List[float], tol: float) -> bool:
    """A small step is not enough when Picard contracts slowly.

    With observed contraction ratio q < 1 the distance to the fixed point is
    at most r q / (1 - q).  Steps that shrink by less than 2% are stagnant at
    the Monte-Carlo floor, where the step itself is the best available
    estimate.  The first step compares the seed with its image, which for a
    Dirac seed is mostly the noise spreading out, so q is read from later
    steps.
    """
    if residuals[-1] == 0:
        return True
    tail = residuals[1:]
    if len(tail) < 2:
        return False
    if tail[-2] <= 0:
        return True
    q = tail[-1] / tail[-2]
    return q >= STAGNANT_RATIO or tail[-1] * q / (1 - q) < tol


REPEL_SE = 3.0
BRACKET_STEP = 0.05
BRACKET_TRIES = 6
BISECT_MAX = 12


def _order_axis(d: int) -> np.ndarray:
    return np.full(d, 1.0 / math.sqrt(d))


def _mean_se(law: EmpiricalMeasure, n: int) -> float:
    return math.sqrt(float(law.variance().sum()) / n)


def _repelled(drifts: List[float], se: float, tol: float) -> bool:
    """The seed sits within tol of a fixed point that pushes it away.

    Mean drift along the order axis keeps its sign and grows, starting from
    a step above the noise but below tol (a seed far from any fixed point
    just follows Picard to a stable one).
    """
    if len(drifts) < 2:
        return False
    a, b = drifts[-2], drifts[-1]
    return a * b > 0 and REPEL_SE * se < abs(a) < tol and abs(b) > abs(a)


def _bisect(model, k, start: EmpiricalMeasure, shape: EmpiricalMeasure, drift_sign: float, residuals, c) -> SeedRun:
    """Locate a fixed point that Picard moves away from.

    Psi is monotone, so along the order axis the drift phi(t) = <mean Psi(mu_t), u> - t
    of the shifted laws mu_t keeps the sign seen near the seed until it crosses
    a repelling fixed point on the side opposite to the drift.
    """
    u = _order_axis(model.dimension)
    base = float(u @ shape.mean)

    def law(t):
        return shape.shifted(u * (t - base))

    def phi(t):
        out = psi(model, law(t), c)
        return float(u @ out.law.mean) - t, out

    t_near = float(u @ start.mean)
    t_far = None
    step = BRACKET_STEP
    for _ in range(BRACKET_TRIES):
        t = t_near - drift_sign * step
        try:
            val, _ = phi(t)
        except NonConvergenceError as exc:
            return SeedRun(k, False, len(residuals), residuals, None, start, str(exc), "bisection")
        if val * drift_sign < 0:
            t_far = t
            break
        t_near, step = t, 2 * step
    if t_far is None:
        return SeedRun(k, False, len(residuals), residuals, None, start, "no sign change of the mean drift", "bisection")
    se = _mean_se(shape, c.n_particles)
    result, mid = None, t_near
    for it in range(BISECT_MAX):
        mid = 0.5 * (t_near + t_far)
        try:
            val, result = phi(mid)
        except NonConvergenceError as exc:
            return SeedRun(k, False, len(residuals) + it, residuals, None, start, str(exc), "bisection")
        if val * drift_sign > 0:
            t_near = mid
        else:
            t_far = mid
        if abs(t_far - t_near) < c.tol / 10 or abs(val) < se:
            break
    r = _w2(result.law, law(mid), c.seed)
    residuals = residuals + [float(r)]
    ok = r < c.tol
    msg = "" if ok else f"bisection residual {r:.4g} >= tol"
    return SeedRun(k, ok, len(residuals), residuals, result, law(mid), msg, "bisection")


def _iterate(model, k, seed_law, c) -> SeedRun:
    mu = seed_law
    u = _order_axis(model.dimension)
    residuals, drifts = [], []
    result = None
    worse = 0
    for it in range(1, c.max_iter + 1):
        try:
            result = psi(model, mu, c)
        except NonConvergenceError as exc:
            return SeedRun(k, False, it, residuals, None, mu, str(exc))
        r = _w2(result.law, mu, c.seed)
        residuals.append(float(r))
        drifts.append(float(u @ (result.law.mean - mu.mean)))
        se = _mean_se(result.law, c.n_particles)
        if _repelled(drifts, se, c.tol):
            return _bisect(model, k, seed_law, result.law, math.copysign(1.0, drifts[-1]), residuals, c)
        # a drift that grows above the noise may still turn out to be repelled
        growing = (
            len(drifts) > 1 and drifts[-1] * drifts[-2] > 0 and REPEL_SE * se < abs(drifts[-1])
            and abs(drifts[-1]) > abs(drifts[-2])
        )
        if r < c.tol and not growing and _close_to_fixed_point(residuals, c.tol):
            return SeedRun(k, True, it, residuals, result, mu)
        worse = worse + 1 if len(residuals) > 1 and r > residuals[-2] else 0
        if worse >= c.patience:
            return SeedRun(k, False, it, residuals, result, mu, "residual grew for too many consecutive iterations")
        mu = result.law
    return SeedRun(k, False, c.max_iter, residuals, result, mu, "max iterations reached")


def order_between(mu: EmpiricalMeasure, nu: EmpiricalMeasure, seed: int = 0) -> OrderVerdict:
    """Order verdict with the sampling allowance used for Monte-Carlo laws."""
    if mu.dim == 1:
        return stochastic_order(mu, nu, tol=dkw_margin(min(mu.n, nu.n)))
    # one seed for both: clouds of one ensemble keep their particle pairing
    a, b = thin(mu, ORDER_ATOMS_2D, seed), thin(nu, ORDER_ATOMS_2D, seed)
    return stochastic_order(a, b, tol=dkw_margin(ORDER_ATOMS_2D))


def _sort_key(m: EmpiricalMeasure) -> float:
    return float(m.mean.sum())


def find_invariant_measures(model: ModelSpec, seeds: Sequence, controls: PsiControls = PsiControls()) -> InvariantMeasureReport:
    """Picard-iterate Psi from each seed, merge nearby limits, verify the order."""
    constants = fit_dissipative_constants(model)
    c = controls
    laws = [_as_measure(s, c.n_particles, c.seed) for s in seeds]
    if c.threads > 1:
        with ThreadPoolExecutor(max_workers=c.threads) as pool:
            runs = list(pool.map(lambda kv: _iterate(model, kv[0], kv[1], c), enumerate(laws)))
    else:
        runs = [_iterate(model, k, law, c) for k, law in enumerate(laws)]

    reps: List[SeedRun] = []
    assign = {}
    for run in runs:
        if not run.converged:
            continue
        for j, rep in enumerate(reps):
            if _w2(run.result.law, rep.result.law, c.seed) < c.merge:
                assign[run.index] = j
                break
        else:
            assign[run.index] = len(reps)
            reps.append(run)
    order = sorted(range(len(reps)), key=lambda j: _sort_key(reps[j].result.law))
    rank = {j: r for r, j in enumerate(order)}
    reps = [reps[j] for j in order]
    basins = {k: rank[v] for k, v in assign.items()}
    measures = [r.result.law for r in reps]
    n = len(measures)
    verdicts = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j:
                verdicts[i][j] = order_between(measures[i], measures[j], c.seed)
    sigma_hi = model.sigma_bounds[1]
    certs = [moment_certificate(r.result, constants, 2.0, sigma_hi, model.dimension) for r in reps]
    return InvariantMeasureReport(
        measures=measures,
        fixed_point_residuals=[r.residuals[-1] for r in reps],
        order_verdicts=verdicts,
        basins=basins,
        moment_certificates=certs,
        seed_runs=runs,
        psi_results=[r.result for r in reps],
        constants=constants,
    )


def canonical_seeds(model: ModelSpec) -> List[InitialLaw]:
    """Dirac seeds at the declared dissipativity points of the built-in families."""
    pts = {
        "double_well": [[-1.0], [0.0], [1.0]],
        "perturbed_double_well": [[-1.0], [0.0], [1.0]],
        "multi_well": [[-2.0], [-1.0], [0.0], [1.0], [2.0]],
        "cross_coupled_2d": [[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]],
    }.get(model.family)
    if pts is None:
        raise UnsupportedModelError("custom models need explicit seeds")
    return [InitialLaw.dirac(p) for p in pts]
