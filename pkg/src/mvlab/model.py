"""Model specifications for cooperative McKean-Vlasov equations.

Every model here has drift of the separable-plus-linear form

    b_i(x, mu) = p_i(x_i) + sum_j A_ij x_j + sum_j M_ij m_j
                 - amp_i sin(freq_i x_i + phase_i) - E_{y~mu} phi(x_i - y_i)

where ``m`` is the mean of ``mu`` and ``phi`` is an optional pairwise kernel
(a polynomial; only present for ``pairwise_kernel`` models).  Diffusion is
diagonal with ``sigma_ii = s0 + s1 tanh(x_i + hx) + s2 tanh(m_i + hm)``.
This covers the four built-in landscapes plus user polynomials, and keeps
everything a plain array so the stepping kernels can be compiled.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, UnsupportedModelError
from .measure import EmpiricalMeasure, MeasureSummary, stochastic_order

FAMILIES = ("double_well", "multi_well", "perturbed_double_well", "cross_coupled_2d", "custom")
INTERACTIONS = ("mean_field_quadratic", "pairwise_kernel")
GAMMA_FLOOR = 1e-6


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    family: str
    dimension: int
    poly: np.ndarray  # (d, K) ascending coefficients of p_i
    coupling: np.ndarray  # (d, d)
    mean_coupling: np.ndarray  # (d, d)
    perturbation: np.ndarray  # (d, 3): amp, freq, phase
    sigma: np.ndarray  # (d, 5): s0, s1, s2, hx, hm
    kernel: np.ndarray = field(default_factory=lambda: _frozen(np.zeros(0)))
    params: Mapping[str, float] = field(default_factory=dict)
    sigma_bounds: Optional[tuple] = None  # declared (lo, hi) for sigma_ii^2

    def __post_init__(self):
        d = int(self.dimension)
        if d < 1:
            raise ConfigError("dimension must be >= 1")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        object.__setattr__(self, "dimension", d)
        poly = np.atleast_2d(np.asarray(self.poly, dtype=float))
        if poly.shape[0] != d:
            raise ConfigError(f"drift.poly needs {d} rows, got {poly.shape[0]}")
        object.__setattr__(self, "poly", _frozen(poly))
        for name, shape in (("coupling", (d, d)), ("mean_coupling", (d, d)), ("perturbation", (d, 3)), ("sigma", (d, 5))):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.size != shape[0] * shape[1]:
                raise ConfigError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, _frozen(arr, shape))
        object.__setattr__(self, "kernel", _frozen(np.asarray(self.kernel, dtype=float).ravel()))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        for arr in (self.poly, self.coupling, self.mean_coupling, self.perturbation, self.sigma, self.kernel):
            if not np.all(np.isfinite(arr)):
                raise ConfigError("model coefficients must be finite")
        if self.family in ("double_well", "multi_well", "perturbed_double_well") and d != 1:
            raise ConfigError(f"{self.family} is one-dimensional")
        if self.family == "cross_coupled_2d" and d != 2:
            raise ConfigError("cross_coupled_2d is two-dimensional")
        if self.sigma_bounds is None:
            object.__setattr__(self, "sigma_bounds", self._implied_sigma_bounds())

    @property
    def interaction_kind(self) -> str:
        return "pairwise_kernel" if np.any(self.kernel != 0) else "mean_field_quadratic"

    @property
    def measure_dependent_diffusion(self) -> bool:
        return bool(np.any(self.sigma[:, 2] != 0))

    @property
    def constant_diffusion(self) -> bool:
        return not np.any(self.sigma[:, 1:3] != 0)

    def _implied_sigma_bounds(self):
        s0 = self.sigma[:, 0]
        spread = np.abs(self.sigma[:, 1]) + np.abs(self.sigma[:, 2])
        lo = np.where(np.abs(s0) > spread, np.abs(s0) - spread, 0.0) ** 2
        hi = (np.abs(s0) + spread) ** 2
        return (float(lo.min()), float(hi.max()))

    @property
    def sigma_sq_sup(self) -> float:
        """Upper bound on ||sigma||^2 summed over components (the trace of sigma sigma^T)."""
        s0 = np.abs(self.sigma[:, 0])
        spread = np.abs(self.sigma[:, 1]) + np.abs(self.sigma[:, 2])
        return float(np.sum((s0 + spread) ** 2))

    # -- evaluation ---------------------------------------------------

    def drift_batch(self, x: np.ndarray, mean: np.ndarray, samples: Optional[np.ndarray] = None) -> np.ndarray:
        """b(x_k, mu) for every row of ``x`` (shape (N, d))."""
        x = np.asarray(x, dtype=float)
        mean = np.asarray(mean, dtype=float)
        out = np.zeros_like(x)
        for i in range(self.dimension):
            xi = x[:, i]
            acc = np.zeros_like(xi)
            for c in self.poly[i, ::-1]:
                acc = acc * xi + c
            amp, freq, phase = self.perturbation[i]
            if amp != 0.0:
                acc = acc - amp * np.sin(freq * xi + phase)
            out[:, i] = acc
        out += x @ self.coupling.T + self.mean_coupling @ mean
        if self.kernel.size and np.any(self.kernel != 0):
            if samples is None:
                raise ValueError("pairwise-kernel drift needs the sample cloud")
            out -= _kernel_mean(self.kernel, x, np.asarray(samples, dtype=float))
        return out

    def diffusion_diag(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        s = self.sigma
        return s[:, 0] + s[:, 1] * np.tanh(x + s[:, 3]) + s[:, 2] * np.tanh(np.asarray(mean, dtype=float) + s[:, 4])

    # -- identity -----------------------------------------------------

    def to_config(self) -> dict:
        cfg = {"family": self.family}
        if self.family != "custom" and self.params:
            cfg["params"] = {k: _plain(v) for k, v in self.params.items()}
            return cfg
        cfg["dimension"] = self.dimension
        cfg["drift"] = {
            "poly": self.poly.tolist(),
            "coupling": self.coupling.tolist(),
            "mean_coupling": self.mean_coupling.tolist(),
            "perturbation": self.perturbation.tolist(),
            "kernel": self.kernel.tolist(),
        }
        cfg["diffusion"] = {"sigma": self.sigma.tolist(), "bounds": list(self.sigma_bounds)}
        if self.params:
            cfg["params"] = {k: _plain(v) for k, v in self.params.items()}
        return cfg

    def content_hash(self) -> str:
        blob = json.dumps(
            {
                "family": self.family,
                "arrays": [a.tobytes().hex() for a in (self.poly, self.coupling, self.mean_coupling, self.perturbation, self.sigma, self.kernel)],
                "bounds": [repr(v) for v in self.sigma_bounds],
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return self.content_hash() == other.content_hash() and dict(self.params) == dict(other.params)

    def __hash__(self):
        return hash(self.content_hash())


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _kernel_mean(kernel, x, samples):
    """E_y phi(x - y) per coordinate, chunked to bound memory."""
    out = np.zeros_like(x)
    for s in range(0, x.shape[0], 1024):
        diff = x[s : s + 1024, None, :] - samples[None, :, :]
        acc = np.zeros_like(diff)
        for c in kernel[::-1]:
            acc = acc * diff + c
        out[s : s + 1024] = acc.mean(axis=1)
    return out


# -- constructors ----------------------------------------------------------


def _sigma_row(sigma, sigma_tanh=0.0, sigma_mean_tanh=0.0):
    return [sigma, sigma_tanh, sigma_mean_tanh, 0.0, 0.0]


def double_well(beta: float, sigma: float, sigma_tanh: float = 0.0) -> ModelSpec:
    """dX = -[X^3 - X + beta (X - EX)] dt + sigma(X) dW."""
    return ModelSpec(
        family="double_well",
        dimension=1,
        poly=[[0.0, 1.0 - beta, 0.0, -1.0]],
        coupling=[[0.0]],
        mean_coupling=[[beta]],
        perturbation=[[0.0, 0.0, 0.0]],
        sigma=[_sigma_row(sigma, sigma_tanh)],
        params={"beta": beta, "sigma": sigma, "sigma_tanh": sigma_tanh},
    )


def multi_well(beta: float, sigma: float, sigma_tanh: float = 0.0) -> ModelSpec:
    """Quintic landscape with stable wells at 0, +-2 and saddles at +-1."""
    return ModelSpec(
        family="multi_well",
        dimension=1,
        poly=[[0.0, -4.0 - beta, 0.0, 5.0, 0.0, -1.0]],
        coupling=[[0.0]],
        mean_coupling=[[beta]],
        perturbation=[[0.0, 0.0, 0.0]],
        sigma=[_sigma_row(sigma, sigma_tanh)],
        params={"beta": beta, "sigma": sigma, "sigma_tanh": sigma_tanh},
    )


def perturbed_double_well(
    beta: float, sigma: float, amp: float, freq: float = 1.0, phase: float = 0.0, sigma_tanh: float = 0.0
) -> ModelSpec:
    """Double well with an extra bounded force -amp*sin(freq*x + phase)."""
    return ModelSpec(
        family="perturbed_double_well",
        dimension=1,
        poly=[[0.0, 1.0 - beta, 0.0, -1.0]],
        coupling=[[0.0]],
        mean_coupling=[[beta]],
        perturbation=[[amp, freq, phase]],
        sigma=[_sigma_row(sigma, sigma_tanh)],
        params={"beta": beta, "sigma": sigma, "amp": amp, "freq": freq, "phase": phase, "sigma_tanh": sigma_tanh},
    )


def cross_coupled_2d(beta: float, sigma1: float, sigma2: float) -> ModelSpec:
    """dX1 = [X2 - X1^3 - beta(X1 - EX1)] dt + s1 dW1, and symmetrically for X2."""
    return ModelSpec(
        family="cross_coupled_2d",
        dimension=2,
        poly=[[0.0, -beta, 0.0, -1.0], [0.0, -beta, 0.0, -1.0]],
        coupling=[[0.0, 1.0], [1.0, 0.0]],
        mean_coupling=[[beta, 0.0], [0.0, beta]],
        perturbation=np.zeros((2, 3)),
        sigma=[_sigma_row(sigma1), _sigma_row(sigma2)],
        params={"beta": beta, "sigma1": sigma1, "sigma2": sigma2},
    )


def custom(
    poly,
    coupling=None,
    mean_coupling=None,
    perturbation=None,
    sigma=None,
    kernel=None,
    sigma_bounds=None,
    params=None,
) -> ModelSpec:
    poly = np.atleast_2d(np.asarray(poly, dtype=float))
    d = poly.shape[0]
    sig = np.zeros((d, 5))
    if sigma is not None:
        s = np.asarray(sigma, dtype=float)
        if s.ndim == 2:
            sig[:, : s.shape[1]] = s
        else:
            sig[:, 0] = np.broadcast_to(s, (d,))
    return ModelSpec(
        family="custom",
        dimension=d,
        poly=poly,
        coupling=np.zeros((d, d)) if coupling is None else coupling,
        mean_coupling=np.zeros((d, d)) if mean_coupling is None else mean_coupling,
        perturbation=np.zeros((d, 3)) if perturbation is None else perturbation,
        sigma=sig,
        kernel=np.zeros(0) if kernel is None else kernel,
        params=params or {},
        sigma_bounds=None if sigma_bounds is None else tuple(float(v) for v in sigma_bounds),
    )


def _num(v, name):
    if isinstance(v, bool):
        raise ConfigError(f"field {name!r} must be a number")
    try:
        out = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"field {name!r} must be a number, got {v!r}") from None
    if not math.isfinite(out):
        raise ConfigError(f"field {name!r} must be finite")
    return out


def _sigma_param(p, key):
    if key in p:
        return _num(p[key], key)
    if key + "_sq" in p:
        v = _num(p[key + "_sq"], key + "_sq")
        if v < 0:
            raise ConfigError(f"field {key + '_sq'!r} must be >= 0")
        return math.sqrt(v)
    raise ConfigError(f"missing parameter {key!r} (or {key + '_sq'!r})")


def _require(p, key):
    if key not in p:
        raise ConfigError(f"missing parameter {key!r}")
    return _num(p[key], key)


def _matrix(v, name):
    """Nested list of numbers or decimal strings -> float array."""
    try:
        arr = np.array(v, dtype=object)
    except ValueError:
        raise ConfigError(f"field {name!r} is ragged") from None
    flat = [_num(x, name) for x in arr.ravel()]
    return np.array(flat, dtype=float).reshape(arr.shape)


def from_config(cfg: Mapping) -> ModelSpec:
    """Build a model from a parsed config mapping (see ``ModelSpec.to_config``)."""
    if not isinstance(cfg, Mapping):
        raise ConfigError("model config must be a mapping")
    fam = cfg.get("family")
    if fam is None:
        raise ConfigError("missing field 'family'")
    if fam not in FAMILIES:
        raise ConfigError(f"unknown family {fam!r}; expected one of {', '.join(FAMILIES)}")
    p = cfg.get("params") or {}
    if not isinstance(p, Mapping):
        raise ConfigError("'params' must be a mapping")
    if fam == "double_well":
        return double_well(_require(p, "beta"), _sigma_param(p, "sigma"), _num(p.get("sigma_tanh", 0.0), "sigma_tanh"))
    if fam == "multi_well":
        return multi_well(_require(p, "beta"), _sigma_param(p, "sigma"), _num(p.get("sigma_tanh", 0.0), "sigma_tanh"))
    if fam == "perturbed_double_well":
        return perturbed_double_well(
            _require(p, "beta"),
            _sigma_param(p, "sigma"),
            _require(p, "amp"),
            _num(p.get("freq", 1.0), "freq"),
            _num(p.get("phase", 0.0), "phase"),
            _num(p.get("sigma_tanh", 0.0), "sigma_tanh"),
        )
    if fam == "cross_coupled_2d":
        return cross_coupled_2d(_require(p, "beta"), _sigma_param(p, "sigma1"), _sigma_param(p, "sigma2"))
    drift = cfg.get("drift")
    if not isinstance(drift, Mapping) or "poly" not in drift:
        raise ConfigError("custom model needs 'drift.poly'")
    poly = _matrix(drift["poly"], "drift.poly")
    poly = np.atleast_2d(poly)
    d = int(cfg.get("dimension", poly.shape[0]))
    diff = cfg.get("diffusion") or {}
    sigma = _matrix(diff.get("sigma", 0.0), "diffusion.sigma")
    bounds = diff.get("bounds")
    if bounds is not None:
        bounds = tuple(_num(b, "diffusion.bounds") for b in bounds)
        if len(bounds) != 2 or not (0 <= bounds[0] <= bounds[1]):
            raise ConfigError("diffusion.bounds must be [lo, hi] with 0 <= lo <= hi")

    def opt(name, shape):
        if name in drift:
            return _matrix(drift[name], f"drift.{name}").reshape(shape)
        return None

    try:
        m = custom(
            poly,
            coupling=opt("coupling", (d, d)),
            mean_coupling=opt("mean_coupling", (d, d)),
            perturbation=opt("perturbation", (d, 3)),
            sigma=sigma,
            kernel=_matrix(drift["kernel"], "drift.kernel") if "kernel" in drift else None,
            sigma_bounds=bounds,
            params={k: _num(v, k) for k, v in p.items()},
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if m.dimension != d:
        raise ConfigError(f"dimension {d} does not match drift.poly rows {m.dimension}")
    return m


# -- operations ------------------------------------------------------------


def as_summary(model: ModelSpec, mu) -> MeasureSummary:
    """Coerce a measure, summary, or bare mean into a MeasureSummary."""
    if isinstance(mu, MeasureSummary):
        s = mu
    elif isinstance(mu, EmpiricalMeasure):
        s = mu.summary(with_samples=model.interaction_kind == "pairwise_kernel")
    else:
        s = MeasureSummary.from_mean(mu)
    if s.dim != model.dimension:
        raise ValueError(f"measure dimension {s.dim} != model dimension {model.dimension}")
    return s


def _state(model, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.dimension,):
        raise ValueError(f"state must have length {model.dimension}, got shape {x.shape}")
    return x


def eval_drift(model: ModelSpec, x, summary) -> np.ndarray:
    x = _state(model, x)
    s = as_summary(model, summary)
    return model.drift_batch(x[None, :], s.mean, s.samples)[0]


def eval_diffusion(model: ModelSpec, x, summary) -> np.ndarray:
    x = _state(model, x)
    s = as_summary(model, summary)
    return np.diag(model.diffusion_diag(x, s.mean))


@dataclass(frozen=True)
class CooperativityReport:
    checked: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def ordered_grid(model: ModelSpec, box: float = 3.0, n: int = 7, mean_box: Optional[float] = None):
    """Deterministic grid of tuples (x, y, mu, nu) meeting the cooperativity premise."""
    mb = box if mean_box is None else mean_box
    xs = np.linspace(-box, box, n)
    ms = np.linspace(-mb, mb, n)
    d = model.dimension
    out = []
    for i in range(d):
        for xi in xs:
            for lo in ms:
                for hi in ms[ms >= lo]:
                    x = np.full(d, xi)
                    y = np.full(d, xi)
                    for j in range(d):
                        if j != i:
                            x[j] = lo
                            y[j] = hi
                    out.append((x, y, MeasureSummary.from_mean(np.full(d, lo)), MeasureSummary.from_mean(np.full(d, hi))))
    return out


def _summary_leq(a: MeasureSummary, b: MeasureSummary) -> bool:
    if a.samples is not None and b.samples is not None:
        return stochastic_order(EmpiricalMeasure(a.samples, a.weights), EmpiricalMeasure(b.samples, b.weights)).leq
    return bool(np.all(a.mean <= b.mean))


def check_cooperativity(model: ModelSpec, sample_grid, atol: float = 1e-12) -> CooperativityReport:
    """Look for b_i(x, mu) > b_i(y, nu) with x_i = y_i, x <= y, mu <=st nu."""
    violations = []
    count = 0
    for k, tup in enumerate(sample_grid):
        try:
            x, y, mu, nu = tup
        except (TypeError, ValueError):
            raise ValueError(f"grid entry {k} is not an (x, y, mu, nu) tuple") from None
        x, y = _state(model, x), _state(model, y)
        mu, nu = as_summary(model, mu), as_summary(model, nu)
        if np.any(x > y):
            raise ValueError(f"grid entry {k}: x is not below y componentwise")
        if not _summary_leq(mu, nu):
            raise ValueError(f"grid entry {k}: mu is not below nu in stochastic order")
        bx = model.drift_batch(x[None], mu.mean, mu.samples)[0]
        by = model.drift_batch(y[None], nu.mean, nu.samples)[0]
        for i in np.nonzero(x == y)[0]:
            count += 1
            if bx[i] > by[i] + atol:
                violations.append({"entry": k, "component": int(i), "b_x": float(bx[i]), "b_y": float(by[i])})
    return CooperativityReport(count, violations)


@dataclass(frozen=True)
class DissipativeConstants:
    """<x, b(x, mu)> <= -alpha |x|^2 + beta_w ||mu||_2^2 + gamma."""

    alpha: float
    beta_w: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta_w", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.alpha > self.beta_w > 0 and self.gamma > 0):
            raise ValueError(f"need alpha > beta_w > 0 and gamma > 0, got {self}")

    def bound(self, x_sq, mu_sq):
        return -self.alpha * x_sq + self.beta_w * mu_sq + self.gamma


def _poly_max(coeffs: np.ndarray) -> float:
    """Maximum over x >= 0 of a polynomial (ascending coeffs) with negative leading term."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if c.size == 0:
        return 0.0
    cand = [0.0]
    if c.size > 1:
        dc = np.polynomial.polynomial.polyder(c)
        for r in np.polynomial.polynomial.polyroots(dc) if np.any(dc) else []:
            if abs(r.imag) < 1e-9 and r.real > 0:
                cand.append(r.real)
    vals = np.polynomial.polynomial.polyval(np.asarray(cand), c)
    return float(vals.max())


def _as_mean_field(model: ModelSpec) -> ModelSpec:
    """A linear pairwise kernel phi(r) = k0 + k1 r is the same as mean-field coupling."""
    if model.interaction_kind != "pairwise_kernel":
        return model
    k = np.trim_zeros(model.kernel, "b")
    if k.size > 2:
        raise UnsupportedModelError("dissipativity constants need a linear pairwise kernel")
    k0 = k[0] if k.size > 0 else 0.0
    k1 = k[1] if k.size > 1 else 0.0
    d = model.dimension
    poly = np.zeros((d, max(model.poly.shape[1], 2)))
    poly[:, : model.poly.shape[1]] = model.poly
    poly[:, 0] -= k0
    poly[:, 1] -= k1
    return custom(poly, model.coupling, model.mean_coupling + k1 * np.eye(d), model.perturbation, model.sigma)


def fit_dissipative_constants(model: ModelSpec) -> DissipativeConstants:
    """Constants for the global weak-dissipativity inequality.

    The mean term is split by Young: x.M m <= c|x|^2 + c|m|^2 with c = ||M||/2,
    and |m|^2 <= ||mu||_2^2.  Cross coupling contributes its symmetric-part
    spectral bound.  What remains is a sum of one-variable polynomials whose
    maxima (found from the roots of the derivative) give gamma.
    """
    model = _as_mean_field(model)
    d = model.dimension
    c = 0.5 * float(np.linalg.norm(model.mean_coupling, 2))
    lam = float(np.linalg.eigvalsh(0.5 * (model.coupling + model.coupling.T)).max())
    poly = model.poly
    amps = np.abs(model.perturbation[:, 0])
    degs = []
    for i in range(d):
        p = np.trim_zeros(poly[i], "b")
        deg = p.size - 1
        if deg < 1 or p[-1] >= 0 or deg % 2 == 0:
            raise UnsupportedModelError(f"drift component {i} has no dissipative odd-degree tail")
        degs.append(deg)
    if min(degs) >= 3:
        alpha = c + 1.0
    else:
        # some component is linear: the quadratic budget is what its slope leaves over
        slack = min(-poly[i, 1] - lam - c for i in range(d) if degs[i] == 1)
        if slack <= 0:
            raise UnsupportedModelError("linear drift too weak to dominate the coupling")
        alpha = slack / 2.0 if np.any(amps > 0) else slack
        if any(deg >= 3 for deg in degs):
            alpha = min(alpha, c + 1.0)
    beta_w = c if c > 0 else alpha / 2.0
    if not alpha > beta_w:
        raise UnsupportedModelError(f"cannot separate alpha={alpha} from beta_w={beta_w}")
    gamma = 0.0
    for i in range(d):
        # residual r(x) = x p_i(x) + (lam + c + alpha) x^2 + |amp| |x|
        xp = np.concatenate([[0.0], poly[i]])
        xp = np.pad(xp, (0, max(0, 3 - xp.size)))
        xp[2] += lam + c + alpha
        xp[1] += amps[i]
        right = _poly_max(xp)
        xm = xp * np.array([(-1.0) ** k for k in range(xp.size)])
        xm[1] = -poly[i, 0] + amps[i]
        left = _poly_max(xm)
        gamma += max(right, left)
    return DissipativeConstants(alpha, beta_w, max(gamma, GAMMA_FLOOR))


def one_sided_lipschitz_constant(model: ModelSpec, box: float) -> float:
    """K with <x-y, b(x,mu)-b(y,nu)> <= K|x-y|^2 + K|x-y| W2(mu,nu) on |x_i| <= box."""
    model = _as_mean_field(model)
    grid = np.linspace(-box, box, 2001)
    k1 = -np.inf
    for i in range(model.dimension):
        dp = np.polynomial.polynomial.polyder(model.poly[i]) if model.poly.shape[1] > 1 else np.zeros(1)
        slope = np.polynomial.polynomial.polyval(grid, dp)
        amp, freq, _ = model.perturbation[i]
        k1 = max(k1, float(slope.max()) + abs(amp * freq))
    lam = float(np.linalg.eigvalsh(0.5 * (model.coupling + model.coupling.T)).max())
    k_state = k1 + lam
    k_mean = float(np.linalg.norm(model.mean_coupling, 2))
    return max(k_state, k_mean, 0.0)


@dataclass(frozen=True)
class EllipticityReport:
    observed_lo: float
    observed_hi: float
    declared: tuple

    @property
    def passed(self) -> bool:
        lo, hi = self.declared
        return 0 < lo <= self.observed_lo + 1e-15 and self.observed_hi <= hi + 1e-15


def check_ellipticity(model: ModelSpec, points=None, means=None) -> EllipticityReport:
    """Spot-check sigma sigma^T against the declared bounds (diagonal sigma)."""
    d = model.dimension
    pts = np.linspace(-5, 5, 101)[:, None] * np.ones(d) if points is None else np.atleast_2d(points)
    ms = np.linspace(-3, 3, 13)[:, None] * np.ones(d) if means is None else np.atleast_2d(means)
    vals = np.concatenate([model.diffusion_diag(pts, m) ** 2 for m in ms])
    return EllipticityReport(float(vals.min()), float(vals.max()), model.sigma_bounds)


def shifted_model(model: ModelSpec, a) -> ModelSpec:
    """The a-shifted pair: b^a(x, nu) = b(x + a, nu shifted by +a), same for sigma.

    If X solves the original equation then X - a solves the shifted one.
    """
    a = np.broadcast_to(np.asarray(a, dtype=float), (model.dimension,))
    d = model.dimension
    poly = np.zeros_like(model.poly)
    for i in range(d):
        # p(x + a_i) re-expanded in powers of x
        shifted = np.polynomial.Polynomial(model.poly[i])(np.polynomial.Polynomial([a[i], 1.0]))
        poly[i, : shifted.coef.size] = shifted.coef[: poly.shape[1]]
    poly[:, 0] += model.coupling @ a + model.mean_coupling @ a
    pert = model.perturbation.copy()
    pert[:, 2] = pert[:, 2] + pert[:, 1] * a
    sig = model.sigma.copy()
    sig[:, 3] += a
    sig[:, 4] += a
    return ModelSpec(
        family="custom",
        dimension=d,
        poly=poly,
        coupling=model.coupling,
        mean_coupling=model.mean_coupling,
        perturbation=pert,
        sigma=sig,
        kernel=model.kernel,
        params={**model.params, **{f"shift{i}": float(a[i]) for i in range(d)}},
        sigma_bounds=model.sigma_bounds,
    )
