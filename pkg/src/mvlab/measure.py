"""Empirical measures: moments, Wasserstein distances, stochastic order, and
the dual-Lipschitz (Kantorovich) norm on finite signed measures.
"""

from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, sparse
from scipy.special import logsumexp

from .errors import NumericalError

ASSIGNMENT_CAP = 2048
STRASSEN_LP_CAP = 512
TRANSPORT_LP_CAP = 250_000
DENSE_COST_CAP = 25_000_000
_WEIGHT_TOL = 1e-12
_MAGIC = b"MVLMEAS1"

RELATIONS = ("dominated", "dominates", "equal", "incomparable", "inconclusive")


def dkw_margin(n: int) -> float:
    """CDF-gap noise allowance for order tests between clouds of ``n`` samples."""
    return 2.0 / np.sqrt(n)


@dataclass(frozen=True)
class MeasureSummary:
    """What drift and diffusion get to see of a measure."""

    mean: np.ndarray
    second_moment: float
    samples: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @classmethod
    def from_mean(cls, mean, second_moment=None):
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        sm = float(m @ m) if second_moment is None else float(second_moment)
        return cls(mean=m, second_moment=sm)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def norm2(self) -> float:
        return float(np.sqrt(self.second_moment))


class EmpiricalMeasure:
    """Weighted sample cloud standing in for an element of P_2(R^d)."""

    __slots__ = ("_samples", "_weights", "_moments", "_lock")

    def __init__(self, samples, weights=None):
        x = np.array(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"samples must be a nonempty (N, d) array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        x.setflags(write=False)
        w = None
        if weights is not None:
            w = np.array(weights, dtype=np.float64).ravel()
            if w.shape[0] != x.shape[0]:
                raise ValueError("weights length does not match number of samples")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > _WEIGHT_TOL:
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
            w.setflags(write=False)
        self._samples = x
        self._weights = w
        self._moments = {}
        self._lock = threading.Lock()

    @classmethod
    def normalized(cls, samples, weights):
        w = np.asarray(weights, dtype=float)
        return cls(samples, w / w.sum())

    @classmethod
    def dirac(cls, point, n: int = 1):
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(np.tile(p, (n, 1)))

    @property
    def samples(self) -> np.ndarray:
        return self._samples

    @property
    def weights(self) -> np.ndarray:
        if self._weights is None:
            n = self._samples.shape[0]
            return np.full(n, 1.0 / n)
        return self._weights

    @property
    def is_uniform(self) -> bool:
        return self._weights is None

    @property
    def n(self) -> int:
        return self._samples.shape[0]

    @property
    def dim(self) -> int:
        return self._samples.shape[1]

    def _cached(self, key, fn):
        val = self._moments.get(key)
        if val is None:
            with self._lock:
                val = self._moments.get(key)
                if val is None:
                    val = fn()
                    self._moments[key] = val
        return val

    @property
    def mean(self) -> np.ndarray:
        def f():
            if self._weights is None:
                return self._samples.mean(axis=0)
            return self._weights @ self._samples

        return self._cached("mean", f)

    @property
    def second_moment(self) -> float:
        return self.moment(2.0) ** 2

    def moment(self, p: float = 2.0) -> float:
        if p < 1:
            raise ValueError("moment order p must be >= 1")

        def f():
            r = np.linalg.norm(self._samples, axis=1)
            return float((self.weights @ r**p) ** (1.0 / p))

        return self._cached(("moment", float(p)), f)

    def variance(self) -> np.ndarray:
        c = self._samples - self.mean
        return self.weights @ (c * c)

    def summary(self, with_samples: bool = False) -> MeasureSummary:
        return MeasureSummary(
            mean=self.mean.copy(),
            second_moment=self.second_moment,
            samples=self._samples if with_samples else None,
            weights=self._weights if with_samples else None,
        )

    def shifted(self, v) -> "EmpiricalMeasure":
        v = np.broadcast_to(np.asarray(v, dtype=float), (self.dim,))
        return EmpiricalMeasure(self._samples + v, self._weights)

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, dim={self.dim}, mean={np.round(self.mean, 6).tolist()})"

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return (
            self._samples.shape == other._samples.shape
            and np.array_equal(self._samples, other._samples)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<QQB", self.dim, self.n, 1 if self.is_uniform else 0))
        buf.write(np.ascontiguousarray(self._samples, dtype="<f8").tobytes())
        if not self.is_uniform:
            buf.write(np.ascontiguousarray(self._weights, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmpiricalMeasure":
        if data[:8] != _MAGIC:
            raise ValueError("not a measure blob")
        d, n, uni = struct.unpack_from("<QQB", data, 8)
        off = 8 + struct.calcsize("<QQB")
        x = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        w = None
        if not uni:
            w = np.frombuffer(data, dtype="<f8", count=n, offset=off + 8 * n * d)
        return cls(x, w)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmpiricalMeasure":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path) -> None:
        cols = [f"x{k}" for k in range(self.dim)] + ["weight"]
        w = self.weights
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row, wi in zip(self._samples, w):
                fh.write(",".join(repr(float(v)) for v in row) + "," + repr(float(wi)) + "\n")


@dataclass(frozen=True)
class SignedDiscreteMeasure:
    atoms: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        m = np.asarray(self.masses, dtype=float).ravel()
        if a.shape[0] != m.shape[0]:
            raise ValueError("atoms and masses differ in length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(m))):
            raise ValueError("atoms and masses must be finite")
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "masses", m)

    @classmethod
    def difference(cls, mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> "SignedDiscreteMeasure":
        """mu - nu."""
        return cls(np.vstack([mu.samples, nu.samples]), np.concatenate([mu.weights, -nu.weights]))

    def merged(self):
        """Unique atoms with aggregated masses (rows sorted lexicographically)."""
        if self.atoms.shape[0] == 0:
            return self.atoms, self.masses
        pts, inv = np.unique(self.atoms, axis=0, return_inverse=True)
        mass = np.zeros(pts.shape[0])
        np.add.at(mass, inv.ravel(), self.masses)
        return pts, mass

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())


@dataclass(frozen=True)
class OrderVerdict:
    relation: str
    margin: float
    witness: Optional[dict] = None
    method: str = ""

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        if self.relation == "incomparable" and not self.witness:
            raise ValueError("incomparable verdict needs a witness")

    @property
    def leq(self) -> bool:
        """mu <=st nu established."""
        return self.relation in ("dominated", "equal")

    @property
    def geq(self) -> bool:
        return self.relation in ("dominates", "equal")

    def to_dict(self):
        return {"relation": self.relation, "margin": self.margin, "witness": self.witness, "method": self.method}


@dataclass(frozen=True)
class TransportResult:
    value: float
    p: float
    mode: str
    regularization: float = 0.0
    error_bound: float = 0.0
    iterations: int = 0
    extras: dict = field(default_factory=dict)


def moment(mu: EmpiricalMeasure, p: float = 2.0) -> float:
    return mu.moment(p)


def _check_pair(mu, nu):
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def _quantile_cost_1d(x, a, y, b, p):
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    Fa, Fb = np.cumsum(a[ix]), np.cumsum(b[iy])
    Fa[-1] = Fb[-1] = 1.0
    u = np.unique(np.concatenate([[0.0], Fa, Fb]))
    u = u[(u >= 0.0) & (u <= 1.0)]
    du = np.diff(u)
    mid = 0.5 * (u[:-1] + u[1:])
    qx = xs[np.minimum(np.searchsorted(Fa, mid, side="left"), xs.size - 1)]
    qy = ys[np.minimum(np.searchsorted(Fb, mid, side="left"), ys.size - 1)]
    return float(du @ np.abs(qx - qy) ** p)


def _cost_matrix(x, y, p):
    diff = x[:, None, :] - y[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return d**p


def _transport_lp(a, b, C):
    n, m = C.shape
    rows = sparse.kron(sparse.identity(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.identity(m))
    A = sparse.vstack([rows, cols]).tocsr()
    res = optimize.linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _sinkhorn(a, b, C, eps, tol=1e-6, max_iter=20000):
    la, lb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    K = -C / eps
    for it in range(1, max_iter + 1):
        f = eps * (la - logsumexp(K + g[None, :] / eps, axis=1))
        g = eps * (lb - logsumexp(K + f[:, None] / eps, axis=0))
        if it % 10 == 0 or it == max_iter:
            logP = K + (f[:, None] + g[None, :]) / eps
            err = np.abs(np.exp(logsumexp(logP, axis=1)) - a).sum()
            if err < tol:
                P = np.exp(logP)
                return float((P * C).sum()), it
    raise NumericalError(f"entropic transport did not converge after {max_iter} iterations")


def transport(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0, cap: int = ASSIGNMENT_CAP) -> TransportResult:
    """W_p with the solver mode and error information attached."""
    _check_pair(mu, nu)
    if p < 1:
        raise ValueError("p must be >= 1")
    if mu.dim == 1:
        x, y = mu.samples[:, 0], nu.samples[:, 0]
        if mu.is_uniform and nu.is_uniform and mu.n == nu.n:
            c = float(np.mean(np.abs(np.sort(x) - np.sort(y)) ** p))
            return TransportResult(c ** (1.0 / p), p, "sorted")
        c = _quantile_cost_1d(x, mu.weights, y, nu.weights, p)
        return TransportResult(c ** (1.0 / p), p, "quantile")
    if mu.is_uniform and nu.is_uniform and mu.n == nu.n and mu.n <= cap:
        C = _cost_matrix(mu.samples, nu.samples, p)
        r, c = optimize.linear_sum_assignment(C)
        return TransportResult(float(C[r, c].mean()) ** (1.0 / p), p, "assignment")
    if mu.n * nu.n <= TRANSPORT_LP_CAP:
        C = _cost_matrix(mu.samples, nu.samples, p)
        return TransportResult(_transport_lp(mu.weights, nu.weights, C) ** (1.0 / p), p, "lp")
    if mu.n * nu.n > DENSE_COST_CAP:
        raise NumericalError(f"clouds of size {mu.n}x{nu.n} exceed the dense-cost cap; thin them first")
    C = _cost_matrix(mu.samples, nu.samples, p)
    eps = 1e-2 * float(C.mean())
    if eps == 0.0:
        return TransportResult(0.0, p, "entropic")
    cost, it = _sinkhorn(mu.weights, nu.weights, C, eps)
    bound = eps * np.log(mu.n * nu.n)
    w = cost ** (1.0 / p)
    return TransportResult(
        w, p, "entropic", regularization=eps, error_bound=w - max(cost - bound, 0.0) ** (1.0 / p), iterations=it
    )


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> float:
    return transport(mu, nu, p).value


def quantile_atoms(mu: EmpiricalMeasure, k: int) -> EmpiricalMeasure:
    """k uniform atoms at the mid-quantiles of a 1-D measure (k may exceed mu.n)."""
    order = np.argsort(mu.samples[:, 0], kind="stable")
    xs = mu.samples[order, 0]
    F = np.cumsum(mu.weights[order])
    q = (np.arange(k) + 0.5) / k
    idx = np.minimum(np.searchsorted(F, q, side="left"), mu.n - 1)
    return EmpiricalMeasure(xs[idx])


def thin(mu: EmpiricalMeasure, k: int, seed: int = 0) -> EmpiricalMeasure:
    """Reduce to at most ``k`` uniform atoms.

    1-D clouds go to their k mid-quantiles; higher dimensions are subsampled
    (by weight) with a fixed seed.
    """
    if mu.n <= k and mu.is_uniform:
        return mu
    if mu.dim == 1:
        return quantile_atoms(mu, k)
    rng = np.random.default_rng(seed)
    if mu.is_uniform:
        idx = np.sort(rng.choice(mu.n, size=min(k, mu.n), replace=False))
    else:
        idx = rng.choice(mu.n, size=k, replace=True, p=mu.weights)
    return EmpiricalMeasure(mu.samples[idx])


# -- stochastic order -------------------------------------------------------


def _order_1d(mu, nu, tol):
    x, y = mu.samples[:, 0], nu.samples[:, 0]
    z = np.unique(np.concatenate([x, y]))
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    Fx = np.concatenate([[0.0], np.cumsum(mu.weights[ix])])
    Fy = np.concatenate([[0.0], np.cumsum(nu.weights[iy])])
    Fmu = Fx[np.searchsorted(x[ix], z, side="right")]
    Fnu = Fy[np.searchsorted(y[iy], z, side="right")]
    diff = Fmu - Fnu
    lo, hi = float(diff.min()), float(diff.max())
    slack = tol + 1e-12
    if max(-lo, hi) <= slack:
        return OrderVerdict("equal", lo, method="cdf")
    if lo >= -slack:
        return OrderVerdict("dominated", lo, method="cdf")
    if hi <= slack:
        return OrderVerdict("dominates", lo, method="cdf")
    witness = {"cdf_mu_below_nu_at": float(z[np.argmin(diff)]), "cdf_mu_above_nu_at": float(z[np.argmax(diff)])}
    return OrderVerdict("incomparable", lo, witness=witness, method="cdf")


def _strassen_flow(x, a, y, b):
    """Max mass movable along pairs x_i <= y_j; equals 1 iff a <=st b (Strassen)."""
    allowed = np.all(x[:, None, :] <= y[None, :, :], axis=2)
    ii, jj = np.nonzero(allowed)
    if ii.size == 0:
        return 0.0
    n, m, k = x.shape[0], y.shape[0], ii.size
    A = sparse.vstack(
        [
            sparse.csr_matrix((np.ones(k), (ii, np.arange(k))), shape=(n, k)),
            sparse.csr_matrix((np.ones(k), (jj, np.arange(k))), shape=(m, k)),
        ]
    )
    res = optimize.linprog(-np.ones(k), A_ub=A, b_ub=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"Strassen LP failed: {res.message}")
    return float(-res.fun)


def _orthant_gap(x, a, y, b, pts):
    """max over test points z of mu(X >= z) - nu(Y >= z)."""
    best, arg = -np.inf, None
    for s in range(0, pts.shape[0], 512):
        z = pts[s : s + 512]
        pa = np.all(x[None, :, :] >= z[:, None, :], axis=2) @ a
        pb = np.all(y[None, :, :] >= z[:, None, :], axis=2) @ b
        g = pa - pb
        k = int(np.argmax(g))
        if g[k] > best:
            best, arg = float(g[k]), z[k]
    return best, arg


def stochastic_order(mu: EmpiricalMeasure, nu: EmpiricalMeasure, tol: float = 0.0, lp_cap: int = STRASSEN_LP_CAP) -> OrderVerdict:
    """Decide mu <=st nu.

    ``tol`` is a mass allowance: CDF gaps (1-D), untransported mass (Strassen
    LP), or orthant-probability gaps smaller than it are treated as noise.
    """
    _check_pair(mu, nu)
    if mu.dim == 1:
        return _order_1d(mu, nu, tol)
    slack = tol + 1e-9
    x, a, y, b = mu.samples, mu.weights, nu.samples, nu.weights
    if mu.n + nu.n <= lp_cap:
        up = _strassen_flow(x, a, y, b)
        down = _strassen_flow(y, b, x, a)
        le, ge = up >= 1.0 - slack, down >= 1.0 - slack
        margin = up - 1.0
        if le and ge:
            return OrderVerdict("equal", margin, method="strassen-lp")
        if le:
            return OrderVerdict("dominated", margin, method="strassen-lp")
        if ge:
            return OrderVerdict("dominates", down - 1.0, method="strassen-lp")
        gap, z = _orthant_gap(x, a, y, b, np.vstack([x, y]))
        witness = {"strassen_unmoved_mass": 1.0 - up}
        if gap > 0:
            witness["upper_orthant_at"] = z.tolist()
        return OrderVerdict("incomparable", margin, witness=witness, method="strassen-lp")
    pool = np.vstack([x, y])
    if pool.shape[0] > 4000:
        pool = pool[np.random.default_rng(0).choice(pool.shape[0], 4000, replace=False)]
    up_gap, z_up = _orthant_gap(x, a, y, b, pool)
    dn_gap, z_dn = _orthant_gap(y, b, x, a, pool)
    if up_gap > slack and dn_gap > slack:
        witness = {"mu_heavier_orthant_at": z_up.tolist(), "nu_heavier_orthant_at": z_dn.tolist()}
        return OrderVerdict("incomparable", -up_gap, witness=witness, method="orthant")
    return OrderVerdict("inconclusive", -up_gap, method="orthant")


# -- Kantorovich norm and cone ------------------------------------------------


def _pair_constraints(pts, with_order):
    n, d = pts.shape
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    if d == 1:
        order = np.argsort(pts[:, 0])
        pairs = list(zip(order[:-1], order[1:]))
    else:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        dist = float(np.linalg.norm(pts[i] - pts[j]))
        for s, t in ((i, j), (j, i)):
            rows += [r, r]
            cols += [s, t]
            vals += [1.0, -1.0]
            rhs.append(dist)
            r += 1
        if with_order:
            if np.all(pts[i] <= pts[j]):
                rows += [r, r]
                cols += [i, j]
                vals += [1.0, -1.0]
                rhs.append(0.0)
                r += 1
            elif np.all(pts[j] <= pts[i]):
                rows += [r, r]
                cols += [j, i]
                vals += [1.0, -1.0]
                rhs.append(0.0)
                r += 1
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(r, n))
    return A, np.asarray(rhs)


def kantorovich_norm(m: SignedDiscreteMeasure) -> float:
    """sup of |int f dm| over f with |f(0)| <= 1 and 1-Lipschitz, as an LP."""
    pts, mass = m.merged()
    if pts.shape[0] == 0 or np.all(mass == 0):
        return 0.0
    origin = np.zeros((1, pts.shape[1]))
    hit = np.nonzero(np.all(pts == 0, axis=1))[0]
    if hit.size == 0:
        pts = np.vstack([pts, origin])
        mass = np.concatenate([mass, [0.0]])
        o = pts.shape[0] - 1
    else:
        o = int(hit[0])
    A, rhs = _pair_constraints(pts, with_order=False)
    bounds = [(None, None)] * pts.shape[0]
    bounds[o] = (-1.0, 1.0)
    res = optimize.linprog(-mass, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
    if res.status != 0:
        raise NumericalError(f"Kantorovich LP failed: {res.message}")
    return float(-res.fun)


def cone_membership(m: SignedDiscreteMeasure, tolerance: float = 1e-9) -> bool:
    """Is int f dm >= 0 for every nonnegative, increasing, 1-Lipschitz f?"""
    pts, mass = m.merged()
    if pts.shape[0] == 0 or np.all(mass == 0):
        return True
    A, rhs = _pair_constraints(pts, with_order=True)
    res = optimize.linprog(mass, A_ub=A, b_ub=rhs, bounds=(0, None), method="highs")
    if res.status == 3:
        return False
    if res.status != 0:
        raise NumericalError(f"cone LP failed: {res.message}")
    return float(res.fun) >= -tolerance
