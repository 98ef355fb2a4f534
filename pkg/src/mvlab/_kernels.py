"""Euler-Maruyama / tamed Euler stepping, compiled and plain-numpy versions.

Both kernels advance ``states`` in place by ``n_steps`` steps starting at the
global step index ``step0`` and return ``(status, bad_index, steps_done)``;
status 1 means a particle left the finite region.  The measure summary is
formed from the pre-step cloud (synchronous update).  With ``frozen`` set the
measure argument is ``ref_mean`` / ``ref_samples`` for every step instead.
"""

import numpy as np

from . import _accel
from .rng import normal_at, normals

BLOWUP = 1e6


@_accel.njit(error_model="numpy", nogil=True)
def _advance_numba(
    states, step0, n_steps, dt, poly, coupling, mean_coupling, pert, sigma, kernel, pkeys,
    ref_mean, ref_samples, frozen, tamed, blowup,
):
    n, d = states.shape
    kdeg = kernel.shape[0]
    npoly = poly.shape[1]
    sqdt = np.sqrt(dt)
    mean = np.empty(d)
    mterm = np.empty(d)
    sig_m = np.empty(d)
    drift = np.empty((n, d))
    sig = np.empty((n, d))
    for s in range(n_steps):
        step = step0 + s
        if frozen:
            for k in range(d):
                mean[k] = ref_mean[k]
        else:
            for k in range(d):
                mean[k] = 0.0
            for i in range(n):
                for k in range(d):
                    mean[k] += states[i, k]
            for k in range(d):
                mean[k] /= n
        for k in range(d):
            acc = 0.0
            for j in range(d):
                acc += mean_coupling[k, j] * mean[j]
            mterm[k] = acc
            sig_m[k] = sigma[k, 0] + sigma[k, 2] * np.tanh(mean[k] + sigma[k, 4])
        for i in range(n):
            norm2 = 0.0
            for k in range(d):
                xk = states[i, k]
                acc = 0.0
                for c in range(npoly - 1, -1, -1):
                    acc = acc * xk + poly[k, c]
                if pert[k, 0] != 0.0:
                    acc -= pert[k, 0] * np.sin(pert[k, 1] * xk + pert[k, 2])
                for j in range(d):
                    acc += coupling[k, j] * states[i, j]
                acc += mterm[k]
                if kdeg > 0:
                    if frozen:
                        cloud = ref_samples
                    else:
                        cloud = states
                    m = cloud.shape[0]
                    ksum = 0.0
                    for j in range(m):
                        r = xk - cloud[j, k]
                        kv = 0.0
                        for c in range(kdeg - 1, -1, -1):
                            kv = kv * r + kernel[c]
                        ksum += kv
                    acc -= ksum / m
                drift[i, k] = acc
                norm2 += acc * acc
                if sigma[k, 1] != 0.0:
                    sig[i, k] = sig_m[k] + sigma[k, 1] * np.tanh(xk + sigma[k, 3])
                else:
                    sig[i, k] = sig_m[k]
            if tamed:
                scale = 1.0 / (1.0 + dt * np.sqrt(norm2))
                for k in range(d):
                    drift[i, k] *= scale
        for i in range(n):
            for k in range(d):
                z = normal_at(pkeys[i], step * d + k)
                v = states[i, k] + drift[i, k] * dt + sig[i, k] * sqdt * z
                if not (abs(v) <= blowup):
                    states[i, k] = v
                    return 1, i, s
                states[i, k] = v
    return 0, -1, n_steps


def _kernel_term(kernel, x, cloud):
    out = np.zeros_like(x)
    for s in range(0, x.shape[0], 1024):
        diff = x[s : s + 1024, None, :] - cloud[None, :, :]
        acc = np.zeros_like(diff)
        for c in kernel[::-1]:
            acc = acc * diff + c
        out[s : s + 1024] = acc.mean(axis=1)
    return out


def _advance_numpy(
    states, step0, n_steps, dt, poly, coupling, mean_coupling, pert, sigma, kernel, pkeys,
    ref_mean, ref_samples, frozen, tamed, blowup,
):
    n, d = states.shape
    sqdt = np.sqrt(dt)
    has_pert = np.any(pert[:, 0] != 0.0)
    for s in range(n_steps):
        step = step0 + s
        mean = ref_mean if frozen else states.mean(axis=0)
        drift = np.zeros_like(states)
        for k in range(d):
            xk = states[:, k]
            acc = np.zeros(n)
            for c in poly[k, ::-1]:
                acc = acc * xk + c
            drift[:, k] = acc
        if has_pert:
            drift -= pert[:, 0] * np.sin(pert[:, 1] * states + pert[:, 2])
        drift += states @ coupling.T + mean_coupling @ mean
        if kernel.shape[0] > 0:
            drift -= _kernel_term(kernel, states, ref_samples if frozen else states)
        if tamed:
            drift /= (1.0 + dt * np.sqrt(np.einsum("ij,ij->i", drift, drift)))[:, None]
        sig = sigma[:, 0] + sigma[:, 1] * np.tanh(states + sigma[:, 3]) + sigma[:, 2] * np.tanh(mean + sigma[:, 4])
        z = normals(pkeys, step, d)
        new = states + drift * dt + sig * sqdt * z
        bad = ~(np.abs(new) <= blowup)
        if bad.any():
            i = int(np.nonzero(bad.any(axis=1))[0][0])
            states[:] = new
            return 1, i, s
        states[:] = new
    return 0, -1, n_steps


def advance(states, step0, n_steps, dt, model, pkeys, ref_mean=None, ref_samples=None, frozen=False, tamed=False, blowup=BLOWUP):
    """Dispatch to the active backend.  ``states`` is modified in place."""
    d = model.dimension
    kernel = model.kernel if np.any(model.kernel != 0) else np.zeros(0)
    rm = np.zeros(d) if ref_mean is None else np.ascontiguousarray(ref_mean, dtype=np.float64)
    rs = np.zeros((1, d)) if ref_samples is None else np.ascontiguousarray(ref_samples, dtype=np.float64)
    args = (
        states, int(step0), int(n_steps), float(dt),
        np.ascontiguousarray(model.poly), np.ascontiguousarray(model.coupling),
        np.ascontiguousarray(model.mean_coupling), np.ascontiguousarray(model.perturbation),
        np.ascontiguousarray(model.sigma), np.ascontiguousarray(kernel), pkeys,
        rm, rs, bool(frozen), bool(tamed), float(blowup),
    )
    if _accel.backend() == "numba":
        status, idx, done = _advance_numba(*args)
    else:
        status, idx, done = _advance_numpy(*args)
    return int(status), int(idx), int(done)
