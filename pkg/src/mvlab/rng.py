"""Counter-based Gaussian streams.

Every normal deviate is a pure function of ``(seed_root, particle, counter)``
where ``counter = step * dim + component``.  Two ensembles sharing a seed
therefore consume identical increments particle by particle, and the order in
which particles are updated never matters.

The mixer is the SplitMix64 finalizer; uniforms come from the top 53 bits and
the Gaussian from one Box-Muller branch.
"""

import hashlib

import numpy as np

from ._accel import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 6.283185307179586


@njit(nogil=True)
def mix64(x):
    z = x + GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(nogil=True)
def particle_key(seed_key, i):
    return mix64(seed_key ^ mix64(np.uint64(i)))


@njit(nogil=True)
def normal_at(pkey, counter):
    c2 = np.uint64(counter) * _TWO
    h1 = mix64(pkey ^ mix64(c2))
    h2 = mix64(pkey ^ mix64(c2 + _ONE))
    u1 = (float(h1 >> _S11) + 0.5) * _INV53
    u2 = float(h2 >> _S11) * _INV53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def seed_key(seed: int) -> np.uint64:
    """Scramble a user seed (any int, reduced mod 2**64) into the stream root."""
    arr = np.array([int(seed) % (1 << 64)], dtype=np.uint64)
    return mix64_array(arr)[0]


def mix64_array(x: np.ndarray) -> np.ndarray:
    z = x + GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def particle_keys(skey, n: int, offset: int = 0) -> np.ndarray:
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    return mix64_array(np.uint64(skey) ^ mix64_array(idx))


def normals(pkeys: np.ndarray, step: int, dim: int) -> np.ndarray:
    """Vectorised draws for one time step: shape ``(len(pkeys), dim)``."""
    out = np.empty((pkeys.shape[0], dim))
    for k in range(dim):
        c2 = np.array([(step * dim + k) * 2], dtype=np.uint64)
        h1 = mix64_array(pkeys ^ mix64_array(c2))
        h2 = mix64_array(pkeys ^ mix64_array(c2 + _ONE))
        u1 = ((h1 >> _S11).astype(np.float64) + 0.5) * _INV53
        u2 = (h2 >> _S11).astype(np.float64) * _INV53
        out[:, k] = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return out


def derive_seed(root: int, *labels) -> int:
    """Deterministic child seed for a cell/job label, independent of scheduling."""
    acc = np.array([int(root) % (1 << 64)], dtype=np.uint64)
    for lab in labels:
        if isinstance(lab, str):
            v = int.from_bytes(hashlib.blake2b(lab.encode(), digest_size=8).digest(), "little")
        elif isinstance(lab, float):
            v = int(np.float64(lab).view(np.uint64))
        else:
            v = int(lab) % (1 << 64)
        acc = mix64_array(acc ^ mix64_array(np.array([v], dtype=np.uint64)))
    return int(acc[0] >> np.uint64(1))
