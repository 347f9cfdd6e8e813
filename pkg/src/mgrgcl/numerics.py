"""Small numeric primitives used throughout the package.

All arithmetic is float64.  Sums that feed exact-equality checks (distances)
are accumulated left to right over the feature axis so that the vectorised
and the scalar routes produce bit-identical results.

Randomness comes from numpy's PCG64 bit generator, always passed explicitly.
"""

import numpy as np

from .errors import DimensionMismatch, ZeroVector

EPS_NORM = 1e-12
RNG_ALGORITHM = "PCG64"


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by PCG64 for ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def child_seed(seed, *tags):
    """Deterministically derive a 64-bit seed from ``seed`` and integer tags."""
    ss = np.random.SeedSequence([int(seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def as_vector(v):
    return np.asarray(v, dtype=np.float64).reshape(-1)


def as_matrix(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def _sum_last(x):
    # left-to-right accumulation over the last axis
    acc = np.array(x[..., 0], dtype=np.float64, copy=True)
    for k in range(1, x.shape[-1]):
        acc += x[..., k]
    return acc


def l2_normalize(v):
    v = as_vector(v)
    norm = np.sqrt(_sum_last(v * v)) if v.size else 0.0
    if not norm > EPS_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_rows(x):
    """Row-wise :func:`l2_normalize`; refuses rows whose norm is below ``EPS_NORM``."""
    x = as_matrix(x)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if x.shape[0] and np.any(~(norms > EPS_NORM)):
        bad = int(np.flatnonzero(~(norms > EPS_NORM))[0])
        raise ZeroVector(f"row {bad} has norm {norms[bad]!r}")
    return x / norms[:, None]


def euclidean_distance(a, b):
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    diff = a - b
    return float(np.sqrt(_sum_last(diff * diff)))


def pairwise_distances(x, y):
    """Euclidean distance matrix between the rows of ``x`` and ``y``."""
    x, y = as_matrix(x), as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"column counts differ: {x.shape[1]} vs {y.shape[1]}")
    acc = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        diff = x[:, k, None] - y[None, :, k]
        if k == 0:
            acc = diff * diff
        else:
            acc += diff * diff
    return np.sqrt(acc)


def cosine_distances(x, y):
    """``1 - cos(angle)`` between the rows of ``x`` and ``y``."""
    x, y = as_matrix(x), as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"column counts differ: {x.shape[1]} vs {y.shape[1]}")
    return 1.0 - l2_normalize_rows(x) @ l2_normalize_rows(y).T


def distance_matrix(x, y, metric):
    if metric == "euclidean":
        return pairwise_distances(x, y)
    if metric == "cosine_distance":
        return cosine_distances(x, y)
    raise ValueError(f"unknown metric {metric!r}")


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
