"""Dense numeric kernels and seeded randomness shared by every other module.

Matrices are 2-D numpy arrays (row-major), vectors are 1-D arrays; 64-bit
floats are the default precision, 32-bit is selectable for training runs.
Every operation checks its operand shapes and fails hard on a mismatch so
wiring errors between cells surface at the call site, not three matmuls
later.  All functions are pure; randomness only enters through an explicit
Generator, and a fixed seed reproduces the same draw sequence on every
platform (PCG64).
"""

from __future__ import annotations

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(precision):
    """Map a precision name (or dtype) to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; choose from {sorted(DTYPES)}")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt.type


def make_rng(seed, *stream):
    """Seeded generator; extra integer keys derive independent substreams.

    make_rng(seed) and make_rng(seed, k) give unrelated, reproducible
    streams: the same arguments always produce the same draw sequence.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _check_vec(v, name="vector"):
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _check_mat(m, name="matrix"):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matvec(m, v):
    """Standard matrix-vector product with explicit dimension checks."""
    m = _check_mat(m)
    v = _check_vec(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec dimension mismatch: matrix is {m.shape}, vector has length {v.shape[0]}")
    return m @ v


def affine(u, w, b):
    """Batched affine map u @ w.T + b for row-stacked inputs u (B, n_in)."""
    u = _check_mat(u, "input batch")
    w = _check_mat(w, "weight")
    b = _check_vec(b, "bias")
    if u.shape[1] != w.shape[1]:
        raise ValueError(f"affine dimension mismatch: inputs are {u.shape}, weight is {w.shape}")
    if w.shape[0] != b.shape[0]:
        raise ValueError(f"affine bias mismatch: weight is {w.shape}, bias has length {b.shape[0]}")
    return u @ w.T + b


def sigmoid(x):
    """Element-wise logistic function, overflow-safe for any finite input."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def tanh(x):
    return np.tanh(x)


def softmax(x, axis=-1):
    """Softmax with max-subtraction; rows sum to 1 and shifts cancel exactly."""
    x = np.asarray(x)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def hadamard(a, b):
    """Element-wise product of same-shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def add(a, b):
    """Element-wise sum of same-shaped arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def init_normal(rng, rows, cols, std, dtype=np.float64):
    """I.i.d. zero-mean normal matrix with the given standard deviation."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal(0.0, std, size=(rows, cols)).astype(dtype, copy=False)


def one_hot(indices, depth, dtype=np.float64):
    """One-hot encode an integer array along a trailing axis of size depth."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= depth):
        raise ValueError(f"one_hot indices outside [0, {depth})")
    out = np.zeros(indices.shape + (depth,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1, axis=-1)
    return out
