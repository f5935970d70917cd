"""Dense tensor operators with column-major (first index fastest) layout.

Tensors are plain ``numpy.ndarray`` objects of shape ``(p_1, ..., p_D)``.
Every linearization in this package follows the column-major convention:
entry ``(i_1, ..., i_D)`` (0-based) sits at position
``sum_d i_d * prod_{d' < d} p_{d'}`` of ``vec(t)``.  Modes are 0-based.
"""

from functools import reduce

import numpy as np

MAX_CELLS = 2**31


def check_dims(dims):
    dims = tuple(int(p) for p in dims)
    if any(p < 1 for p in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    if int(np.prod(dims, dtype=np.int64)) > MAX_CELLS:
        raise ValueError(f"tensor with dims {dims} exceeds {MAX_CELLS} cells")
    return dims


def _check_mode(ndim, d):
    if not 0 <= d < ndim:
        raise ValueError(f"mode {d} out of range for a {ndim}-way tensor")


def vec(t):
    """Stack the entries of ``t`` into a vector, first index fastest."""
    return np.asarray(t).ravel(order="F")


def unvec(v, dims):
    """Inverse of :func:`vec`."""
    dims = check_dims(dims)
    v = np.asarray(v)
    if v.size != int(np.prod(dims)):
        raise ValueError(f"vector of length {v.size} does not fit dims {dims}")
    return v.reshape(dims, order="F")


def matricize(t, d):
    """Mode-``d`` unfolding, a ``p_d x prod_{d' != d} p_{d'}`` matrix.

    Columns run over the remaining modes in ascending order, the lowest
    remaining mode fastest.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, d)
    return np.moveaxis(t, d, 0).reshape(t.shape[d], -1, order="F")


def fold(m, d, dims):
    """Inverse of :func:`matricize` for a tensor of shape ``dims``."""
    dims = check_dims(dims)
    _check_mode(len(dims), d)
    rest = dims[:d] + dims[d + 1:]
    m = np.asarray(m)
    if m.shape != (dims[d], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(f"matrix of shape {m.shape} cannot fold to {dims} along mode {d}")
    return np.moveaxis(m.reshape((dims[d],) + rest, order="F"), 0, d)


def matricize_pair(t, d, e):
    """Mode-``(d, e)`` unfolding, a ``p_d p_e x prod_{others}`` matrix.

    Rows run over ``(i_d, i_e)`` with ``i_d`` fastest; columns follow the
    :func:`matricize` convention over the remaining modes.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, d)
    _check_mode(t.ndim, e)
    if d == e:
        raise ValueError("matricize_pair needs two distinct modes")
    moved = np.moveaxis(t, (d, e), (0, 1))
    return moved.reshape(t.shape[d] * t.shape[e], -1, order="F")


def _axis_multiply(t, k, u):
    # contract axis k of t with the columns of u using C-contiguous batched GEMMs
    t = np.ascontiguousarray(t)
    shape = t.shape
    a = int(np.prod(shape[:k], dtype=np.int64))
    b = int(np.prod(shape[k + 1:], dtype=np.int64))
    if b == 1:
        out = t.reshape(a, shape[k]) @ u.T
    else:
        out = np.matmul(u, t.reshape(a, shape[k], b))
    return out.reshape(shape[:k] + (u.shape[0],) + shape[k + 1:])


def mode_multiply(t, d, u):
    """Multiply every mode-``d`` fiber of ``t`` by the matrix ``u``.

    The result satisfies ``matricize(result, d) == u @ matricize(t, d)``.
    """
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_mode(t.ndim, d)
    if u.ndim != 2 or u.shape[1] != t.shape[d]:
        raise ValueError(
            f"cannot multiply mode {d} of size {t.shape[d]} by a {u.shape} matrix")
    return _axis_multiply(t, d, u)


def multi_mode_multiply(t, mats, skip=(), transpose=False):
    """Apply ``mats[d]`` (or its transpose) along every mode not in ``skip``.

    ``mats`` has one entry per mode of ``t``; ``None`` entries are skipped.
    """
    out = np.asarray(t)
    for d, u in enumerate(mats):
        if d in skip or u is None:
            continue
        out = mode_multiply(out, d, u.T if transpose else u)
    return out


def batch_mode_multiply(ts, d, u):
    """:func:`mode_multiply` applied to a stack ``ts`` of shape ``(n, p_1, ..., p_D)``."""
    ts = np.asarray(ts, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[1] != ts.shape[d + 1]:
        raise ValueError(
            f"cannot multiply mode {d} of size {ts.shape[d + 1]} by a {u.shape} matrix")
    return _axis_multiply(ts, d + 1, u)


def kron(*mats):
    """Kronecker product ``mats[0] ⊗ mats[1] ⊗ ...``."""
    return reduce(np.kron, [np.atleast_2d(m) for m in mats])


def outer(*vectors):
    """Outer product tensor with entries ``prod_d v_d[i_d]``."""
    if not vectors or any(np.size(v) == 0 for v in vectors):
        raise ValueError("outer needs nonempty vectors")
    return reduce(np.multiply.outer, [np.asarray(v, dtype=float).ravel() for v in vectors])


def inner(a, b):
    """Sum of the elementwise product of two equally shaped tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.dot(vec(a), vec(b)))


def mode_permutation(dims, d):
    """Index vector ``perm`` with ``vec(t)[perm] == vec(matricize(t, d))``.

    This is the permutation that maps ``vec B_(d)`` back to ``vec B``,
    stored as 0-based indices and never as a dense matrix.
    """
    dims = check_dims(dims)
    _check_mode(len(dims), d)
    n = int(np.prod(dims, dtype=np.int64))
    idx = np.arange(n, dtype=np.int64).reshape(dims, order="F")
    return vec(matricize(idx, d))
