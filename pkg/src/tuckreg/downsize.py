"""Wavelet bases and per-mode projection of tensor covariates onto them.

Projecting ``X`` to ``X~ = [[X; B_1^T, ..., B_D^T]]`` turns the inner product
``<[[G; B_1, ..., B_D]], X>`` into ``<G, X~>``, so a model over the small
array ``X~`` is a Tucker model over ``X`` whose factors are fixed to the
basis matrices.
"""

from dataclasses import dataclass

import numpy as np

from .coeff_model import TuckerCoeff
from .estimator import Dataset, design_for_core
from .glm import irls_fit
from .tensor_core import batch_mode_multiply, mode_multiply

KINDS = ("haar_d2", "daubechies_d4", "identity", "custom")
ALIASES = {"haar": "haar_d2", "d2": "haar_d2", "db4": "daubechies_d4", "d4": "daubechies_d4"}

_SQ3 = np.sqrt(3.0)
FILTERS = {
    "haar_d2": np.array([1.0, 1.0]) / np.sqrt(2.0),
    "daubechies_d4": np.array([1 + _SQ3, 3 + _SQ3, 3 - _SQ3, 1 - _SQ3]) / (4 * np.sqrt(2.0)),
}


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    p: int
    p_tilde: int
    custom_matrix: np.ndarray | None = None

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.p_tilde <= self.p:
            raise ValueError(f"need 1 <= p_tilde <= p, got p={self.p}, p_tilde={self.p_tilde}")
        if kind == "custom":
            if self.custom_matrix is None:
                raise ValueError("custom basis needs custom_matrix")
            shape = np.shape(self.custom_matrix)
            if shape != (self.p, self.p_tilde):
                raise ValueError(f"custom matrix has shape {shape}, expected ({self.p}, {self.p_tilde})")
        if kind == "identity" and self.p_tilde != self.p:
            raise ValueError("identity basis needs p_tilde == p")


def _analysis_level(m, h):
    """Orthogonal ``m x m`` one-level periodized transform, lowpass rows first."""
    g = np.array([(-1) ** j * h[len(h) - 1 - j] for j in range(len(h))])
    t = np.zeros((m, m))
    half = m // 2
    for k in range(half):
        for j in range(len(h)):
            col = (2 * k + j) % m
            t[k, col] += h[j]
            t[half + k, col] += g[j]
    return t


def wavelet_matrix(n, kind):
    """Orthogonal ``n x n`` matrix whose columns are the periodized wavelet basis
    on a dyadic grid of length ``n``, ordered coarsest scale first."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"wavelet length must be a power of two, got {n}")
    h = FILTERS[kind]
    a = np.eye(n)
    m = n
    while m > 1:
        step = np.eye(n)
        step[:m, :m] = _analysis_level(m, h)
        a = step @ a
        m //= 2
    # rows of the analysis operator read [a_J, d_J, d_{J-1}, ..., d_1]
    return a.T


def _greedy_orthonormalize(b, tol=1e-10):
    """Gram-Schmidt (two passes) in column order, skipping dependent columns."""
    kept = []
    for j in range(b.shape[1]):
        v = b[:, j].copy()
        nrm0 = np.linalg.norm(v)
        if nrm0 == 0:
            continue
        for _ in range(2):
            for q in kept:
                v -= (q @ v) * q
        nrm = np.linalg.norm(v)
        if nrm > tol * nrm0:
            kept.append(v / nrm)
    return np.column_stack(kept) if kept else np.zeros((b.shape[0], 0))


def build_basis(s):
    """``p x p_tilde`` matrix with orthonormal columns described by ``s``.

    Wavelet kinds live on the zero-padded grid of length ``2^ceil(log2 p)``;
    rows beyond ``p`` are dropped, the columns re-orthonormalized in
    coarse-to-fine order and the first ``p_tilde`` kept.
    """
    if s.kind == "identity":
        return np.eye(s.p)
    if s.kind == "custom":
        return np.asarray(s.custom_matrix, dtype=float).copy()
    n = 1 << max(0, int(np.ceil(np.log2(s.p))))
    full = wavelet_matrix(n, s.kind)[:s.p]
    q = _greedy_orthonormalize(full)
    if s.p_tilde > q.shape[1]:
        raise ValueError(f"only {q.shape[1]} basis vectors available for p={s.p}, "
                         f"requested {s.p_tilde}")
    return q[:, :s.p_tilde]


def _matrices(bases, dims):
    mats = [build_basis(b) if isinstance(b, BasisSpec) else np.asarray(b, dtype=float)
            for b in bases]
    if len(mats) != len(dims):
        raise ValueError(f"{len(mats)} bases given for a {len(dims)}-way tensor")
    for d, (m, p) in enumerate(zip(mats, dims)):
        if m.ndim != 2 or m.shape[0] != p:
            raise ValueError(f"basis for mode {d} has shape {m.shape}, mode size is {p}")
    return mats


def downsize_tensor(x, bases):
    """``[[x; B_1^T, ..., B_D^T]]`` with dims ``(p~_1, ..., p~_D)``."""
    x = np.asarray(x, dtype=float)
    out = x
    for d, m in enumerate(_matrices(bases, x.shape)):
        out = mode_multiply(out, d, m.T)
    return out


def downsize_dataset(ds, bases):
    """Project every covariate tensor of ``ds``; ``y`` and ``z`` are unchanged."""
    mats = _matrices(bases, ds.dims)
    x = ds.x
    for d, m in enumerate(mats):
        x = batch_mode_multiply(x, d, m.T)
    return Dataset(ds.y.copy(), x, None if ds.z is None else ds.z.copy())


def lift_coeff(coeff, bases):
    """Map coefficients fitted on downsized data back to the original grid."""
    mats = [build_basis(b) if isinstance(b, BasisSpec) else np.asarray(b, dtype=float)
            for b in bases]
    if len(mats) != coeff.ndim:
        raise ValueError(f"{len(mats)} bases given for a {coeff.ndim}-way coefficient")
    for d, (m, b) in enumerate(zip(mats, coeff.factors)):
        if m.ndim != 2 or m.shape[1] != b.shape[0]:
            raise ValueError(f"basis for mode {d} has shape {m.shape}, reduced mode size is "
                             f"{b.shape[0]}")
    return TuckerCoeff(coeff.core.copy(), [m @ b for m, b in zip(mats, coeff.factors)],
                       coeff.gamma.copy())


def fit_fixed_factors(ds, factors, family, max_iter=50, tol=1e-10):
    """GLM fit of the core (and ``gamma``) with the factor matrices held fixed.

    With identity factors this is the unstructured GLM over ``vec X``.
    """
    factors = [np.asarray(b, dtype=float) for b in factors]
    ranks = tuple(b.shape[1] for b in factors)
    coeff = TuckerCoeff(np.zeros(ranks), factors, np.zeros(ds.p0))
    design = design_for_core(ds, coeff)
    if ds.z is not None:
        design = np.hstack([design, ds.z])
    fit = irls_fit(design, ds.y, family, max_iter=max_iter, tol=tol)
    g = fit.coef[:int(np.prod(ranks))]
    coeff.core = g.reshape(ranks, order="F")
    coeff.gamma = fit.coef[g.size:]
    return coeff, fit


def identity_factors(dims):
    return [np.eye(p) for p in dims]
