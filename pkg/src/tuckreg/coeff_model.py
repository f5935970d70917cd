"""Tucker and CP coefficient arrays, model-size counts and BIC."""

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import check_dims, matricize, mode_multiply, multi_mode_multiply, outer


@dataclass
class TuckerCoeff:
    """Coefficients ``(G; B_1, ..., B_D)`` plus the vector coefficient ``gamma``.

    ``core`` has shape ``(R_1, ..., R_D)`` and ``factors[d]`` has shape
    ``(p_d, R_d)``.
    """

    core: np.ndarray
    factors: list
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=float)
        self.factors = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.factors]
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        if self.core.ndim != len(self.factors):
            raise ValueError(
                f"core has {self.core.ndim} modes but {len(self.factors)} factors were given")
        for d, b in enumerate(self.factors):
            if b.shape[1] != self.core.shape[d]:
                raise ValueError(
                    f"factor {d} has {b.shape[1]} columns, core mode {d} has size {self.core.shape[d]}")

    @property
    def dims(self):
        return tuple(b.shape[0] for b in self.factors)

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def ndim(self):
        return len(self.factors)

    def copy(self):
        return TuckerCoeff(self.core.copy(), [b.copy() for b in self.factors], self.gamma.copy())


@dataclass
class CpCoeff:
    """Rank-``R`` CP coefficients; every factor has ``R`` columns."""

    factors: list
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.factors = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.factors]
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        ranks = {b.shape[1] for b in self.factors}
        if len(ranks) != 1:
            raise ValueError(f"CP factors must share a column count, got {sorted(ranks)}")

    @property
    def rank(self):
        return self.factors[0].shape[1]


@dataclass(frozen=True)
class ModelSize:
    df: int
    raw_params: int


def tucker_reconstruct(c):
    """Full coefficient tensor ``G x_1 B_1 x_2 ... x_D B_D``."""
    return multi_mode_multiply(c.core, c.factors)


def cp_reconstruct(c):
    out = np.zeros(tuple(b.shape[0] for b in c.factors))
    for r in range(c.rank):
        out += outer(*[b[:, r] for b in c.factors])
    return out


def all_orthogonal(c):
    """Equivalent coefficients with orthonormal factors and an all-orthogonal core.

    Factors are reduced by a thin QR factorization and the core is then
    rotated by the left singular vectors of each of its unfoldings (a
    higher-order SVD of the small core).  The reconstruction is unchanged.
    """
    out = c.copy()
    core = out.core
    for d, b in enumerate(out.factors):
        q, r = np.linalg.qr(b)
        out.factors[d] = q
        core = mode_multiply(core, d, r)
    for d in range(core.ndim):
        u = np.linalg.svd(matricize(core, d), full_matrices=True)[0]
        out.factors[d] = out.factors[d] @ u
        core = mode_multiply(core, d, u.T)
    out.core = core
    return out


def superdiagonal_core(rank, ndim):
    core = np.zeros((rank,) * ndim)
    idx = np.arange(rank)
    core[(idx,) * ndim] = 1.0
    return core


def cp_to_tucker(c):
    return TuckerCoeff(superdiagonal_core(c.rank, len(c.factors)),
                       [b.copy() for b in c.factors], c.gamma.copy())


def tucker_df(p, ranks):
    """Free parameters of a Tucker model after removing the ``O_d`` indeterminacy."""
    p = check_dims(p)
    ranks = tuple(int(r) for r in ranks)
    if len(p) != len(ranks):
        raise ValueError("dims and ranks must have the same length")
    for pd, rd in zip(p, ranks):
        if not 1 <= rd <= pd:
            raise ValueError(f"rank {rd} must lie in [1, {pd}]")
    raw = sum(pd * rd for pd, rd in zip(p, ranks)) + math.prod(ranks)
    return ModelSize(df=raw - sum(r * r for r in ranks), raw_params=raw)


def cp_df(p, rank):
    p = check_dims(p)
    rank = int(rank)
    if rank < 1:
        raise ValueError("CP rank must be at least 1")
    raw = rank * sum(p)
    if len(p) == 2:
        df = rank * (p[0] + p[1]) - rank * rank
    else:
        df = rank * (sum(p) - len(p) + 1)
    return ModelSize(df=df, raw_params=raw)


def df_gap(rank, ndim):
    """Tucker minus CP free parameters when every mode has rank ``rank``."""
    R, D = int(rank), int(ndim)
    if R < 1 or D < 2:
        raise ValueError("need rank >= 1 and ndim >= 2")
    if D == 2:
        return 0
    if D == 3:
        return R * (R - 1) * (R - 2)
    if D == 4:
        return R * (R**3 - 4 * R + 3)
    return R * (R ** (D - 1) - D * R + D - 1)


def bic(loglik, n, df):
    if n < 1:
        raise ValueError("sample size must be positive")
    return -2.0 * loglik + math.log(n) * df
