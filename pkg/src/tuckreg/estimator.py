"""Block-relaxation maximum likelihood for Tucker (and CP) tensor GLMs."""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coeff_model import (TuckerCoeff, bic, cp_df, superdiagonal_core, tucker_df,
                          tucker_reconstruct)
from .glm import GlmFamily, SingularFitError, deviance, irls_fit, loglik
from .rng import stream
from .tensor_core import batch_mode_multiply, matricize, mode_multiply, vec


class HeuristicWarning(UserWarning):
    """Sample size is small relative to the parameters of a block update."""


@dataclass
class Dataset:
    """``y`` has length ``n``; ``x`` stacks the tensor covariates as ``(n, p_1, ..., p_D)``."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.x = np.asarray(self.x, dtype=float)
        n = self.y.size
        if self.x.ndim < 2 or self.x.shape[0] != n:
            raise ValueError(f"x must have shape (n, p_1, ..., p_D) with n={n}, got {self.x.shape}")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)
            if self.z.ndim == 1:
                self.z = self.z[:, None]
            if self.z.shape[0] != n:
                raise ValueError(f"z has {self.z.shape[0]} rows, expected {n}")
            if self.z.shape[1] == 0:
                self.z = None

    @property
    def n(self):
        return self.y.size

    @property
    def dims(self):
        return tuple(self.x.shape[1:])

    @property
    def p0(self):
        return 0 if self.z is None else self.z.shape[1]

    def subset(self, idx):
        return Dataset(self.y[idx], self.x[idx], None if self.z is None else self.z[idx])


@dataclass
class FitOptions:
    ranks: tuple
    family: GlmFamily = field(default_factory=GlmFamily)
    tol: float = 1e-6
    max_iter: int = 200
    n_starts: int = 5
    seed: int = 0
    threads: int = 1
    irls_max_iter: int = 25
    irls_tol: float = 1e-10

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")


@dataclass
class FitResult:
    coeff: TuckerCoeff
    loglik: float
    loglik_trace: list
    block_trace: list
    deviance: float
    bic: float
    df: int
    converged: bool
    best_start: int
    n_iter: int
    seed: int
    model: str = "tucker"
    start_logliks: list = field(default_factory=list)


def _check_ranks(dims, ranks):
    if len(ranks) != len(dims):
        raise ValueError(f"{len(ranks)} ranks given for a {len(dims)}-way covariate")
    for p, r in zip(dims, ranks):
        if not 1 <= r <= p:
            raise ValueError(f"rank {r} must lie in [1, {p}]")


def _partial_projection(x, factors, skip):
    # largest size reduction first keeps the intermediate stacks small
    order = sorted((d for d in range(len(factors)) if d != skip),
                   key=lambda d: (factors[d].shape[1] / factors[d].shape[0], -d))
    out = x
    for d in order:
        out = batch_mode_multiply(out, d, factors[d].T)
    return out


def design_for_factor(ds, d, coeff):
    """Predictor matrix for the ``B_d`` block, shape ``(n, p_d R_d)``.

    Row ``i`` is ``vec(X_i(d) (kron of the other factors) G_(d)^T)`` so that
    ``<B, X_i> == row @ vec(B_d)``.
    """
    x = ds.x if isinstance(ds, Dataset) else np.asarray(ds)
    n = x.shape[0]
    w = _partial_projection(x, coeff.factors, skip=d)
    pd, rd = coeff.factors[d].shape
    wd = np.moveaxis(w, d + 1, 1).reshape(n, pd, -1, order="F")
    m = wd @ matricize(coeff.core, d).T
    return m.transpose(0, 2, 1).reshape(n, pd * rd)


def design_for_core(ds, coeff):
    """Predictor matrix for ``vec G``: rows ``vec [[X_i; B_1^T, ..., B_D^T]]``."""
    x = ds.x if isinstance(ds, Dataset) else np.asarray(ds)
    w = _partial_projection(x, coeff.factors, skip=None)
    return w.reshape(x.shape[0], -1, order="F")


def tensor_predictor(ds, coeff):
    """``<B, X_i>`` for every observation via the full reconstruction."""
    x = ds.x if isinstance(ds, Dataset) else np.asarray(ds)
    # the inner product is layout-free, so pair C-order views to avoid copying x
    return np.ascontiguousarray(x).reshape(x.shape[0], -1) @ tucker_reconstruct(coeff).ravel()


def linear_predictor(ds, coeff):
    eta = tensor_predictor(ds, coeff)
    if ds.z is not None and coeff.gamma.size:
        eta = eta + ds.z @ coeff.gamma
    return eta


def _z_offset(ds, gamma):
    if ds.z is None or gamma.size == 0:
        return np.zeros(ds.n)
    return ds.z @ gamma


def null_gamma(ds, family, irls_max_iter=25, irls_tol=1e-10):
    """``argmax_gamma l(gamma, 0, ..., 0)``; empty when there are no regular covariates."""
    if ds.z is None:
        return np.zeros(0)
    try:
        return irls_fit(ds.z, ds.y, family, max_iter=irls_max_iter, tol=irls_tol).coef
    except SingularFitError as exc:
        raise SingularFitError(f"block gamma: {exc}") from exc


def random_init(ds, ranks, rng, gamma, fixed_core=None):
    """iid standard normal factors and core; the core is rescaled so the
    initial tensor part of the linear predictor has unit standard deviation."""
    factors = [rng.standard_normal((p, r)) for p, r in zip(ds.dims, ranks)]
    if fixed_core is not None:
        core = fixed_core.copy()
    else:
        core = rng.standard_normal(ranks)
    coeff = TuckerCoeff(core, factors, gamma)
    if fixed_core is None:
        sd = float(np.std(tensor_predictor(ds, coeff)))
        if sd > 0:
            coeff.core /= sd
    return coeff


def _update_block(design, y, family, offset, start, opts, name):
    try:
        return irls_fit(design, y, family, offset=offset, start=start,
                        max_iter=opts.irls_max_iter, tol=opts.irls_tol)
    except SingularFitError as exc:
        raise SingularFitError(f"block {name}: {exc}") from exc


def _block_relaxation(ds, coeff, opts, update_core=True):
    family = opts.family
    y = ds.y
    ll = loglik(family, y, linear_predictor(ds, coeff))
    trace = [ll]
    blocks = [("init", ll)]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        ll_prev = ll
        off = _z_offset(ds, coeff.gamma)
        for d in range(coeff.ndim):
            fit = _update_block(design_for_factor(ds, d, coeff), y, family, off,
                                vec(coeff.factors[d]), opts, f"B_{d + 1}")
            coeff.factors[d] = fit.coef.reshape(coeff.factors[d].shape, order="F")
            blocks.append((f"B_{d + 1}", fit.loglik))
        if update_core:
            fit = _update_block(design_for_core(ds, coeff), y, family, off,
                                vec(coeff.core), opts, "G")
            coeff.core = fit.coef.reshape(coeff.core.shape, order="F")
            blocks.append(("G", fit.loglik))
        if ds.z is not None:
            fit = _update_block(ds.z, y, family, tensor_predictor(ds, coeff),
                                coeff.gamma, opts, "gamma")
            coeff.gamma = fit.coef
            blocks.append(("gamma", fit.loglik))
        ll = loglik(family, y, linear_predictor(ds, coeff))
        trace.append(ll)
        if ll - ll_prev < opts.tol * max(1.0, abs(ll_prev)):
            converged = True
            break
    return coeff, trace, blocks, converged, it


def _pick_best(runs):
    best = 0
    for s, r in enumerate(runs):
        if r[0] > runs[best][0] + 1e-10:
            best = s
    return best


def _multistart(ds, opts, run_one):
    if opts.threads > 1 and opts.n_starts > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            runs = list(pool.map(run_one, range(opts.n_starts)))
    else:
        runs = [run_one(s) for s in range(opts.n_starts)]
    return runs


def fit_tucker(ds, opts, init=None):
    """Fit a Tucker tensor GLM by block relaxation.

    Each cycle updates ``B_1, ..., B_D``, then ``G``, then ``gamma``, each as a
    GLM fit warm-started at its current value.  The best of ``opts.n_starts``
    random starts (by final log-likelihood) is returned in canonical form.
    Passing ``init`` runs a single start from that point instead.
    """
    ranks = opts.ranks
    _check_ranks(ds.dims, ranks)
    family = opts.family
    gamma0 = null_gamma(ds, family, opts.irls_max_iter, opts.irls_tol)

    def run_one(s):
        if init is not None:
            c0 = init.copy()
            if c0.gamma.size != ds.p0:
                c0.gamma = gamma0.copy()
        else:
            c0 = random_init(ds, ranks, stream(opts.seed, "init", s), gamma0.copy())
        c, trace, blocks, conv, it = _block_relaxation(ds, c0, opts)
        return trace[-1], c, trace, blocks, conv, it

    runs = [run_one(0)] if init is not None else _multistart(ds, opts, run_one)
    best = _pick_best(runs)
    ll, coeff, trace, blocks, conv, it = runs[best]
    try:
        coeff = canonicalize(coeff)
    except np.linalg.LinAlgError:
        warnings.warn("leading factor block singular; returning the raw representation")
    size = tucker_df(ds.dims, ranks)
    eta = linear_predictor(ds, coeff)
    return FitResult(
        coeff=coeff, loglik=ll, loglik_trace=trace, block_trace=blocks,
        deviance=deviance(family, ds.y, eta), bic=bic(ll, ds.n, size.df + ds.p0),
        df=size.df, converged=conv, best_start=best, n_iter=it, seed=opts.seed,
        model="tucker", start_logliks=[r[0] for r in runs])


def _normalize_cp(coeff):
    """Push the scale of every factor but the first into ``B_1`` (first-row convention)."""
    if coeff.ndim == 2:
        return canonicalize(coeff)
    c = coeff.copy()
    for d in range(1, c.ndim):
        lead = c.factors[d][0].copy()
        lead[lead == 0] = 1.0
        c.factors[d] = c.factors[d] / lead
        c.factors[0] = c.factors[0] * lead
    return c


def fit_cp(ds, rank, opts, init=None):
    """CP tensor GLM: block relaxation with the core fixed at the superdiagonal of ones."""
    rank = int(rank)
    D = len(ds.dims)
    _check_ranks(ds.dims, (rank,) * D)
    family = opts.family
    gamma0 = null_gamma(ds, family, opts.irls_max_iter, opts.irls_tol)
    core = superdiagonal_core(rank, D)

    def run_one(s):
        if init is not None:
            c0 = init.copy()
            c0.core = core.copy()
            if c0.gamma.size != ds.p0:
                c0.gamma = gamma0.copy()
        else:
            c0 = random_init(ds, (rank,) * D, stream(opts.seed, "init", s), gamma0.copy(),
                             fixed_core=core)
            scale = float(np.std(tensor_predictor(ds, c0)))
            if scale > 0:
                c0.factors[0] /= scale
        c, trace, blocks, conv, it = _block_relaxation(ds, c0, opts, update_core=False)
        return trace[-1], c, trace, blocks, conv, it

    runs = [run_one(0)] if init is not None else _multistart(ds, opts, run_one)
    best = _pick_best(runs)
    ll, coeff, trace, blocks, conv, it = runs[best]
    try:
        coeff = _normalize_cp(coeff)
    except np.linalg.LinAlgError:
        warnings.warn("leading factor block singular; returning the raw representation")
    size = cp_df(ds.dims, rank)
    eta = linear_predictor(ds, coeff)
    return FitResult(
        coeff=coeff, loglik=ll, loglik_trace=trace, block_trace=blocks,
        deviance=deviance(family, ds.y, eta), bic=bic(ll, ds.n, size.df + ds.p0),
        df=size.df, converged=conv, best_start=best, n_iter=it, seed=opts.seed,
        model="cp", start_logliks=[r[0] for r in runs])


def canonicalize(c, cond_limit=1e12):
    """Equivalent representation whose factors have an identity leading block.

    ``B_d <- B_d L_d^{-1}`` and ``G <- G x_d L_d`` with ``L_d`` the first
    ``R_d`` rows of ``B_d``; the reconstructed tensor is unchanged.
    """
    out = c.copy()
    for d, b in enumerate(out.factors):
        r = b.shape[1]
        lead = b[:r, :]
        if not np.all(np.isfinite(lead)) or np.linalg.cond(lead) > cond_limit:
            raise np.linalg.LinAlgError(f"leading {r}x{r} block of factor {d + 1} is singular")
        out.factors[d] = np.linalg.solve(lead.T, b.T).T
        out.factors[d][:r, :] = np.eye(r)
        out.core = mode_multiply(out.core, d, lead)
    return out


def heuristic_warnings(n, dims, ranks, family):
    """Messages for block updates whose sample-to-parameter ratio is below the rule of thumb."""
    bound = 5.0 if family.kind == "bernoulli" else 2.0
    msgs = []
    for d, (p, r) in enumerate(zip(dims, ranks)):
        if n / (p * r) < bound:
            msgs.append(f"n/(p_{d + 1} R_{d + 1}) = {n / (p * r):.2f} < {bound:g}")
    core = math.prod(ranks)
    if n / core < bound:
        msgs.append(f"n/prod(R) = {n / core:.2f} < {bound:g}")
    return msgs


def select_order(ds, candidates, opts):
    """Fit every candidate rank tuple and return the BIC-best fit with the full table.

    Equal BIC values are broken toward the smaller model.
    """
    if not candidates:
        raise ValueError("need at least one candidate rank tuple")
    table = []
    fits = []
    for ranks in candidates:
        ranks = tuple(int(r) for r in ranks)
        for msg in heuristic_warnings(ds.n, ds.dims, ranks, opts.family):
            warnings.warn(f"ranks {ranks}: {msg}", HeuristicWarning)
        o = FitOptions(ranks=ranks, family=opts.family, tol=opts.tol, max_iter=opts.max_iter,
                       n_starts=opts.n_starts, seed=opts.seed, threads=opts.threads,
                       irls_max_iter=opts.irls_max_iter, irls_tol=opts.irls_tol)
        fit = fit_tucker(ds, o)
        fits.append(fit)
        table.append({"ranks": ranks, "df": fit.df, "deviance": fit.deviance,
                      "loglik": fit.loglik, "bic": fit.bic, "converged": fit.converged})
    best = min(range(len(fits)), key=lambda i: (fits[i].bic, fits[i].df))
    return fits[best], table
