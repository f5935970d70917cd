"""Penalized Tucker regression with a sparsity penalty on the core tensor."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .coeff_model import all_orthogonal
from .coeff_model import bic as bic_value
from .estimator import (FitResult, _check_ranks, _update_block, _z_offset, design_for_core, fit_tucker,
                        design_for_factor, linear_predictor, null_gamma, random_init,
                        tensor_predictor)
from .glm import PROB_CLAMP, SingularFitError, deviance, family_eval, irls_fit, loglik, \
    working_loglik
from .rng import stream
from .tensor_core import vec

FAMILIES = ("power", "lasso", "ridge", "elastic_net", "scad", "mcp")
DEFAULT_ETA = {"power": 1.0, "lasso": 1.0, "ridge": 2.0, "elastic_net": 1.5,
               "scad": 3.7, "mcp": 2.0}


@dataclass(frozen=True)
class PenaltySpec:
    family: str = "lasso"
    lam: float = 0.0
    eta: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown penalty {self.family!r}; expected one of {FAMILIES}")
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if self.eta is None:
            object.__setattr__(self, "eta", DEFAULT_ETA[self.family])
        e = self.eta
        ok = {"power": 0 < e <= 2, "lasso": True, "ridge": True, "elastic_net": 1 <= e <= 2,
              "scad": e > 2, "mcp": e > 0}[self.family]
        if not ok:
            raise ValueError(f"eta={e} out of range for the {self.family} penalty")

    def with_lambda(self, lam):
        return PenaltySpec(self.family, lam, self.eta)


def penalty_value(p, x):
    """``P_eta(|x|, lambda)``, elementwise for arrays."""
    t = np.abs(np.asarray(x, dtype=float))
    lam, e = p.lam, p.eta
    if p.family == "lasso":
        out = lam * t
    elif p.family == "ridge":
        out = lam * t**2
    elif p.family == "power":
        out = lam * t**e
    elif p.family == "elastic_net":
        out = lam * ((e - 1) * t**2 / 2 + (2 - e) * t)
    elif p.family == "scad":
        mid = (2 * e * lam * t - t**2 - lam**2) / (2 * (e - 1))
        out = np.where(t <= lam, lam * t, np.where(t <= e * lam, mid, lam**2 * (e + 1) / 2))
    else:
        out = np.where(t < e * lam, lam * t - t**2 / (2 * e), 0.5 * lam**2 * e)
    return out if out.ndim else float(out)


def _scalar_objective(p, z, a, g):
    return 0.5 * a * (g - z) ** 2 + penalty_value(p, g)


def _power_magnitude(p, az, a):
    lam, e = p.lam, p.eta

    def h(t):
        return a * (t - az) + lam * e * t ** (e - 1)

    if e > 1:
        return brentq(h, 0.0, az, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    # 0 < eta < 1: h is convex on (0, inf); the local minimizer is its larger root
    t_min = (lam * e * (1 - e) / a) ** (1 / (2 - e))
    if t_min >= az or h(t_min) >= 0:
        return 0.0
    t = brentq(h, t_min, az, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    f0 = 0.5 * a * az**2
    ft = 0.5 * a * (t - az) ** 2 + lam * t**e
    return t if ft < f0 else 0.0


def threshold(p, z, a=1.0):
    """``argmin_g a/2 (g - z)^2 + P_eta(|g|, lambda)`` for a scalar ``z``."""
    if not a > 0:
        raise ValueError("curvature must be positive")
    z = float(z)
    lam, e = p.lam, p.eta
    az = abs(z)
    s = np.sign(z)
    if lam == 0 or az == 0:
        return z
    fam = p.family
    if fam == "power" and e == 1:
        fam = "lasso"
    if fam == "power" and e == 2:
        fam = "ridge"
    if fam == "lasso":
        return s * max(az - lam / a, 0.0)
    if fam == "ridge":
        return a * z / (a + 2 * lam)
    if fam == "elastic_net":
        return s * max(a * az - lam * (2 - e), 0.0) / (a + lam * (e - 1))
    if fam == "power":
        return s * _power_magnitude(p, az, a)
    if fam == "scad":
        cands = [0.0, min(max(az - lam / a, 0.0), lam), lam, e * lam, max(az, e * lam)]
        denom = a * (e - 1) - 1
        if denom > 0:
            t = (a * az * (e - 1) - e * lam) / denom
            cands.append(min(max(t, lam), e * lam))
    else:
        cands = [0.0, e * lam, max(az, e * lam)]
        if a > 1 / e:
            t = (a * az - lam) / (a - 1 / e)
            cands.append(min(max(t, 0.0), e * lam))
    vals = [_scalar_objective(p, az, a, t) for t in cands]
    return s * cands[int(np.argmin(vals))]


def penalized_objective(ds, coeff, family, p):
    """Working log-likelihood minus the core penalty."""
    eta = linear_predictor(ds, coeff)
    return working_loglik(family, ds.y, eta) - float(np.sum(penalty_value(p, coeff.core)))


def _coordinate_descent(design, y, family, offset, g, p, tol=1e-8, max_sweeps=500,
                        max_newton=25):
    """Maximize ``l(g) - sum P(|g_j|)`` for ``eta = design @ g + offset``.

    Outer Fisher-scoring quadratic approximations, each minimized by cyclic
    coordinate descent with :func:`threshold`, then a step-halving guard on
    the penalized objective.
    """
    phi = family.phi()

    def objective(coef):
        eta = design @ coef + offset
        return working_loglik(family, y, eta) - float(np.sum(penalty_value(p, coef)))

    obj = objective(g)
    if not np.isfinite(obj):
        g = np.zeros_like(g)
        obj = objective(g)
    for _ in range(max_newton):
        eta = design @ g + offset
        mu, mu_prime, var = family_eval(family, eta)
        if family.kind == "normal":
            w = np.full_like(eta, 1.0 / phi)
            zwork = y - offset
        else:
            if family.kind == "bernoulli":
                mu_c = np.clip(mu, PROB_CLAMP, 1 - PROB_CLAMP)
                mu_prime = mu_c * (1 - mu_c)
            mu_prime = np.maximum(mu_prime, PROB_CLAMP)
            w = mu_prime
            zwork = eta - offset + (y - mu) / mu_prime
        # cyclic coordinate descent on the quadratic model in Gram form
        q = (design * w[:, None]).T @ design
        r = design.T @ (w * zwork) - q @ g
        curv = np.diag(q).copy()
        new = g.copy()
        for _ in range(max_sweeps):
            biggest = 0.0
            for j in range(new.size):
                a = curv[j]
                old = new[j]
                if a <= 1e-300:
                    nj = 0.0
                else:
                    nj = threshold(p, old + r[j] / a, a)
                if nj != old:
                    r -= q[:, j] * (nj - old)
                    new[j] = nj
                    biggest = max(biggest, abs(nj - old))
            if biggest < tol:
                break
        step = new - g
        accepted = False
        for _ in range(40):
            cand = g + step
            cobj = objective(cand)
            if cobj >= obj:
                accepted = True
                break
            step = step / 2
        if not accepted:
            break
        gain = cobj - obj
        g, obj = cand, cobj
        if family.kind == "normal" or gain <= 1e-12 * (abs(obj) + 1):
            break
    return g, obj


def _normalize_columns(coeff, d):
    """Unit-norm columns for ``B_d`` with the scale absorbed into the core."""
    b = coeff.factors[d]
    norms = np.linalg.norm(b, axis=0)
    scale = np.where(norms > 0, norms, 1.0)
    coeff.factors[d] = b / scale
    shape = [1] * coeff.ndim
    shape[d] = -1
    coeff.core = coeff.core * scale.reshape(shape)
    return coeff


def _regularized_cycles(ds, coeff, opts, p):
    family = opts.family
    y = ds.y
    for d in range(coeff.ndim):
        _normalize_columns(coeff, d)
    obj = penalized_objective(ds, coeff, family, p)
    trace = [obj]
    blocks = [("init", obj)]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        obj_prev = obj
        off = _z_offset(ds, coeff.gamma)
        for d in range(coeff.ndim):
            before = coeff.copy()
            design = design_for_factor(ds, d, coeff)
            try:
                fit = irls_fit(design, y, family, offset=off, start=vec(coeff.factors[d]),
                               max_iter=opts.irls_max_iter, tol=opts.irls_tol,
                               on_singular="lstsq")
            except SingularFitError as exc:
                raise SingularFitError(f"block B_{d + 1}: {exc}") from exc
            target = fit.coef.reshape(coeff.factors[d].shape, order="F")
            # eta is linear in B_d and unchanged by the rescaling, so candidates are cheap
            eta0 = design @ vec(before.factors[d]) + off
            eta1 = design @ fit.coef + off
            # the rescaling changes the penalty, so backtrack toward the old factor if needed
            step = 1.0
            for _ in range(30):
                cand = before.copy()
                cand.factors[d] = before.factors[d] + step * (target - before.factors[d])
                _normalize_columns(cand, d)
                cobj = (working_loglik(family, y, eta0 + step * (eta1 - eta0))
                        - float(np.sum(penalty_value(p, cand.core))))
                if cobj >= obj:
                    coeff, obj = cand, cobj
                    break
                step /= 2
            else:
                coeff = before
            blocks.append((f"B_{d + 1}", obj))
        g, obj = _coordinate_descent(design_for_core(ds, coeff), y, family, off,
                                     vec(coeff.core), p)
        coeff.core = g.reshape(coeff.core.shape, order="F")
        blocks.append(("G", obj))
        if ds.z is not None:
            fit = _update_block(ds.z, y, family, tensor_predictor(ds, coeff), coeff.gamma,
                                opts, "gamma")
            coeff.gamma = fit.coef
            obj = penalized_objective(ds, coeff, family, p)
            blocks.append(("gamma", obj))
        trace.append(obj)
        if obj - obj_prev < opts.tol * max(1.0, abs(obj_prev)):
            converged = True
            break
    return coeff, trace, blocks, converged, it


def penalized_df(coeff, p0=0):
    """Nonzero core entries plus factor parameters net of the ``O_d`` indeterminacy."""
    nnz = int(np.count_nonzero(coeff.core))
    fac = sum(b.shape[0] * b.shape[1] - b.shape[1] ** 2 for b in coeff.factors)
    return nnz + fac + p0


def fit_tucker_regularized(ds, opts, p, init=None):
    """Block relaxation where the core update maximizes ``l - sum P(|g|)``.

    Factor columns are kept at unit Euclidean norm, the scale living in the
    core.  ``loglik_trace`` holds the penalized objective (normal dispersion
    fixed at ``family.phi()``); ``loglik`` is the reported log-likelihood.
    """
    _check_ranks(ds.dims, opts.ranks)
    family = opts.family
    gamma0 = null_gamma(ds, family, opts.irls_max_iter, opts.irls_tol)

    def run_one(s):
        if init is not None:
            c0 = init.copy()
            if c0.gamma.size != ds.p0:
                c0.gamma = gamma0.copy()
        else:
            c0 = random_init(ds, opts.ranks, stream(opts.seed, "init", s), gamma0.copy())
        c, trace, blocks, conv, it = _regularized_cycles(ds, c0, opts, p)
        return trace[-1], c, trace, blocks, conv, it

    runs = [run_one(s) for s in range(1 if init is not None else opts.n_starts)]
    best = 0
    for s, r in enumerate(runs):
        if r[0] > runs[best][0] + 1e-10:
            best = s
    obj, coeff, trace, blocks, conv, it = runs[best]
    eta = linear_predictor(ds, coeff)
    ll = loglik(family, ds.y, eta)
    df = penalized_df(coeff)
    return FitResult(
        coeff=coeff, loglik=ll, loglik_trace=trace, block_trace=blocks,
        deviance=deviance(family, ds.y, eta), bic=bic_value(ll, ds.n, df + ds.p0), df=df,
        converged=conv, best_start=best, n_iter=it, seed=opts.seed, model="tucker_regularized",
        start_logliks=[r[0] for r in runs])


def cv_folds(n, k, seed):
    perm = stream(seed, "folds").permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k
    return folds


def regularization_path(ds, opts, penalty, grid):
    """Penalized fits for every lambda in ``grid`` (returned in grid order).

    The path starts from an unpenalized fit rotated to all-orthogonal form,
    where a sparse core is visible, and visits lambdas in increasing order,
    each fit warm-started at the previous solution.
    """
    base = fit_tucker(ds, opts).coeff
    start = all_orthogonal(base)
    order = np.argsort(grid, kind="stable")
    fits = [None] * len(grid)
    for j in order:
        fit = fit_tucker_regularized(ds, opts, penalty.with_lambda(grid[j]), init=start)
        fits[j] = fit
        start = fit.coeff
    return fits


def tune_lambda(ds, opts, penalty, grid, method="cv5", n_folds=5):
    """Choose lambda from ``grid`` by k-fold held-out deviance or by BIC.

    Returns ``(best_lambda, table)`` where every table row holds the lambda
    and its score.  Ties go to the larger lambda.  Fold fits run on up to
    ``opts.threads`` threads and are merged by fold index.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    family = opts.family
    table = []
    if method == "bic":
        for lam, fit in zip(grid, regularization_path(ds, opts, penalty, grid)):
            table.append({"lambda": lam, "score": fit.bic, "df": fit.df + ds.p0,
                          "nnz": int(np.count_nonzero(fit.coeff.core))})
    elif method in ("cv5", "cv"):
        folds = cv_folds(ds.n, n_folds, opts.seed)

        def fold_scores(k):
            train = ds.subset(folds != k)
            test = ds.subset(folds == k)
            fits = regularization_path(train, opts, penalty, grid)
            return [deviance(family, test.y, linear_predictor(test, f.coeff)) for f in fits]

        if opts.threads > 1:
            with ThreadPoolExecutor(max_workers=opts.threads) as pool:
                scores = np.array(list(pool.map(fold_scores, range(n_folds))))
        else:
            scores = np.array([fold_scores(k) for k in range(n_folds)])
        for j, lam in enumerate(grid):
            table.append({"lambda": lam, "score": float(scores[:, j].mean()),
                          "sd": float(scores[:, j].std(ddof=1)) if n_folds > 1 else 0.0})
    else:
        raise ValueError(f"unknown tuning method {method!r}")
    best = min(table, key=lambda row: (row["score"], -row["lambda"]))
    return best["lambda"], table
