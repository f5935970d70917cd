"""Score, Hessian, Fisher information and identifiability for Tucker GLMs.

Parameters are ordered ``(vec G, vec B_1, ..., vec B_D)``, each block
column-major.  The restricted parameterization fixes the first ``R_d`` rows
of every ``B_d`` (an identity block after :func:`canonicalize`) and removes
those entries from every vector and matrix.
"""

from dataclasses import dataclass

import numpy as np

from .estimator import (design_for_core, design_for_factor, linear_predictor,
                        tensor_predictor)
from .glm import family_eval
from .tensor_core import batch_mode_multiply, matricize_pair, mode_multiply


class SingularInformationError(np.linalg.LinAlgError):
    pass


@dataclass
class ScoreInfo:
    score: np.ndarray
    info: np.ndarray
    restricted: bool
    index: np.ndarray  # positions of the kept parameters in the unrestricted ordering


def block_sizes(coeff):
    return [coeff.core.size] + [b.size for b in coeff.factors]


def free_mask(coeff):
    """Boolean mask over the unrestricted parameter vector, False for fixed entries."""
    parts = [np.ones(coeff.core.size, dtype=bool)]
    for b in coeff.factors:
        p, r = b.shape
        m = np.ones((p, r), dtype=bool)
        m[:r, :] = False
        parts.append(m.ravel(order="F"))
    return np.concatenate(parts)


def pack(coeff):
    return np.concatenate([coeff.core.ravel(order="F")] +
                          [b.ravel(order="F") for b in coeff.factors])


def unpack(theta, like):
    out = like.copy()
    sizes = block_sizes(like)
    pos = np.cumsum([0] + sizes)
    out.core = theta[pos[0]:pos[1]].reshape(like.core.shape, order="F").copy()
    for d, b in enumerate(like.factors):
        out.factors[d] = theta[pos[d + 1]:pos[d + 2]].reshape(b.shape, order="F").copy()
    return out


def eta_gradient_batch(x, coeff):
    """Rows ``grad eta(x_i)`` for a stack ``x`` of covariate tensors, shape ``(n, P)``."""
    blocks = [design_for_core(x, coeff)]
    blocks += [design_for_factor(x, d, coeff) for d in range(coeff.ndim)]
    return np.hstack(blocks)


def eta_gradient(x, coeff):
    """Gradient of ``<[[G; B_1, ..., B_D]], x>`` over ``(vec G, vec B_1, ..., vec B_D)``."""
    x = np.asarray(x, dtype=float)
    return eta_gradient_batch(x[None], coeff)[0]


def _others_projection(x, factors, skip):
    out = x[None]
    for d, b in enumerate(factors):
        if d not in skip:
            out = batch_mode_multiply(out, d, b.T)
    return out[0]


def eta_hessian(x, coeff):
    """Hessian of the tensor part of ``eta`` for a single covariate ``x``.

    The ``G``-``G`` block and the diagonal ``B_d``-``B_d`` blocks are zero;
    the other blocks are assembled from the retrieval matrices
    ``X_(dd') (kron of the remaining factors) G_(dd')^T`` and
    ``X_(d) (kron of the other factors)``.  Because the Hessian is linear in
    ``x``, passing a weighted sum of covariates gives the weighted sum of
    Hessians.
    """
    x = np.asarray(x, dtype=float)
    D = coeff.ndim
    sizes = block_sizes(coeff)
    pos = np.cumsum([0] + sizes)
    h = np.zeros((pos[-1], pos[-1]))
    core = coeff.core
    ranks = core.shape
    for d in range(D):
        pd, rd = coeff.factors[d].shape
        # G-B_d block: entry ((s_1..s_D), (i, r)) = 1{s_d = r} W[.., i at d, ..]
        w = _others_projection(x, coeff.factors, skip={d})
        wd = np.moveaxis(w, d, -1)  # (R_{-d}..., p_d)
        a = np.zeros(ranks + (pd, rd))
        for r in range(rd):
            sl = [slice(None)] * D + [slice(None), r]
            sl[d] = r
            a[tuple(sl)] = wd
        hgb = a.reshape(core.size, pd * rd, order="F")
        h[pos[0]:pos[1], pos[d + 1]:pos[d + 2]] = hgb
        h[pos[d + 1]:pos[d + 2], pos[0]:pos[1]] = hgb.T
        for e in range(d + 1, D):
            pe, re = coeff.factors[e].shape
            w2 = _others_projection(x, coeff.factors, skip={d, e})
            m = matricize_pair(w2, d, e) @ matricize_pair(core, d, e).T
            m = m.reshape(pd, pe, rd, re, order="F").transpose(0, 2, 1, 3)
            hde = m.reshape(pd * rd, pe * re, order="F")
            h[pos[d + 1]:pos[d + 2], pos[e + 1]:pos[e + 2]] = hde
            h[pos[e + 1]:pos[e + 2], pos[d + 1]:pos[d + 2]] = hde.T
    return h


def _sigma2(ds, coeff, family, eta):
    mu, mu_prime, var = family_eval(family, eta)
    if family.kind == "normal":
        phi = family.dispersion
        if phi is None:
            phi = float(np.mean((ds.y - mu) ** 2))
        var = np.full_like(var, phi)
    return mu, mu_prime, var


def per_observation_scores(ds, coeff, family, restricted=True, include_gamma=False):
    eta = linear_predictor(ds, coeff)
    mu, mu_prime, var = _sigma2(ds, coeff, family, eta)
    grads = _gradients(ds, coeff, restricted, include_gamma)
    return grads * ((ds.y - mu) * mu_prime / var)[:, None]


def _gradients(ds, coeff, restricted, include_gamma):
    grads = eta_gradient_batch(ds.x, coeff)
    if restricted:
        grads = grads[:, free_mask(coeff)]
    if include_gamma and ds.z is not None:
        grads = np.hstack([grads, ds.z])
    return grads


def score_and_info(ds, coeff, family, restricted=True, include_gamma=False):
    """Score vector and Fisher information summed over observations.

    ``include_gamma`` appends the regular-covariate coefficients after the
    tensor parameters.
    """
    eta = linear_predictor(ds, coeff)
    mu, mu_prime, var = _sigma2(ds, coeff, family, eta)
    grads = _gradients(ds, coeff, restricted, include_gamma)
    score = grads.T @ ((ds.y - mu) * mu_prime / var)
    w = mu_prime**2 / var
    info = (grads * w[:, None]).T @ grads
    info = 0.5 * (info + info.T)
    index = np.flatnonzero(free_mask(coeff)) if restricted else np.arange(sum(block_sizes(coeff)))
    return ScoreInfo(score=score, info=info, restricted=restricted, index=index)


def observed_hessian(ds, coeff, family, restricted=True):
    """Hessian of the log-likelihood (canonical link, so the curvature term of
    ``theta`` drops out)."""
    if not family.canonical:
        raise ValueError("observed_hessian requires a canonical link")
    eta = linear_predictor(ds, coeff)
    mu, mu_prime, var = _sigma2(ds, coeff, family, eta)
    grads = eta_gradient_batch(ds.x, coeff)
    w = mu_prime**2 / var
    h = -(grads * w[:, None]).T @ grads
    # d(score)/d(eta) factor for canonical links is (y - mu)/a(phi) = (y - mu) mu'/sigma^2
    resid = (ds.y - mu) * mu_prime / var
    xsum = np.tensordot(resid, ds.x, axes=(0, 0))
    h += eta_hessian(xsum, coeff)
    h = 0.5 * (h + h.T)
    if restricted:
        m = free_mask(coeff)
        h = h[np.ix_(m, m)]
    return h


def numerical_rank(mat):
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0, s
    thresh = max(mat.shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > thresh)), s


def local_identifiability(ds, coeff, family):
    """Nonsingularity of the restricted information matrix at ``coeff``."""
    si = score_and_info(ds, coeff, family, restricted=True)
    rank, _ = numerical_rank(si.info)
    dim = si.info.shape[0]
    return {"identifiable": rank == dim, "rank": rank, "deficiency": dim - rank}


def standard_errors(si):
    """Square roots of the diagonal of the inverse information."""
    info = np.asarray(si.info if isinstance(si, ScoreInfo) else si, dtype=float)
    rank, _ = numerical_rank(info)
    if rank < info.shape[0]:
        raise SingularInformationError(
            f"information matrix is singular (rank {rank} of {info.shape[0]}); "
            "check local_identifiability and use the restricted parameterization")
    cov = np.linalg.inv(info)
    return np.sqrt(np.diag(cov))


def wald_table(ds, coeff, family):
    """Rows ``(index, estimate, se, z)`` over the restricted tensor parameters."""
    si = score_and_info(ds, coeff, family, restricted=True)
    se = standard_errors(si)
    est = pack(coeff)[si.index]
    return np.column_stack([si.index, est, se, est / se])
