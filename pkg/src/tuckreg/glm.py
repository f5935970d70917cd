"""Canonical-link exponential families and an IRLS solver with step-halving."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

KINDS = ("normal", "bernoulli", "poisson")
LINKS = {"normal": "identity", "bernoulli": "logit", "poisson": "log"}
PROB_CLAMP = 1e-10
ROUNDING_SLACK = 1e-13


class SingularFitError(np.linalg.LinAlgError):
    """Raised when a weighted design matrix is not of full column rank."""


class InvalidResponseError(ValueError):
    pass


@dataclass(frozen=True)
class GlmFamily:
    """Response family with its canonical link.

    ``dispersion`` only applies to the normal family.  ``None`` means the
    variance is profiled out (estimated as RSS/n) when reporting the
    log-likelihood.
    """

    kind: str = "normal"
    dispersion: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family {self.kind!r}; expected one of {KINDS}")
        if self.dispersion is not None and not self.dispersion > 0:
            raise ValueError("dispersion must be positive")

    @property
    def link(self):
        return LINKS[self.kind]

    @property
    def canonical(self):
        return True

    def phi(self):
        """Dispersion used inside weights and the penalized objective."""
        return 1.0 if self.dispersion is None else float(self.dispersion)


@dataclass
class GlmFit:
    coef: np.ndarray
    loglik: float
    deviance: float
    iterations: int
    converged: bool
    loglik_trace: list


def family_eval(f, eta):
    """Return ``(mu, dmu/deta, variance)`` at the linear predictor ``eta``."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("linear predictor contains non-finite values")
    if f.kind == "normal":
        mu = eta.copy()
        return mu, np.ones_like(eta), np.full_like(eta, f.phi())
    if f.kind == "bernoulli":
        mu = expit(eta)
        v = mu * (1.0 - mu)
        return mu, v, v
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    return mu, mu, mu


def check_response(f, y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidResponseError("response contains non-finite values")
    if f.kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
        raise InvalidResponseError("bernoulli responses must be 0 or 1")
    if f.kind == "poisson" and not np.all((y >= 0) & (y == np.round(y))):
        raise InvalidResponseError("poisson responses must be nonnegative integers")
    return y


def loglik(f, y, eta):
    """Log-likelihood of ``y`` at linear predictor ``eta``.

    Normal family: with ``dispersion=None`` the variance is profiled,
    giving ``-n/2 (log(2 pi RSS/n) + 1)``.
    """
    y = check_response(f, y)
    eta = np.asarray(eta, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        if f.kind == "normal":
            n = y.size
            rss = float(np.sum((y - eta) ** 2))
            if f.dispersion is None:
                rss = max(rss, np.finfo(float).tiny)
                return -0.5 * n * (np.log(2 * np.pi * rss / n) + 1.0)
            phi = f.dispersion
            return -0.5 * rss / phi - 0.5 * n * np.log(2 * np.pi * phi)
        if f.kind == "bernoulli":
            val = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        else:
            val = float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))
    return val if np.isfinite(val) else -np.inf


def working_loglik(f, y, eta):
    """Log-likelihood with the normal dispersion held at ``f.phi()``."""
    if f.kind == "normal" and f.dispersion is None:
        return loglik(GlmFamily("normal", 1.0), y, eta)
    return loglik(f, y, eta)


def deviance(f, y, eta):
    """Twice the log-likelihood gap to the saturated model.

    For the normal family this is ``RSS / phi`` with ``phi = 1`` when no
    dispersion is supplied.
    """
    y = check_response(f, y)
    eta = np.asarray(eta, dtype=float)
    if f.kind == "normal":
        return float(np.sum((y - eta) ** 2)) / f.phi()
    if f.kind == "bernoulli":
        return -2.0 * float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
    return 2.0 * float(np.sum(ylogy - (y - mu)))


def _wls(design, z, w, on_singular):
    sw = np.sqrt(w)
    a = design * sw[:, None]
    coef, _, rank, sv = np.linalg.lstsq(a, z * sw, rcond=None)
    if rank < design.shape[1] and on_singular == "raise":
        raise SingularFitError(
            f"design matrix is rank deficient (rank {rank} < {design.shape[1]} columns)")
    return coef


def irls_fit(design, y, f, offset=None, start=None, max_iter=50, tol=1e-10,
             on_singular="raise"):
    """Maximize the ``f`` log-likelihood over ``coef`` with ``eta = design @ coef + offset``.

    Each iteration is a Fisher-scoring (Newton, for canonical links) step
    solved as weighted least squares, halved until the log-likelihood does
    not decrease.  ``start`` warm-starts the iteration, which guarantees the
    returned log-likelihood is no lower than at ``start``.

    ``on_singular="lstsq"`` takes the minimum-norm solution instead of
    raising :class:`SingularFitError` on rank-deficient designs.
    """
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    y = check_response(f, y)
    n, k = design.shape
    if y.shape != (n,):
        raise ValueError(f"design has {n} rows but y has shape {y.shape}")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    coef = np.zeros(k) if start is None else np.asarray(start, dtype=float).copy()
    eta = design @ coef + offset
    ll = loglik(f, y, eta)
    if not np.isfinite(ll) or not np.all(np.isfinite(eta)):
        coef = np.zeros(k)
        eta = offset.copy()
        ll = loglik(f, y, eta)
    trace = [ll]

    if k == 0:
        return GlmFit(coef, ll, deviance(f, y, eta), 0, True, trace)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu, mu_prime, var = family_eval(f, eta)
        if f.kind == "bernoulli":
            mu_c = np.clip(mu, PROB_CLAMP, 1.0 - PROB_CLAMP)
            mu_prime = mu_c * (1.0 - mu_c)
            var = mu_prime
        else:
            mu_prime = np.maximum(mu_prime, PROB_CLAMP)
            var = np.maximum(var, PROB_CLAMP)
        w = mu_prime**2 / var
        z = eta - offset + (y - mu) / mu_prime
        target = _wls(design, z, w, on_singular)

        step = target - coef
        new_coef, new_ll = coef, ll
        # rounding-level slack so a converging Newton step is not halved by noise in ll
        floor = ll - ROUNDING_SLACK * (1.0 + abs(ll))
        for _ in range(40):
            cand = coef + step
            cand_eta = design @ cand + offset
            cand_ll = loglik(f, y, cand_eta) if np.all(np.isfinite(cand_eta)) else -np.inf
            if cand_ll >= floor:
                new_coef, new_ll = cand, cand_ll
                break
            step = step / 2.0
        gain = new_ll - ll
        coef, ll = new_coef, new_ll
        eta = design @ coef + offset
        trace.append(ll)
        if f.kind == "normal" or gain <= tol * (abs(ll) + tol):
            converged = True
            break

    if not np.isfinite(ll):
        converged = False
    return GlmFit(coef, ll, deviance(f, y, eta), it, converged, trace)
