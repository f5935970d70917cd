"""Signal generators, synthetic data, error metrics and replication studies."""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coeff_model import TuckerCoeff, tucker_reconstruct
from .estimator import Dataset, FitOptions, fit_cp, fit_tucker
from .glm import GlmFamily
from .rng import stream
from .tensor_core import check_dims

SHAPES = ("square", "cross", "disk", "t_shape", "triangle", "butterfly")
RANDOM_KINDS = ("random_tucker", "random_drank")
NOISE_MODES = ("var_mu_over_10", "unit")
PROTOCOLS = ("shape_recovery", "consistency_curve", "tucker_vs_cp")


@dataclass(frozen=True)
class SignalSpec:
    kind: str
    dims: tuple
    ranks: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", check_dims(self.dims))
        if self.kind in SHAPES:
            if len(self.dims) != 2:
                raise ValueError(f"shape {self.kind!r} is two-dimensional, got dims {self.dims}")
            if min(self.dims) < 8:
                raise ValueError("named shapes need both sides at least 8")
        elif self.kind in RANDOM_KINDS:
            if self.ranks is None or len(self.ranks) != len(self.dims):
                raise ValueError(f"{self.kind} needs one rank per mode")
            r = tuple(int(v) for v in self.ranks)
            if any(not 1 <= v <= p for v, p in zip(r, self.dims)):
                raise ValueError(f"ranks {r} must lie in [1, p_d] for dims {self.dims}")
            object.__setattr__(self, "ranks", r)
        else:
            raise ValueError(f"unknown signal kind {self.kind!r}")


@dataclass
class SimResult:
    rmse_mean: float
    rmse_sd: float
    replications: int
    per_rep: list  # dicts with seed, rmse, converged, seconds (and error, when a fit failed)
    label: dict = field(default_factory=dict)
    estimates: list = field(default_factory=list)


def _polygon_mask(shape, vertices):
    """Cells whose centers fall inside the polygon (even-odd rule); vertices are (row, col)."""
    rows, cols = np.meshgrid(np.arange(shape[0]) + 0.5, np.arange(shape[1]) + 0.5,
                             indexing="ij")
    inside = np.zeros(shape, dtype=bool)
    v = np.asarray(vertices, dtype=float)
    for (r0, c0), (r1, c1) in zip(v, np.roll(v, -1, axis=0)):
        crosses = (r0 > rows) != (r1 > rows)
        with np.errstate(divide="ignore", invalid="ignore"):
            at = c0 + (rows - r0) * (c1 - c0) / (r1 - r0)
        inside ^= crosses & (cols < at)
    return inside


def _shape(kind, dims):
    p1, p2 = dims
    out = np.zeros(dims, dtype=bool)
    c1, c2 = p1 // 2, p2 // 2
    h1, h2 = p1 // 8, p2 // 8  # half-width of a square, full width of a bar
    if kind == "square":
        out[c1 - h1:c1 + h1, c2 - h2:c2 + h2] = True
    elif kind == "cross":
        l1, l2 = p1 // 8, p2 // 8  # half-length of each bar
        out[c1 - h1 // 2:c1 + h1 - h1 // 2, c2 - l2:c2 + l2] = True
        out[c1 - l1:c1 + l1, c2 - h2 // 2:c2 + h2 - h2 // 2] = True
    elif kind == "t_shape":
        l1, l2 = p1 // 4, p2 // 4
        out[c1 - l1:c1 - l1 + h1, c2 - l2:c2 + l2] = True
        out[c1 - l1:c1 + l1, c2 - h2 // 2:c2 + h2 - h2 // 2] = True
    elif kind == "disk":
        r, c = np.meshgrid(np.arange(p1) + 0.5, np.arange(p2) + 0.5, indexing="ij")
        out = ((r - p1 / 2) / p1) ** 2 + ((c - p2 / 2) / p2) ** 2 <= (1 / 4) ** 2
    elif kind == "triangle":
        out = _polygon_mask(dims, [(p1 / 4, p2 / 2), (3 * p1 / 4, p2 / 4),
                                   (3 * p1 / 4, 3 * p2 / 4)])
    else:  # butterfly: four triangular wings mirrored about the body column
        body = p2 / 2 - p2 / 32
        wings = [[(p1 / 2, body), (p1 / 8, p2 / 8), (p1 / 2 - p1 / 16, p2 / 16)],
                 [(p1 / 2, body), (7 * p1 / 8, p2 / 8), (p1 / 2 + p1 / 16, p2 / 16)]]
        for wing in wings:
            out |= _polygon_mask(dims, wing)
        out |= out[:, ::-1]
        out[3 * p1 // 8:5 * p1 // 8, p2 // 2 - p2 // 32:p2 // 2 + p2 // 32] = True
    return out.astype(float)


def make_signal(s):
    """Coefficient tensor described by ``s``.

    Named shapes are 0/1 masks scaled with the side lengths (square of
    half-width p/8 at the center, cross of two bars of width p/8 and length
    p/4, disk of radius p/4, polygonal triangle and butterfly).  Random kinds
    draw a Tucker tensor with independent standard normal core and factors
    from the ``signal`` stream; generically its d-ranks equal ``ranks``.
    """
    if s.kind in SHAPES:
        return _shape(s.kind, s.dims)
    rng = stream(s.seed, "signal")
    core = rng.standard_normal(s.ranks)
    factors = [rng.standard_normal((p, r)) for p, r in zip(s.dims, s.ranks)]
    return tucker_reconstruct(TuckerCoeff(core, factors))


def simulate_dataset(b_true, gamma, n, family, noise=None, seed=0):
    """Draw ``(y, X, Z)`` with iid standard normal ``X`` and ``Z``.

    Normal responses need ``noise``: ``var_mu_over_10`` sets the error
    variance to the empirical variance of the linear predictors over ten,
    ``unit`` sets it to one.  Other families use their inverse link and take
    no noise mode.
    """
    if n < 1:
        raise ValueError("n must be positive")
    b_true = np.asarray(b_true, dtype=float)
    gamma = np.asarray(gamma if gamma is not None else [], dtype=float).ravel()
    if family.kind == "normal":
        if noise not in NOISE_MODES:
            raise ValueError(f"normal responses need noise in {NOISE_MODES}, got {noise!r}")
    elif noise is not None:
        raise ValueError(f"noise mode {noise!r} applies only to normal responses")
    rng = stream(seed, "data")
    x = rng.standard_normal((n,) + b_true.shape)
    z = rng.standard_normal((n, gamma.size)) if gamma.size else None
    eta = x.reshape(n, -1) @ b_true.ravel()
    if z is not None:
        eta = eta + z @ gamma
    if family.kind == "normal":
        var = float(np.var(eta)) / 10 if noise == "var_mu_over_10" else 1.0
        y = eta + np.sqrt(var) * rng.standard_normal(n)
    elif family.kind == "bernoulli":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return Dataset(y, x, z)


def rmse(b_hat, b_true):
    b_hat = np.asarray(b_hat, dtype=float)
    b_true = np.asarray(b_true, dtype=float)
    if b_hat.shape != b_true.shape:
        raise ValueError(f"shape mismatch {b_hat.shape} vs {b_true.shape}")
    return float(np.sqrt(np.mean((b_hat - b_true) ** 2)))


def jaccard(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def _summarize(rows, label, estimates=()):
    vals = np.array([r["rmse"] for r in rows if np.isfinite(r["rmse"])])
    mean = float(vals.mean()) if vals.size else float("nan")
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return SimResult(mean, sd, len(rows), rows, label, list(estimates))


def _timed_fit(fn, b_true):
    t0 = time.perf_counter()
    try:
        fit = fn()
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        return None, {"rmse": float("nan"), "converged": False,
                      "seconds": time.perf_counter() - t0, "error": str(exc)}
    b_hat = tucker_reconstruct(fit.coeff)
    return fit, {"rmse": rmse(b_hat, b_true), "converged": bool(fit.converged),
                 "seconds": time.perf_counter() - t0, "deviance": float(fit.deviance),
                 "bic": float(fit.bic)}


def _options(params, ranks, seed):
    keys = ("tol", "max_iter", "n_starts", "irls_max_iter")
    extra = {k: params[k] for k in keys if k in params}
    return FitOptions(ranks=ranks, family=GlmFamily("normal"), seed=seed, **extra)


def _shape_rep(params, seed):
    dims = tuple(params.get("dims", (64, 64)))
    b_true = make_signal(SignalSpec(params["shape"], dims))
    gamma = np.asarray(params.get("gamma", np.ones(5)), dtype=float)
    ds = simulate_dataset(b_true, gamma, params.get("n", 1000), GlmFamily("normal"),
                          params.get("noise", "var_mu_over_10"), seed)
    out = {}
    for r in params.get("orders", (1, 2, 3)):
        fit, row = _timed_fit(lambda: fit_tucker(ds, _options(params, (r,) * len(dims), seed)),
                              b_true)
        row["seed"] = seed
        if fit is not None:
            b_hat = tucker_reconstruct(fit.coeff)
            row["jaccard"] = jaccard(b_hat > 0.5, b_true > 0.5)
        out[r] = (row, None if fit is None else tucker_reconstruct(fit.coeff))
    return out


def _consistency_rep(params, seed):
    dims = tuple(params.get("dims", (16, 16, 16)))
    ranks = tuple(params.get("ranks", (2, 2, 2)))
    b_true = make_signal(SignalSpec("random_tucker", dims, ranks, seed))
    out = {}
    for n in params.get("n_grid", (300, 600, 1200, 2400)):
        ds = simulate_dataset(b_true, [], n, GlmFamily("normal"), params.get("noise", "unit"),
                              seed)
        _, row = _timed_fit(lambda: fit_tucker(ds, _options(params, ranks, seed)), b_true)
        row["seed"] = seed
        out[n] = row
    return out


def _compare_rep(params, seed):
    dims = tuple(params.get("dims", (16, 16, 16)))
    dranks = tuple(params.get("dranks", (5, 3, 3)))
    b_true = make_signal(SignalSpec("random_drank", dims, dranks, seed))
    ds = simulate_dataset(b_true, [], params.get("n", 2000), GlmFamily("normal"),
                          params.get("noise", "unit"), seed)
    _, tucker_row = _timed_fit(lambda: fit_tucker(ds, _options(params, dranks, seed)), b_true)
    cp_rank = max(dranks)
    _, cp_row = _timed_fit(
        lambda: fit_cp(ds, cp_rank, _options(params, (cp_rank,) * len(dims), seed)), b_true)
    tucker_row["seed"] = cp_row["seed"] = seed
    return {"tucker": tucker_row, "cp": cp_row}


def replicate(protocol, params, n_reps, base_seed=0, threads=1):
    """Run ``n_reps`` replications of a simulation protocol.

    Replication ``i`` uses seed ``base_seed + i`` for every stream.  Fit
    failures are recorded in the per-replication rows and excluded from
    the summary.  Returns a dict of :class:`SimResult`, keyed by model order
    (``shape_recovery``), sample size (``consistency_curve``) or model name
    (``tucker_vs_cp``).
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    runner = {"shape_recovery": _shape_rep, "consistency_curve": _consistency_rep,
              "tucker_vs_cp": _compare_rep}.get(protocol)
    if runner is None:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    seeds = [base_seed + i for i in range(n_reps)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(lambda s: runner(params, s), seeds))
    else:
        reps = [runner(params, s) for s in seeds]
    results = {}
    for key in reps[0]:
        if protocol == "shape_recovery":
            rows = [rep[key][0] for rep in reps]
            estimates = [rep[key][1] for rep in reps]
        else:
            rows = [rep[key] for rep in reps]
            estimates = []
        results[key] = _summarize(rows, {"protocol": protocol, "key": key}, estimates)
    return results
