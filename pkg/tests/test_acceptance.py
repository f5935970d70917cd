"""Acceptance criteria 1-12.

Each test prints one ``PASS``/``FAIL`` line with the measured quantities and
then asserts.  Run as ``pytest tests/test_acceptance.py -v`` or directly as
``python tests/test_acceptance.py``.
"""

import csv
import json
import sys
import time

import numpy as np
import pytest

from tuckreg import cli
from tuckreg.coeff_model import TuckerCoeff, cp_df, df_gap, tucker_df, tucker_reconstruct
from tuckreg.downsize import (BasisSpec, build_basis, downsize_dataset, downsize_tensor,
                              fit_fixed_factors)
from tuckreg.estimator import (Dataset, FitOptions, fit_tucker, linear_predictor, null_gamma,
                               random_init)
from tuckreg.glm import GlmFamily, irls_fit
from tuckreg.inference import (block_sizes, eta_gradient, eta_hessian, free_mask, pack,
                               per_observation_scores, score_and_info, standard_errors, unpack)
from tuckreg.regularization import (FAMILIES, PenaltySpec, fit_tucker_regularized, penalty_value,
                                    regularization_path, threshold, tune_lambda)
from tuckreg.rng import stream
from tuckreg.simlab import SignalSpec, make_signal, replicate, simulate_dataset
from tuckreg.tensor_core import inner

pytestmark = pytest.mark.slow
NORMAL = GlmFamily("normal")


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, seconds):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail} [{seconds:.1f} s]")
        return ok
    return emit


def test_c01_df_oracle(report):
    t0 = time.perf_counter()
    cells = [((16,) * 3, (5, 3, 3), 5, 178, 230), ((16,) * 3, (8, 4, 4), 8, 288, 368),
             ((16,) * 3, (10, 5, 5), 10, 420, 460), ((32,) * 3, (5, 3, 3), 5, 354, 470),
             ((32,) * 3, (8, 4, 4), 8, 544, 752), ((32,) * 3, (10, 5, 5), 10, 740, 940)]
    got = [(tucker_df(p, r).df, cp_df(p, R).df) for p, r, R, _, _ in cells]
    want = [(t, c) for *_, t, c in cells]
    intro = (tucker_df((16,) * 3, (2, 2, 5)).df, cp_df((16,) * 3, 5).df)
    dt = time.perf_counter() - t0
    ok = got == want and intro == (131, 230) and dt < 1
    report(1, ok, f"table {got}, example {intro}", dt)
    assert ok


def test_c02_df_gap(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = []
    for ndim in (2, 3, 4, 5):
        for rank in range(1, 7):
            p = tuple(int(v) for v in rng.integers(rank, rank + 6, size=ndim))
            if tucker_df(p, (rank,) * ndim).df - cp_df(p, rank).df != df_gap(rank, ndim):
                bad.append((ndim, rank, p))
    d4 = tucker_df((6,) * 4, (3,) * 4).df - cp_df((6,) * 4, 3).df
    dt = time.perf_counter() - t0
    ok = not bad and d4 == 54 and df_gap(3, 4) == 54 and dt < 1
    report(2, ok, f"mismatches {bad}, D=4 R=3 gap {d4}", dt)
    assert ok


def test_c03_duality(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        ndim = int(rng.integers(1, 4))
        dims = tuple(int(v) for v in rng.integers(1, 9, size=ndim))
        ranks = [int(rng.integers(1, p + 1)) for p in dims]
        bs = [rng.normal(size=(p, r)) for p, r in zip(dims, ranks)]
        g = rng.normal(size=ranks)
        x = rng.normal(size=dims)
        rhs = inner(g, downsize_tensor(x, bs))
        lhs = inner(tucker_reconstruct(TuckerCoeff(g, bs)), x)
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 5
    report(3, ok, f"max relative error {worst:.2e}", dt)
    assert ok


def _random_instance(rng):
    ndim = int(rng.integers(2, 4))
    dims = tuple(int(v) for v in rng.integers(2, 5, size=ndim))
    ranks = tuple(int(rng.integers(1, min(p, 3) + 1)) for p in dims)
    c = TuckerCoeff(rng.normal(size=ranks), [rng.normal(size=(p, r)) for p, r in zip(dims, ranks)])
    return c, rng.normal(size=dims)


def test_c04_gradient_hessian(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    g_err = h_err = 0.0
    zero_blocks = True
    for _ in range(50):
        c, x = _random_instance(rng)
        th = pack(c)
        eye = np.eye(th.size)
        eta = lambda t: inner(tucker_reconstruct(unpack(t, c)), x)
        h = 1e-6
        fd = np.array([(eta(th + h * v) - eta(th - h * v)) / (2 * h) for v in eye])
        g = eta_gradient(x, c)
        g_err = max(g_err, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
        fdh = np.array([(eta_gradient(x, unpack(th + h * v, c)) -
                         eta_gradient(x, unpack(th - h * v, c))) / (2 * h) for v in eye])
        hm = eta_hessian(x, c)
        h_err = max(h_err, np.max(np.abs(hm - fdh)) / np.max(np.abs(fdh)))
        pos = np.cumsum([0] + block_sizes(c))
        for k in range(len(pos) - 1):
            zero_blocks &= not np.any(hm[pos[k]:pos[k + 1], pos[k]:pos[k + 1]])
    dt = time.perf_counter() - t0
    ok = g_err <= 1e-6 and h_err <= 1e-5 and zero_blocks and dt < 30
    report(4, ok, f"gradient rel {g_err:.2e}, Hessian rel {h_err:.2e}, zero blocks {zero_blocks}",
           dt)
    assert ok


def test_c05_monotone_ascent(report):
    t0 = time.perf_counter()
    kinds = ("normal", "bernoulli", "poisson")
    worst_step, worst_score, n_conv = np.inf, 0.0, 0
    for i in range(20):
        fam = GlmFamily(kinds[i % 3])
        b = make_signal(SignalSpec("random_tucker", (8, 8, 8), (2, 2, 2), i))
        b *= (2.0 if fam.kind == "normal" else 1.0) / np.linalg.norm(b)
        ds = simulate_dataset(b, [], 500, fam, "unit" if fam.kind == "normal" else None, i)
        fit = fit_tucker(ds, FitOptions(ranks=(2, 2, 2), family=fam, n_starts=1, seed=i,
                                        tol=1e-13, max_iter=5000, irls_tol=1e-15))
        steps = np.diff([v for _, v in fit.block_trace])
        worst_step = min(worst_step, steps.min())
        if fit.converged:
            n_conv += 1
            score = score_and_info(ds, fit.coeff, fam, restricted=False).score
            worst_score = max(worst_score, np.max(np.abs(score)))
    dt = time.perf_counter() - t0
    ok = worst_step >= -1e-8 and worst_score < 1e-4 and dt < 120
    report(5, ok, f"min block change {worst_step:.2e}, max score {worst_score:.2e} over "
                  f"{n_conv}/20 converged", dt)
    assert ok


def test_c06_consistency_curve(report):
    t0 = time.perf_counter()
    grid = (300, 600, 1200, 2400)
    res = replicate("consistency_curve", {"dims": (16, 16, 16), "ranks": (2, 2, 2),
                                          "n_grid": grid}, 20, base_seed=600)
    means = [res[n].rmse_mean for n in grid]
    dt = time.perf_counter() - t0
    ok = all(a > b for a, b in zip(means, means[1:])) and means[-1] < 0.5 * means[0] and dt <= 600
    report(6, ok, "mean RMSE " + ", ".join(f"n={n}: {m:.4f}" for n, m in zip(grid, means)), dt)
    assert ok


def test_c07_tucker_vs_cp(report):
    t0 = time.perf_counter()
    res = replicate("tucker_vs_cp", {"dims": (16, 16, 16), "dranks": (5, 3, 3), "n": 2000,
                                     "n_starts": 1}, 20, base_seed=700)
    t, c = res["tucker"], res["cp"]
    dt = time.perf_counter() - t0
    ok = t.rmse_mean < c.rmse_mean and t.rmse_mean < 0.35 and dt <= 900
    report(7, ok, f"Tucker {t.rmse_mean:.4f} ({t.rmse_sd:.4f}), CP {c.rmse_mean:.4f} "
                  f"({c.rmse_sd:.4f})", dt)
    assert ok


def test_c08_shape_recovery(report):
    t0 = time.perf_counter()
    lines, ok = [], True
    for shape, order in (("square", 1), ("cross", 2)):
        row = replicate("shape_recovery", {"shape": shape, "orders": (order,)}, 1,
                        base_seed=800)[order].per_rep[0]
        ok &= row["rmse"] < 0.05 and row["jaccard"] > 0.9
        lines.append(f"{shape} TR({order}) RMSE {row['rmse']:.4f} Jaccard {row['jaccard']:.3f}")
    for shape in ("butterfly", "disk"):
        res = replicate("shape_recovery", {"shape": shape, "orders": (1, 3)}, 1, base_seed=800)
        d1, d3 = res[1].per_rep[0]["deviance"], res[3].per_rep[0]["deviance"]
        ok &= d3 < d1
        lines.append(f"{shape} deviance TR(1) {d1:.0f} > TR(3) {d3:.0f}")
    dt = time.perf_counter() - t0
    ok &= dt <= 300
    report(8, ok, "; ".join(lines), dt)
    assert ok


def _canonical_truth(rng, dims, ranks):
    factors = []
    for p, r in zip(dims, ranks):
        b = rng.normal(size=(p, r))
        b[:r] = np.eye(r)
        factors.append(b)
    return TuckerCoeff(rng.normal(size=ranks), factors)


def _normal_data(rng, c, n):
    x = rng.normal(size=(n,) + c.dims)
    return Dataset(linear_predictor(Dataset(np.zeros(n), x), c) + rng.normal(size=n), x)


def test_c09_fisher_identity(report):
    t0 = time.perf_counter()
    dims, ranks, n = (4, 4, 4), (2, 2, 2), 5000
    c = _canonical_truth(np.random.default_rng(900), dims, ranks)
    known = GlmFamily("normal", 1.0)
    ds = _normal_data(np.random.default_rng(901), c, n)
    s = per_observation_scores(ds, c, known)
    info = score_and_info(ds, c, known).info / n
    info_err = np.linalg.norm(s.T @ s / n - info) / np.linalg.norm(info)
    theta = pack(c)[free_mask(c)]
    hits = []
    for rep in range(200):
        ds = _normal_data(np.random.default_rng(10_000 + rep), c, n)
        fit = fit_tucker(ds, FitOptions(ranks=ranks, n_starts=2, seed=rep, tol=1e-10,
                                        max_iter=2000))
        si = score_and_info(ds, fit.coeff, NORMAL)
        se = standard_errors(si)
        hits.append(np.abs(pack(fit.coeff)[si.index] - theta) <= 1.959963984540054 * se)
    coverage = float(np.mean(hits))
    dt = time.perf_counter() - t0
    ok = info_err < 0.10 and 0.91 <= coverage <= 0.99 and dt <= 600
    report(9, ok, f"info relative Frobenius error {info_err:.3f}, Wald coverage "
                  f"{100 * coverage:.2f}% over 200 reps", dt)
    assert ok


def _sparse_core_truth(seed):
    rng = stream(seed, "signal")
    core = np.zeros((3, 3, 3))
    core[0, 0, 0], core[1, 1, 1] = 4.0, -3.0
    return TuckerCoeff(core, [np.linalg.qr(rng.standard_normal((16, 3)))[0] for _ in range(3)])


def _support_recovered(core):
    # two nonzeros sitting on distinct factor columns in every mode: the truth's
    # superdiagonal pattern up to column permutations
    idx = np.argwhere(core != 0)
    return len(idx) == 2 and all(idx[0, d] != idx[1, d] for d in range(core.ndim))


def test_c10_regularization(report):
    t0 = time.perf_counter()
    # threshold operators against the 2001-point grid oracle
    rng = np.random.default_rng(1000)
    grid_ok = True
    for family in FAMILIES:
        for _ in range(1000):
            z, a = rng.normal() * 3, rng.uniform(0.2, 3.0)
            eta = {"power": rng.uniform(0.1, 2.0), "elastic_net": rng.uniform(1, 2),
                   "scad": rng.uniform(2.1, 6), "mcp": rng.uniform(0.3, 5)}.get(family)
            p = PenaltySpec(family, rng.uniform(0, 2), eta)
            g = np.linspace(-2 * abs(z), 2 * abs(z), 2001)
            obj = 0.5 * a * (g - z) ** 2 + penalty_value(p, g)
            near = g[obj <= obj.min() + 1e-9 * (1 + abs(obj.min()))]
            grid_ok &= np.min(np.abs(near - threshold(p, z, a))) <= g[1] - g[0]
    # lambda = 0 against the unpenalized fit from the same start
    ds = simulate_dataset(make_signal(SignalSpec("random_tucker", (8, 8, 8), (2, 2, 2), 10)),
                          [], 500, NORMAL, "unit", 10)
    opts = FitOptions(ranks=(2, 2, 2), n_starts=1, seed=10, tol=1e-12, max_iter=3000)
    init = random_init(ds, opts.ranks, stream(opts.seed, "init", 0), null_gamma(ds, NORMAL))
    gap = abs(fit_tucker(ds, opts, init=init).loglik -
              fit_tucker_regularized(ds, opts, PenaltySpec("lasso", 0.0), init=init).loglik)
    # support recovery: 20 replications, stopping once 90% is out of reach
    lam_grid = [10.0, 31.6, 100.0, 316.0, 1000.0]
    wins, fails, rows = 0, 0, []
    for rep in range(20):
        seed = 1100 + rep
        c = _sparse_core_truth(seed)
        ds = simulate_dataset(tucker_reconstruct(c), [], 2000, NORMAL, "unit", seed)
        ropts = FitOptions(ranks=(3, 3, 3), n_starts=1, seed=seed)
        lam, _ = tune_lambda(ds, ropts, PenaltySpec("lasso"), lam_grid)
        fit = regularization_path(ds, ropts, PenaltySpec("lasso"), lam_grid)[lam_grid.index(lam)]
        hit = _support_recovered(fit.coeff.core)
        wins, fails = wins + hit, fails + (not hit)
        rows.append(f"{lam:g}/{np.count_nonzero(fit.coeff.core)}")
        if fails > 2:
            break
    rate = wins / 20
    dt = time.perf_counter() - t0
    ok = grid_ok and gap <= 1e-6 and rate >= 0.9 and dt <= 600
    report(10, ok, f"threshold grid oracle {grid_ok}, lambda=0 loglik gap {gap:.1e}, support "
                   f"recovered {wins}/{wins + fails} run (lambda/nnz {', '.join(rows)}), "
                   f"{'stopped: 90% unreachable' if fails > 2 else f'rate {rate:.2f}'}", dt)
    assert ok


def test_c11_wavelets(report):
    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("haar_d2", "daubechies_d4"):
        for p in (8, 16, 64, 121):
            b = build_basis(BasisSpec(kind, p, p))
            worst = max(worst, np.max(np.abs(b.T @ b - np.eye(p))))
    rng = np.random.default_rng(1100)
    bases = [BasisSpec("haar", 16, 4), BasisSpec("db4", 12, 3)]
    x = rng.normal(size=(200, 16, 12))
    y = x.reshape(200, -1) @ rng.normal(size=192) * 0.2 + rng.normal(size=200)
    ds = Dataset(y, x)
    small = downsize_dataset(ds, bases)
    reduced = irls_fit(small.x.reshape(200, -1, order="F"), y, NORMAL)
    _, full = fit_fixed_factors(ds, [build_basis(b) for b in bases], NORMAL)
    gap = abs(reduced.loglik - full.loglik)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and gap <= 1e-8 and dt <= 60
    report(11, ok, f"max |B^T B - I| {worst:.1e}, downsized vs fixed-factor loglik gap {gap:.1e}",
           dt)
    assert ok


def _outputs(directory):
    """Tensor bytes and CSV cells below ``directory``, minus the wall-clock ``seconds`` column."""
    out = {}
    for path in sorted(directory.rglob("*")):
        rel = str(path.relative_to(directory))
        if path.suffix in (".tnsr", ".tcoef"):
            out[rel] = path.read_bytes()
        elif path.suffix == ".csv":
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            keep = [j for j, h in enumerate(rows[0]) if h != "seconds"]
            out[rel] = [[row[j] for j in keep] for row in rows]
    return out


def test_c12_determinism(report, tmp_path):
    t0 = time.perf_counter()
    commands = {
        "sim": ["simulate", "--seed", "12", "--dims", "6,5,4", "--n", "200", "--p0", "2"],
        "fit": ["fit", "--data", "{run}/sim", "--ranks", "2,2,2", "--n-starts", "2", "--seed", "3"],
        "cp": ["fit", "--data", "{run}/sim", "--model", "cp", "--ranks", "2", "--n-starts", "2"],
        "lasso": ["fit", "--data", "{run}/sim", "--ranks", "2,2,2", "--penalty", "lasso",
                  "--tune", "cv5", "--lambda-grid", "1,10", "--n-starts", "1"],
        "infer": ["infer", "--data", "{run}/sim", "--coef", "{run}/fit/coefficients.tcoef"],
        "down": ["downsize", "--basis", "db4", "--target", "3,3,2", "--in", "{run}/sim"],
        "df": ["df", "--dims", "16,16,16", "--tucker-ranks", "5,3,3", "--cp-rank", "5"],
        "bench": ["benchmark", "--protocol", "shape_recovery", "--shape", "cross", "--dims",
                  "16,16", "--ranks", "1,2", "--n-grid", "150", "--reps", "2", "--n-starts", "1"],
        "compare": ["compare", "--dims", "6,6,6", "--dranks", "2,2,1", "--n", "200", "--reps", "2",
                    "--n-starts", "1", "--max-iter", "30"],
    }
    codes = {}
    for run in ("a", "b"):
        base = tmp_path / run
        for name, argv in commands.items():
            argv = [a.format(run=base) for a in argv] + ["--out", str(base / name)]
            codes[(run, name)] = cli.main(argv)
    same = _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
    seeds = json.loads((tmp_path / "a" / "fit" / "manifest.json").read_text())["seed"]
    dt = time.perf_counter() - t0
    ok = set(codes.values()) == {0} and same and seeds == 3 and dt < 60
    report(12, ok, f"{len(commands)} commands, exit codes {sorted(set(codes.values()))}, "
                   f"outputs identical {same}", dt)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
