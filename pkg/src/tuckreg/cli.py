"""Command-line interface.

Exit status is 0 on success, 1 on usage or input-format errors and 2 on
numerical failure (singular block fits or information matrices,
non-finite likelihoods).
"""

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import downsize as dsz
from . import simlab
from .coeff_model import cp_df, tucker_df
from .estimator import FitOptions, fit_cp, fit_tucker, select_order
from .fileio import (FormatError, read_coeff, read_dataset, read_tensor, read_tensor_list,
                     write_csv, write_dataset, write_manifest, write_result, write_tensor,
                     atomic_write)
from .glm import GlmFamily, InvalidResponseError
from .inference import local_identifiability, wald_table
from .regularization import PenaltySpec, fit_tucker_regularized, tune_lambda

THREAD_ENV = "TUCKREG_THREADS"
EXIT_USAGE = 1
EXIT_NUMERIC = 2

PROTOCOL_DEFAULTS = {
    "consistency": {"signal": "random_tucker", "dims": (16, 16, 16), "ranks": (2, 2, 2),
                    "n": 300, "noise": "unit", "p0": 0},
    "shape": {"signal": "square", "dims": (64, 64), "ranks": None, "n": 1000,
              "noise": "var_mu_over_10", "p0": 5},
    "compare": {"signal": "random_drank", "dims": (16, 16, 16), "ranks": (5, 3, 3),
                "n": 2000, "noise": "unit", "p0": 0},
}
PENALTY_NAMES = {"lasso": "lasso", "ridge": "ridge", "power": "power", "enet": "elastic_net",
                 "scad": "scad", "mcp": "mcp"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def int_list(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def seed_value(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=seed_value, default=0, help="64-bit seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker cap for multi-start, replications and CV folds "
                             f"(default 1, or ${THREAD_ENV} when set)")

    fit_opts = argparse.ArgumentParser(add_help=False)
    fit_opts.add_argument("--family", choices=("normal", "bernoulli", "poisson"), default="normal")
    fit_opts.add_argument("--tol", type=float, default=1e-6)
    fit_opts.add_argument("--max-iter", type=int, default=200)
    fit_opts.add_argument("--n-starts", type=int, default=5)

    p = _Parser(prog="tuckreg", description="Tucker tensor regression for GLMs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    s.add_argument("--protocol", choices=sorted(PROTOCOL_DEFAULTS), default="consistency")
    s.add_argument("--signal", choices=simlab.SHAPES + simlab.RANDOM_KINDS)
    s.add_argument("--dims", type=int_list)
    s.add_argument("--ranks", type=int_list)
    s.add_argument("--n", type=int)
    s.add_argument("--family", choices=("normal", "bernoulli", "poisson"), default="normal")
    s.add_argument("--noise", choices=simlab.NOISE_MODES)
    s.add_argument("--p0", type=int, help="number of regular covariates (coefficients all one)")

    f = sub.add_parser("fit", parents=[common, fit_opts], help="fit a Tucker or CP model")
    f.add_argument("--data", type=Path, required=True, help="dataset directory")
    f.add_argument("--ranks", type=int_list, required=True,
                   help="Tucker ranks R_1,...,R_D (the CP rank for --model cp)")
    f.add_argument("--model", choices=("tucker", "cp"), default="tucker")
    f.add_argument("--select", type=str,
                   help="semicolon-separated candidate rank tuples chosen by BIC")
    f.add_argument("--penalty", choices=("none",) + tuple(PENALTY_NAMES), default="none")
    f.add_argument("--lambda", dest="lam", type=float, default=0.0)
    f.add_argument("--eta", type=float)
    f.add_argument("--tune", choices=("cv5", "bic"))
    f.add_argument("--lambda-grid", type=float_list)

    i = sub.add_parser("infer", parents=[common], help="score, information and Wald table")
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--coef", type=Path, required=True)
    i.add_argument("--family", choices=("normal", "bernoulli", "poisson"), default="normal")

    d = sub.add_parser("downsize", parents=[common], help="project tensors onto a wavelet basis")
    d.add_argument("--basis", choices=("haar", "db4", "identity"), required=True)
    d.add_argument("--target", type=int_list, required=True)
    d.add_argument("--in", dest="inp", type=Path, required=True,
                   help="tensor list file (one TNSR1 path per line) or dataset directory")

    c = sub.add_parser("compare", parents=[common, fit_opts],
                       help="Tucker versus CP replication study")
    c.add_argument("--dims", type=int_list, default=(16, 16, 16))
    c.add_argument("--dranks", type=int_list, default=(5, 3, 3))
    c.add_argument("--n", type=int, default=2000)
    c.add_argument("--reps", type=int, default=20)

    q = sub.add_parser("df", parents=[common], help="print Tucker and CP parameter counts")
    q.add_argument("--dims", type=int_list, required=True)
    q.add_argument("--tucker-ranks", type=int_list, required=True)
    q.add_argument("--cp-rank", type=int, required=True)

    b = sub.add_parser("benchmark", parents=[common, fit_opts], help="replication study tables")
    b.add_argument("--protocol", choices=simlab.PROTOCOLS, default="consistency_curve")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--dims", type=int_list)
    b.add_argument("--ranks", type=int_list)
    b.add_argument("--n-grid", type=int_list)
    b.add_argument("--shape", choices=simlab.SHAPES, default="square")
    b.add_argument("--full", action="store_true",
                   help="full-scale study: 100 replications")
    return p


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREAD_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREAD_ENV}={env!r} is not an integer")
    return 1


def _need_out(args):
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def _family(name):
    return GlmFamily(name)


def _options(args, ranks, threads):
    return FitOptions(ranks=ranks, family=_family(args.family), tol=args.tol,
                      max_iter=args.max_iter, n_starts=args.n_starts, seed=args.seed,
                      threads=threads)


def cmd_simulate(args, threads):
    out = _need_out(args)
    cfg = dict(PROTOCOL_DEFAULTS[args.protocol])
    for key in ("signal", "dims", "ranks", "n", "noise", "p0"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    family = _family(args.family)
    noise = cfg["noise"] if family.kind == "normal" else None
    ranks = cfg["ranks"] if cfg["signal"] in simlab.RANDOM_KINDS else None
    b_true = simlab.make_signal(simlab.SignalSpec(cfg["signal"], cfg["dims"], ranks, args.seed))
    gamma = np.ones(cfg["p0"])
    ds = simlab.simulate_dataset(b_true, gamma, cfg["n"], family, noise, args.seed)
    outputs = write_dataset(ds, out)
    write_tensor(out / "truth.tnsr", b_true)
    outputs.append(out / "truth.tnsr")
    cfg["family"] = family.kind
    return {"config": cfg}, [], outputs


def cmd_fit(args, threads):
    out = _need_out(args)
    ds = read_dataset(args.data)
    if args.select:
        cands = [int_list(c) for c in args.select.split(";") if c.strip()]
        fit, table = select_order(ds, cands, _options(args, cands[0], threads))
        table_path = out / "selection.csv"
        write_csv(table_path, ["ranks", "df", "deviance", "loglik", "bic", "converged"],
                  [("x".join(map(str, r["ranks"])), r["df"], r["deviance"], r["loglik"],
                    r["bic"], int(r["converged"])) for r in table])
        extra = [table_path]
    elif args.model == "cp":
        if len(args.ranks) != 1:
            raise UsageError("--model cp takes a single rank")
        rank = args.ranks[0]
        fit = fit_cp(ds, rank, _options(args, (rank,) * len(ds.dims), threads))
        extra = []
    elif args.penalty != "none":
        opts = _options(args, args.ranks, threads)
        penalty = PenaltySpec(PENALTY_NAMES[args.penalty], args.lam, args.eta)
        extra = []
        if args.tune:
            if not args.lambda_grid:
                raise UsageError("--tune needs --lambda-grid")
            lam, table = tune_lambda(ds, opts, penalty, args.lambda_grid, method=args.tune)
            penalty = penalty.with_lambda(lam)
            table_path = out / "tuning.csv"
            write_csv(table_path, ["lambda", "score"], [(r["lambda"], r["score"]) for r in table])
            extra.append(table_path)
        fit = fit_tucker_regularized(ds, opts, penalty)
    else:
        fit = fit_tucker(ds, _options(args, args.ranks, threads))
        extra = []
    outputs = write_result(fit, out) + extra
    inputs = [args.data / "response.csv", args.data / "tensors.txt"]
    return {"ranks": list(fit.coeff.ranks), "model": fit.model}, inputs, outputs


def cmd_infer(args, threads):
    out = _need_out(args)
    ds = read_dataset(args.data)
    coeff = read_coeff(args.coef)
    family = _family(args.family)
    ident = local_identifiability(ds, coeff, family)
    summary = out / "identifiability.csv"
    write_csv(summary, ["key", "value"], [(k, int(v)) for k, v in ident.items()])
    outputs = [summary]
    if not ident["identifiable"]:
        raise np.linalg.LinAlgError(
            f"information matrix is singular (rank {ident['rank']}, "
            f"deficiency {ident['deficiency']})")
    table = wald_table(ds, coeff, family)
    wald = out / "wald.csv"
    write_csv(wald, ["index", "estimate", "se", "z"],
              [(int(r[0]), r[1], r[2], r[3]) for r in table])
    outputs.append(wald)
    return {}, [args.coef], outputs


def cmd_downsize(args, threads):
    out = _need_out(args)
    kind = {"haar": "haar_d2", "db4": "daubechies_d4", "identity": "identity"}[args.basis]
    src = args.inp
    list_file = src / "tensors.txt" if src.is_dir() else src
    paths = read_tensor_list(list_file)
    if not paths:
        raise FormatError(f"{list_file}: no tensors listed")
    first = read_tensor(paths[0])
    if len(args.target) != first.ndim:
        raise UsageError(f"--target has {len(args.target)} sizes, tensors have {first.ndim} modes")
    try:
        bases = [dsz.build_basis(dsz.BasisSpec(kind, p, q))
                 for p, q in zip(first.shape, args.target)]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    outputs, names = [], []
    for i, path in enumerate(paths):
        x = first if i == 0 else read_tensor(path)
        if x.shape != first.shape:
            raise FormatError(f"{path}: dims {x.shape} differ from {first.shape}")
        name = f"tensors/x{i:06d}.tnsr"
        write_tensor(out / name, dsz.downsize_tensor(x, bases))
        names.append(name)
        outputs.append(out / name)
    atomic_write(out / "tensors.txt", "\n".join(names) + "\n")
    outputs.append(out / "tensors.txt")
    for j, basis in enumerate(bases):
        write_tensor(out / f"basis_{j + 1}.tnsr", basis)
        outputs.append(out / f"basis_{j + 1}.tnsr")
    if src.is_dir():
        for extra in ("response.csv", "covariates.csv"):
            if (src / extra).exists():
                atomic_write(out / extra, (src / extra).read_bytes())
                outputs.append(out / extra)
    return {"basis": kind, "target": list(args.target)}, [list_file] + paths, outputs


RESULT_HEADER = ["protocol", "n", "ranks", "rep", "rmse", "converged", "seconds"]


def _result_rows(protocol, key, n, ranks, res):
    return [(protocol if key is None else f"{protocol}:{key}", n, "x".join(map(str, ranks)), i,
             r["rmse"], int(r["converged"]), r["seconds"]) for i, r in enumerate(res.per_rep)]


def cmd_compare(args, threads):
    out = _need_out(args)
    params = {"dims": args.dims, "dranks": args.dranks, "n": args.n, "tol": args.tol,
              "max_iter": args.max_iter, "n_starts": args.n_starts}
    res = simlab.replicate("tucker_vs_cp", params, args.reps, args.seed, threads)
    rows = []
    for model in ("tucker", "cp"):
        ranks = args.dranks if model == "tucker" else (max(args.dranks),)
        rows += _result_rows("tucker_vs_cp", model, args.n, ranks, res[model])
    results = out / "results.csv"
    write_csv(results, RESULT_HEADER, rows)
    summary = out / "summary.csv"
    write_csv(summary, ["model", "df", "rmse_mean", "rmse_sd", "replications"],
              [("tucker", tucker_df(args.dims, args.dranks).df, res["tucker"].rmse_mean,
                res["tucker"].rmse_sd, args.reps),
               ("cp", cp_df(args.dims, max(args.dranks)).df, res["cp"].rmse_mean,
                res["cp"].rmse_sd, args.reps)])
    for row in ("tucker", "cp"):
        print(f"{row}\t{res[row].rmse_mean:.6g}\t({res[row].rmse_sd:.3g})")
    return params, [], [results, summary]


def cmd_df(args, threads):
    if len(args.dims) != len(args.tucker_ranks):
        raise UsageError("--dims and --tucker-ranks need the same length")
    try:
        t = tucker_df(args.dims, args.tucker_ranks)
        c = cp_df(args.dims, args.cp_rank)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"tucker\t{t.df}")
    print(f"cp\t{c.df}")
    outputs = []
    if args.out is not None:
        path = args.out / "df.csv"
        write_csv(path, ["model", "df", "raw_params"],
                  [("tucker", t.df, t.raw_params), ("cp", c.df, c.raw_params)])
        outputs.append(path)
    return {}, [], outputs


def cmd_benchmark(args, threads):
    out = _need_out(args)
    reps = 100 if args.full else args.reps
    proto = args.protocol
    params = {"tol": args.tol, "max_iter": args.max_iter, "n_starts": args.n_starts}
    if proto == "consistency_curve":
        params["dims"] = args.dims or ((32, 32, 32) if args.full else (16, 16, 16))
        params["ranks"] = args.ranks or (2, 2, 2)
        params["n_grid"] = args.n_grid or (300, 600, 1200, 2400)
    elif proto == "tucker_vs_cp":
        params["dims"] = args.dims or (16, 16, 16)
        params["dranks"] = args.ranks or (5, 3, 3)
        params["n"] = (args.n_grid or (2000,))[0]
    else:
        params["shape"] = args.shape
        params["dims"] = args.dims or (64, 64)
        params["orders"] = args.ranks or (1, 2, 3)
        params["n"] = (args.n_grid or (1000,))[0]
    res = simlab.replicate(proto, params, reps, args.seed, threads)
    rows, curve = [], []
    for key, r in res.items():
        if proto == "consistency_curve":
            n, ranks, label = key, params["ranks"], None
        elif proto == "tucker_vs_cp":
            n, label = params["n"], key
            ranks = params["dranks"] if key == "tucker" else (max(params["dranks"]),)
        else:
            n, ranks, label = params["n"], (key,) * len(params["dims"]), key
        rows += _result_rows(proto, label, n, ranks, r)
        curve.append((str(key), n, r.rmse_mean, r.rmse_sd, r.replications))
    results = out / "results.csv"
    write_csv(results, RESULT_HEADER, rows)
    curve_path = out / "curve.csv"
    write_csv(curve_path, ["key", "n", "rmse_mean", "rmse_sd", "replications"], curve)
    outputs = [results, curve_path]
    if proto == "shape_recovery":
        for key, r in res.items():
            if r.estimates and r.estimates[0] is not None:
                path = out / f"estimate_TR{key}.tnsr"
                write_tensor(path, r.estimates[0])
                outputs.append(path)
    return {"params": params, "reps": reps}, [], outputs


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "infer": cmd_infer,
            "downsize": cmd_downsize, "compare": cmd_compare, "df": cmd_df,
            "benchmark": cmd_benchmark}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    try:
        threads = _threads(args)
        options, inputs, outputs = COMMANDS[args.command](args, threads)
    except (UsageError, FormatError, InvalidResponseError, FileNotFoundError) as exc:
        print(f"tuckreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"tuckreg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out is not None:
        snapshot = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
        snapshot.update(options)
        snapshot["threads"] = threads
        write_manifest(args.out / "manifest.json", ["tuckreg"] + argv, args.seed, snapshot,
                       time.perf_counter() - t0, inputs, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
