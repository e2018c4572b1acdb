"""Command-line interface: simulate, learn, learn-gp, learn-features, eval, sweep.

Exit codes: 0 ok, 2 usage error, 3 simulation failure, 4 learning failure.
Config precedence: flags > config file > defaults; the config file is a flat
``key=value`` text format mirroring flag names (dashes become underscores).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as dio
from .core import validate_dataset
from .errors import ColldynError, ConfigError, IntegrationError
from .estimator import (
    LearnConfig,
    estimates_to_kernel_set,
    learn_kernels,
    predict_trajectories,
)
from .featmap import kernel_values_from_pairs, learn_reduced_kernel, mpls_reduce
from .estimator import build_hypothesis_space
from .gp import COV_MATERN52, COV_SQEXP, GPModel, default_config, train
from .measure import estimate_rho
from .metrics import SweepConfig, convergence_sweep, kernel_error, trajectory_error
from .models import CATALOG_NAMES, preset
from .sim import IntegratorConfig, default_integrator, generate_dataset

BASIS_ALIASES = {
    "pw-constant": "pw_constant",
    "pw-linear": "pw_linear",
    "bspline": "bspline",
}


def _model_params(args) -> dict:
    params = {}
    if args.N is not None:
        params["N"] = args.N
    if getattr(args, "d", None) is not None:
        params["d"] = args.d
    if getattr(args, "c", None) is not None:
        params["c"] = args.c
    if getattr(args, "theta", None) is not None:
        params["theta"] = args.theta
    if getattr(args, "N1", None) is not None:
        params["N1"] = args.N1
    if getattr(args, "N2", None) is not None:
        params["N2"] = args.N2
    return params


def cmd_simulate(args) -> int:
    params = _model_params(args)
    p = preset(args.model, **params)
    T = args.T if args.T is not None else p.default_T
    L = args.L if args.L is not None else p.default_L
    times = np.linspace(0.0, T, L)
    if args.method == "auto":
        cfg = default_integrator(p.kernels, obs_dt=float(times[1] - times[0]) if L > 1 else None)
    elif args.method == "rk4":
        cfg = IntegratorConfig(method="rk4", step=args.step)
    else:
        cfg = IntegratorConfig(method="rk45", abs_tol=args.tol, rel_tol=args.tol)
    ds = generate_dataset(p.spec, p.kernels, p.mu0, M=args.M, times=times, cfg=cfg,
                          seed=args.seed, noise_sigma=args.noise_sigma,
                          mu0_v=p.mu0_v, threads=args.threads)
    dio.save_dataset(ds, args.out, model=args.model, model_params=params)
    print(f"simulate: model={args.model} M={ds.M} L={ds.L} N={ds.N} d={ds.d} "
          f"seed={args.seed} -> {args.out}")
    return 0


def _truth_kernels(meta):
    if not meta.get("model"):
        return None
    try:
        return preset(meta["model"], **meta.get("model_params", {})).kernels
    except ColldynError:
        return None


def cmd_learn(args) -> int:
    ds, meta = dio.load_dataset(args.data)
    problems = validate_dataset(ds)
    if problems:
        raise ConfigError("invalid dataset: " + "; ".join(problems))
    outdir = Path(args.out or args.data)
    outdir.mkdir(parents=True, exist_ok=True)

    knots = None
    if args.knots:
        knots = np.asarray([float(v) for v in args.knots.split(",")])
    n = None
    if args.n is not None and args.n != "auto":
        n = int(args.n)
    cfg = LearnConfig(family=BASIS_ALIASES[args.basis], n=n, s=args.s, knots=knots,
                      degree=args.degree, ridge=args.ridge, trunc_tol=args.trunc_tol,
                      bins=args.bins, threads=args.threads)
    estimates, report = learn_kernels(ds, cfg)
    dio.save_estimates(estimates, outdir / "estimates.json")

    truth = _truth_kernels(meta)
    per_pair = ds.spec.K > 1
    rho = report.rho
    for est in estimates:
        k1, k2 = est.type_pair
        rho_b = rho[(k1, k2)] if per_pair else rho
        tag = f"_{k1}_{k2}_{est.role}" if (per_pair or est.role != "E") else ""
        dio.save_rho_csv(rho_b, outdir / f"rho{tag or ''}.csv")
        mids = rho_b.midpoints
        header = ["r"]
        cols = [mids]
        if truth is not None:
            header.append("truth")
            cols.append(truth.kernel(est.role, k1, k2)(mids))
        header += ["estimate", "rho_weight"]
        cols += [est(mids), rho_b.weights]
        rows = list(zip(*[list(map(float, c)) for c in cols]))
        dio.save_table_csv(outdir / f"plot{tag or ''}.csv", header, rows)

    report_doc = {
        "radii": {f"{k[0]},{k[1]}": list(v) for k, v in report.radii.items()},
        "coercivity": report.coercivity,
        "coercivity_note": report.coercivity_note,
        "condition_number": report.condition_number,
        "effective_rank": report.effective_rank,
        "n_per_block": {f"{k[0]},{k[1]},{k[2]}": v for k, v in report.n_per_block.items()},
        "n_star": report.n_star,
        "loss": report.loss,
        "dead_elements": list(report.dead_elements),
        "rho_bins": args.bins,
    }
    dio.save_report(report_doc, outdir / "report.json")
    print(f"learn: n_star={report.n_star} cond={report.condition_number:.6g} "
          f"loss={report.loss:.6g} -> {outdir}")
    return 0


def cmd_learn_gp(args) -> int:
    ds, meta = dio.load_dataset(args.data)
    outdir = Path(args.out or args.data)
    outdir.mkdir(parents=True, exist_ok=True)
    family = COV_MATERN52 if args.family == "matern52" else COV_SQEXP
    init = default_config(ds, family=family)
    cfg, trace = train(ds, init=init, restarts=args.restarts, seed=args.seed,
                       maxiter=args.maxiter, train_force=args.train_force or None)
    model = GPModel(cfg).fit(ds)
    dio.save_gp_config(cfg, outdir / "gp_config.json")

    rho = estimate_rho(ds, bins=args.bins)
    grid = np.linspace(rho.support[0], rho.support[1], args.grid_points)
    truth = _truth_kernels(meta)
    for role in ("E", "A"):
        mean, var = model.posterior_kernel(role, grid)
        std = np.sqrt(var)
        dio.save_posterior_csv(grid, mean, std, outdir / f"posterior_{role}.csv")
        header = ["r"]
        cols = [grid]
        if truth is not None:
            header.append("truth")
            cols.append(truth.kernel(role, 0, 0)(grid))
        header += ["estimate", "std", "rho_weight"]
        w = np.interp(grid, rho.midpoints, rho.weights, left=0.0, right=0.0)
        cols += [mean, std, w]
        rows = list(zip(*[list(map(float, c)) for c in cols]))
        dio.save_table_csv(outdir / f"plot_gp_{role}.csv", header, rows)
    dio.save_report({"nlml_trace": trace, "noise_sigma": cfg.noise_sigma},
                    outdir / "gp_report.json")
    best = min(t[1] for t in trace)
    print(f"learn-gp: nlml={best:.6g} sigma={cfg.noise_sigma:.6g} -> {outdir}")
    return 0


def cmd_learn_features(args) -> int:
    ds, _meta = dio.load_dataset(args.data)
    outdir = Path(args.out or args.data)
    outdir.mkdir(parents=True, exist_ok=True)
    samples = kernel_values_from_pairs(ds)
    rmap = mpls_reduce(samples, d_prime=args.dprime, K_centers=args.k_centers,
                       lam=getattr(args, "lambda"), seed=args.seed)
    dio.save_reduction_map(rmap, outdir / "reduction_map.json")
    if args.step2:
        if args.dprime != 1:
            raise ConfigError("--step2 serialization supports d_prime = 1")
        from .featmap import reduced_pair_features

        feats = []
        fn = reduced_pair_features(rmap)
        for m in range(ds.M):
            for l in range(ds.L):
                xi = fn(ds.positions[m, l], None)
                feats.append(xi[~np.eye(ds.N, dtype=bool)])
        allf = np.concatenate(feats)
        space = build_hypothesis_space(float(allf.min()), float(allf.max()),
                                       args.reduced_n, family=BASIS_ALIASES[args.reduced_basis])
        est = learn_reduced_kernel(ds, rmap, space, threads=args.threads)
        dio.save_estimates([est], outdir / "reduced_estimate.json")
    print(f"learn-features: d_prime={rmap.d_prime} D={rmap.D} "
          f"beta_negligible={rmap.beta_negligible} -> {outdir}")
    return 0


def cmd_eval(args) -> int:
    ds, meta = dio.load_dataset(args.data)
    estimates = dio.load_estimates(args.estimates)
    outdir = Path(args.out or args.data)
    outdir.mkdir(parents=True, exist_ok=True)

    truth = _truth_kernels(meta)
    per_pair = ds.spec.K > 1
    rho = estimate_rho(ds, bins=args.bins, per_type_pair=per_pair)
    rows = []
    if truth is not None:
        for est in estimates:
            k1, k2 = est.type_pair
            rho_b = rho[(k1, k2)] if per_pair else rho
            tk = truth.kernel(est.role, k1, k2)
            abs_err = kernel_error(est, tk, rho_b)
            try:
                rel_err = kernel_error(est, tk, rho_b, relative=True)
            except ColldynError:
                rel_err = float("nan")
            rows.append([k1, k2, est.role, abs_err, rel_err])
    dio.save_table_csv(outdir / "eval_kernels.csv",
                       ["k1", "k2", "role", "abs_error", "rel_error"], rows)

    kernels = estimates_to_kernel_set(estimates, ds.spec)
    del kernels  # estimate coverage validated above; prediction below reuses estimates
    traj_rows = []
    window = (float(ds.times[0]), float(ds.times[-1]))
    for m in range(ds.M):
        v0 = ds.velocities[m, 0] if ds.spec.order == "second" else None
        pred = predict_trajectories(estimates, ds.spec, ds.positions[m, 0], v0, ds.times)
        err = trajectory_error(pred.positions, ds.positions[m], ds.times, [window])[0]
        traj_rows.append([m, err.sup, err.mean])
    dio.save_table_csv(outdir / "eval_trajectories.csv",
                       ["m", "sup_error", "mean_error"], traj_rows)
    print(f"eval: wrote kernel and trajectory error tables -> {outdir}")
    return 0


def cmd_sweep(args, parser) -> int:
    ms = tuple(int(v) for v in args.Ms.split(","))
    if len(ms) < 3:
        parser.error("sweep needs at least 3 M values")
    params = _model_params(args)
    cfg = SweepConfig(model=args.model, model_params=params, Ms=ms, trials=args.trials,
                      seed=args.seed, s=args.s, L=args.L, T=args.T,
                      noise_sigma=args.noise_sigma, threads=args.threads)
    result = convergence_sweep(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [[r.M, r.n_star, r.mean_rel_err, r.std, r.trials] for r in result.rows]
    dio.save_table_csv(outdir / "sweep.csv",
                       ["M", "n_star", "mean_rel_err", "std", "trials"], rows)
    print(f"sweep: slope={result.slope:.4f} over Ms={list(ms)} -> {outdir}/sweep.csv")
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="colldyn",
                                     description="Collective-dynamics kernel learning")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", type=str, default=None,
                       help="key=value file; flags override config values")

    p = sub.add_parser("simulate", help="generate a trajectory dataset")
    common(p)
    p.add_argument("--model", required=True, choices=CATALOG_NAMES)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--N1", type=int, default=None)
    p.add_argument("--N2", type=int, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--M", type=int, default=10)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--method", choices=("auto", "rk4", "rk45"), default="auto")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    subparsers["simulate"] = p

    p = sub.add_parser("learn", help="least-squares kernel learning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--basis", choices=tuple(BASIS_ALIASES), default="pw-linear")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--knots", type=str, default=None)
    p.add_argument("--n", type=str, default=None, help="dimension or 'auto'")
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--trunc-tol", type=float, default=1e-12)
    p.add_argument("--bins", type=int, default=200)
    subparsers["learn"] = p

    p = sub.add_parser("learn-gp", help="Gaussian-process kernel learning (second order)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--family", choices=("matern52", "sqexp"), default="matern52")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--maxiter", type=int, default=200)
    p.add_argument("--train-force", action="store_true")
    p.add_argument("--bins", type=int, default=200)
    p.add_argument("--grid-points", type=int, default=200)
    subparsers["learn-gp"] = p

    p = sub.add_parser("learn-features", help="MPLS feature-map reduction (two-agent data)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--dprime", type=int, default=1)
    p.add_argument("--k-centers", type=int, default=None)
    p.add_argument("--lambda", type=float, default=None)
    p.add_argument("--step2", action="store_true",
                   help="also learn the reduced kernel on the learned variable")
    p.add_argument("--reduced-n", type=int, default=10)
    p.add_argument("--reduced-basis", choices=tuple(BASIS_ALIASES), default="pw-linear")
    subparsers["learn-features"] = p

    p = sub.add_parser("eval", help="error tables for saved estimates")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--estimates", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--bins", type=int, default=200)
    subparsers["eval"] = p

    p = sub.add_parser("sweep", help="convergence-rate sweep over M")
    common(p)
    p.add_argument("--model", required=True, choices=CATALOG_NAMES)
    p.add_argument("--Ms", required=True, help="comma-separated increasing M values (>= 3)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--out", required=True)
    subparsers["sweep"] = p
    return parser, subparsers


def _apply_config_file(argv, parser, subparsers):
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config needs a file path")
    path = Path(argv[idx + 1])
    if not path.exists():
        parser.error(f"config file {path} not found")
    command = argv[0] if argv and not argv[0].startswith("-") else None
    if command not in subparsers:
        parser.error("--config requires a subcommand")
    sp = subparsers[command]
    valid = {a.dest for a in sp._actions}
    overrides = {}
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"config line {line_no}: expected key=value")
        key, value = line.split("=", 1)
        dest = key.strip().replace("-", "_")
        if dest not in valid:
            parser.error(f"config line {line_no}: unknown key {key.strip()!r}")
        overrides[dest] = value.strip()
    # re-parse string values through each action's type for consistency
    for action in sp._actions:
        if action.dest in overrides:
            raw = overrides[action.dest]
            if action.type is not None:
                overrides[action.dest] = action.type(raw)
            elif isinstance(action, argparse._StoreTrueAction):
                overrides[action.dest] = raw.lower() in ("1", "true", "yes")
    sp.set_defaults(**overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    _apply_config_file(argv, parser, subparsers)
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "learn":
            return cmd_learn(args)
        if args.command == "learn-gp":
            return cmd_learn_gp(args)
        if args.command == "learn-features":
            return cmd_learn_features(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "sweep":
            return cmd_sweep(args, parser)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IntegrationError as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return 3
    except ColldynError as exc:
        stage = args.command
        print(f"learning failure [{stage}]: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
