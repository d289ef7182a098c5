"""Command-line entry point: ``isloss {weights,oracle,train,eval}``.

Exit status is 0 when every requested file was written, 2 for invalid
arguments or configuration, and 1 for missing inputs or runtime failures.
Files written by a failing command are removed.
"""

import argparse
import json
import math
import os
import sys

import numpy as np
from pydantic import ValidationError

from .bench import cross_population_eval, generate_population
from .config import load_config
from .core import empirical_kl, is_weights, log_is_weights
from .exceptions import DegenerateInputError, DomainError
from .io import load_model, save_model, write_hard_pairs, write_pairs, write_report, write_top_weights, write_trace
from .oracle import solve_inner_max_ascent, solve_inner_max_grid, temperature_for_budget
from .training import train

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _parse_losses(text):
    try:
        values = [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"could not parse losses {text!r}; expected comma-separated numbers") from None
    if not all(math.isfinite(v) for v in values):
        raise UsageError("losses must be finite")
    return np.array(values)


def _fmt_weights(w):
    return ",".join(f"{v:.4f}" for v in w)


def cmd_weights(args, out):
    L = _parse_losses(args.losses)
    if not (math.isfinite(args.temp) and args.temp > 0):
        raise UsageError(f"temperature must be positive, got {args.temp!r}")
    if args.kind == "is":
        w = is_weights(L, args.temp)
    else:
        clamp = args.clamp_eps is not None
        w = log_is_weights(L, args.temp, clamp=clamp, eps=args.clamp_eps if clamp else 1e-12)
    out.write(_fmt_weights(w) + "\n")
    out.write(f"kl,{empirical_kl(w):.6f}\n")
    return []


def _closed_form(L, budget):
    """Softmax solution at the budget's temperature, with its degenerate regimes spelled out."""
    n = L.size
    if budget == 0.0:
        return np.full(n, 1.0 / n), math.inf, "uniform"
    try:
        bt = temperature_for_budget(L, budget)
    except DegenerateInputError:
        return np.full(n, 1.0 / n), math.inf, "uniform"
    if bt.regime == "point-mass":
        w = np.zeros(n)
        w[int(np.argmax(L))] = 1.0
        return w, 0.0, bt.regime
    if bt.regime == "uniform":
        return np.full(n, 1.0 / n), math.inf, bt.regime
    return is_weights(L, bt.temp), bt.temp, bt.regime


def cmd_oracle(args, out):
    L = _parse_losses(args.losses)
    if not (math.isfinite(args.budget) and args.budget >= 0):
        raise UsageError(f"budget must be nonnegative, got {args.budget!r}")
    rows = []
    methods = ["grid", "ascent"] if args.method == "both" else [args.method]
    for m in methods:
        if m == "grid":
            sol = solve_inner_max_grid(L, args.budget, resolution=args.resolution)
        else:
            sol = solve_inner_max_ascent(L, args.budget, iters=args.iters)
        rows.append((sol.method, sol.objective, sol.kl, sol.regime, "", sol.weights))
    w, temp, regime = _closed_form(L, args.budget)
    closed = float(np.dot(L, w))
    rows.append(("closed-form", closed, empirical_kl(w), regime, repr(temp), w))
    out.write("method,objective,kl,regime,temp,weights\n")
    for method, obj, kl, reg, t, wts in rows:
        out.write(f"{method},{obj:.10g},{kl:.10g},{reg},{t},{';'.join(f'{v:.6f}' for v in wts)}\n")
    for method, obj, *_ in rows[:-1]:
        out.write(f"delta_{method},{closed - obj:.3e}\n")
    if args.budget > math.log(L.size):
        out.write("note,budget exceeds log N; point-mass regime\n")
    return []


def cmd_train(args, out):
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
    data = generate_population(cfg.train_spec())
    os.makedirs(cfg.out_dir, exist_ok=True)
    params, traces = train(data.X, data.y, cfg.train_config(), cfg.margin_config())
    paths = {name: os.path.join(cfg.out_dir, name) for name in ("model.txt", "trace.csv", "top_weights.csv")}
    written = []
    try:
        save_model(params, paths["model.txt"])
        written.append(paths["model.txt"])
        write_trace(traces, paths["trace.csv"])
        written.append(paths["trace.csv"])
        write_top_weights(traces, paths["top_weights.csv"])
        written.append(paths["top_weights.csv"])
    except BaseException as exc:
        exc.partial_outputs = written + [p for p in paths.values() if p not in written]
        raise
    out.write(f"wrote {', '.join(written)}\n")
    return written


def cmd_eval(args, out):
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
    if not os.path.exists(args.model):
        raise FileNotFoundError(args.model)
    params = load_model(args.model)
    specs = cfg.population_specs()
    if params.n_inputs != specs[0].n_inputs:
        raise DomainError(f"model expects {params.n_inputs} inputs, populations have {specs[0].n_inputs}")
    p = cfg.pairs
    result = cross_population_eval(
        params,
        specs,
        far_levels=tuple(p.far_levels),
        positives_per_class=p.positives_per_class,
        negatives_total=p.negatives_total,
        seed=cfg.seed,
        hard_k=p.hard_k,
        n_positive=p.n_positive,
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    targets = [os.path.join(cfg.out_dir, "report.csv")]
    for s in specs:
        targets += [os.path.join(cfg.out_dir, f"hard_pairs_{s.name}.csv"), os.path.join(cfg.out_dir, f"pairs_{s.name}.csv")]
    try:
        write_report(result.reports, p.far_levels, targets[0])
        for s in specs:
            write_hard_pairs(result.reports[s.name], os.path.join(cfg.out_dir, f"hard_pairs_{s.name}.csv"))
            write_pairs(result.pairs[s.name], os.path.join(cfg.out_dir, f"pairs_{s.name}.csv"))
    except BaseException as exc:
        exc.partial_outputs = targets
        raise
    out.write(f"wrote {targets[0]} and per-population hard-pair and pair files\n")
    return targets


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (overrides the config)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (overrides the config)")

    parser = argparse.ArgumentParser(prog="isloss", description="Importance-sampling robust losses.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("weights", parents=[common], help="IS or log-IS weights of a loss vector")
    w.add_argument("--losses", required=True, help="comma-separated per-sample losses")
    w.add_argument("--temp", type=float, required=True)
    w.add_argument("--kind", choices=("is", "logis"), default="is")
    w.add_argument("--clamp-eps", type=float, default=None, help="floor losses at this value (log-IS only)")
    w.set_defaults(func=cmd_weights)

    o = sub.add_parser("oracle", parents=[common], help="solve the KL-constrained inner maximization")
    o.add_argument("--losses", required=True)
    o.add_argument("--budget", type=float, required=True, help="KL budget C")
    o.add_argument("--method", choices=("grid", "ascent", "both"), default="both")
    o.add_argument("--resolution", type=int, default=400)
    o.add_argument("--iters", type=int, default=100)
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("train", parents=[common], help="train on the config's training population")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="verify a trained model on every population")
    e.add_argument("model")
    e.add_argument("config")
    e.set_defaults(func=cmd_eval)
    return parser


def _cleanup(paths):
    for p in paths:
        try:
            os.remove(p)
        except FileNotFoundError:
            pass


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    args.seed = getattr(args, "seed", None)
    args.out_dir = getattr(args, "out_dir", None)
    try:
        args.func(args, out)
    except (UsageError, DomainError, ValidationError, json.JSONDecodeError) as exc:
        _cleanup(getattr(exc, "partial_outputs", []))
        print(f"isloss {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _cleanup(getattr(exc, "partial_outputs", []))
        print(f"isloss {args.command}: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        _cleanup(getattr(exc, "partial_outputs", []))
        print(f"isloss {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
