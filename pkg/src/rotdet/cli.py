"""Command-line entry point: ``rotdet <subcommand> [options]``.

Reports go to ``--out`` (or stdout) as JSON or CSV. Every failure exits
nonzero and writes ``{"error": {"type": ..., "message": ...}}`` to stderr.
"""
import argparse
import json
import sys
import time

import numpy as np

from . import _backend, harness
from .decoder import DecoderConfig, save_params
from .errors import ConfigError, DimensionError, InfeasibleError, NumericError, StateError, UsageError
from .matching import hungarian
from .oracles import brute_force_assignment, monte_carlo_iou
from .rotgeom import rotated_iou
from .tensorcore import make_rng


class CliError(Exception):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _common(p):
    p.add_argument("--config", help="scenario config file (JSON, or TOML with a .toml suffix)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def build_parser():
    parser = _Parser(prog="rotdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("match", help="compare stage-wise and momentum matching on a synthetic trajectory")
    _common(p)
    p.add_argument("--matcher", choices=harness.MATCHERS)
    p.add_argument("--alpha", type=float, help="momentum sensitivity to class-distribution change")
    p.add_argument("--fixed-eta", type=float, help="use this constant smoothing factor instead of adaptive ones")
    p.add_argument("--batch", type=int, default=0, help="run this many consecutive seeds and report mean shift rates")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for --batch")

    p = sub.add_parser("decode", help="run the decoder forward on synthetic inputs")
    _common(p)
    p.add_argument("--paper-scale", action="store_true", help="N=500, C=256, K=7, M=8, S=6 shape smoke run")
    p.add_argument("--save-params", help="write the decoder parameters to this .npz checkpoint")
    p.add_argument("--embeddings", action="store_true", help="include query embeddings in the report")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients of the geometry augmentation")
    _common(p)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--roi-size", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--zero-filter", action="store_true")

    p = sub.add_parser("iou-oracle", help="rotated IoU vs stratified Monte-Carlo estimate")
    _common(p)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--tolerance", type=float, default=2e-3)

    p = sub.add_parser("hungarian-oracle", help="assignment solver vs exhaustive enumeration")
    _common(p)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--max-queries", type=int, default=7)
    return parser


def _config(args):
    cfg = harness.load_config(args.config) if args.config else harness.ScenarioConfig()
    return cfg.with_overrides(
        seed=args.seed,
        matcher=getattr(args, "matcher", None),
        alpha=getattr(args, "alpha", None),
        fixed_eta=getattr(args, "fixed_eta", None),
    )


def _cmd_match(args):
    cfg = _config(args)
    if args.batch:
        return harness.run_batch(cfg, range(cfg.seed, cfg.seed + args.batch), args.jobs)
    return harness.run_experiment(cfg)


def _cmd_decode(args):
    cfg = _config(args)
    if args.paper_scale:
        import dataclasses

        cfg = dataclasses.replace(cfg, decoder=DecoderConfig.paper_scale(cfg.decoder.num_classes), feature_size=(64, 64))
    report, _, params = harness.run_decode(cfg, include_embeddings=args.embeddings)
    if args.save_params:
        save_params(args.save_params, params)
        report["checkpoint"] = args.save_params
    return report


def _cmd_gradcheck(args):
    cfg = _config(args)
    return harness.run_gradcheck_suite(
        seed=cfg.seed, draws=args.draws, channels=args.channels, roi_size=args.roi_size,
        h=args.step, zero_filter=args.zero_filter,
    )


def _cmd_iou_oracle(args):
    cfg = _config(args)
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    rows = []
    for k in range(args.pairs):
        a = _random_box(rng)
        b = _random_box(rng, near=a)
        exact = rotated_iou(a, b)
        est = monte_carlo_iou(a, b, args.samples, seed=cfg.seed * 100003 + k)
        rows.append({"a": a.tolist(), "b": b.tolist(), "iou": exact, "monte_carlo": est, "abs_error": abs(exact - est)})
    worst = max((r["abs_error"] for r in rows), default=0.0)
    return {
        "format_version": harness.FORMAT_VERSION,
        "kind": "iou-oracle",
        "seed": cfg.seed,
        "samples": args.samples,
        "pairs": rows,
        "max_abs_error": worst,
        "tolerance": args.tolerance,
        "passed": worst <= args.tolerance,
        "runtime_seconds": time.perf_counter() - t0,
    }


def _random_box(rng, near=None):
    if near is None:
        c = rng.uniform(-5.0, 5.0, 2)
    else:
        c = near[:2] + rng.uniform(-2.0, 2.0, 2)
    return np.array([c[0], c[1], rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0), rng.uniform(-np.pi / 2, np.pi / 2)])


def _cmd_hungarian_oracle(args):
    cfg = _config(args)
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    mismatches = 0
    trials = []
    for _ in range(args.trials):
        n = int(rng.integers(1, args.max_queries + 1))
        g = int(rng.integers(0, n + 1))
        cost = rng.uniform(-1.0, 1.0, (n, g))
        solved = hungarian(cost).total_cost
        best, _ = brute_force_assignment(cost)
        equal = solved == best
        mismatches += not equal
        trials.append({"shape": [n, g], "solver": solved, "brute_force": best, "equal": equal})
    return {
        "format_version": harness.FORMAT_VERSION,
        "kind": "hungarian-oracle",
        "seed": cfg.seed,
        "backend": _backend.NAME,
        "trials": trials,
        "mismatches": mismatches,
        "passed": mismatches == 0,
        "runtime_seconds": time.perf_counter() - t0,
    }


COMMANDS = {
    "match": _cmd_match,
    "decode": _cmd_decode,
    "gradcheck": _cmd_gradcheck,
    "iou-oracle": _cmd_iou_oracle,
    "hungarian-oracle": _cmd_hungarian_oracle,
}

_USAGE_ERRORS = (CliError, ConfigError, UsageError)
_RUN_ERRORS = (DimensionError, InfeasibleError, NumericError, StateError, ValueError, IndexError, OSError)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": str(message)}}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        report = COMMANDS[args.command](args)
        text = harness.to_csv(report) if args.format == "csv" else harness.to_json(report) + "\n"
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    except _USAGE_ERRORS as exc:
        return _fail(type(exc).__name__, exc, 2)
    except _RUN_ERRORS as exc:
        return _fail(type(exc).__name__, exc, 1)
    if isinstance(report, dict) and report.get("passed") is False:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
