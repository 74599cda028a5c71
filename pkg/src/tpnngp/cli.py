"""``tpnngp`` command line.

Exit codes: 0 success, 2 bad flags/config/data, 3 numerical failure,
4 divergence during training, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import workflows as wf
from .finitenet import DivergenceError

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_PARSE = 2
EXIT_NUMERICAL = 3
EXIT_DIVERGENCE = 4

THEOREMS = ("prior", "readout", "fullgd", "lemmab3", "ntkkernel")


def _limit_threads():
    raw = os.environ.get("TPNNGP_THREADS")
    if not raw:
        return None
    n = wf.worker_count()
    import torch
    from threadpoolctl import threadpool_limits

    torch.set_num_threads(n)
    return threadpool_limits(limits=n)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its fields")
    common.add_argument("--seed", type=int, help="non-negative integer seed")
    common.add_argument("--data", help="CSV file with a header row")
    common.add_argument("--target", help="target column name or index (default: last)")
    common.add_argument("--prior", help="invgamma:a,b | burr:c,k | point:s")
    common.add_argument("--inference", help="exact | is:N | svgp | svtp")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--noise", type=float, help="observation noise variance added to the training block")
    common.add_argument("--depth", type=int, help="number of hidden layers")
    common.add_argument("--activation", choices=["erf", "relu"])
    common.add_argument("--weight-variance", type=float)
    common.add_argument("--bias-variance", type=float)

    p = _Parser(prog="tpnngp", description="Scale mixtures of NNGPs: kernels, regression, SV classification and limit checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    k = sub.add_parser("kernel", parents=[common], help="export NNGP or NTK gram blocks")
    k.add_argument("--kind", choices=["nngp", "ntk"], default="nngp")
    sub.add_parser("regress", parents=[common], help="exact or importance-sampled regression")
    c = sub.add_parser("classify-sv", parents=[common], help="SVGP / SVTP classification")
    c.add_argument("--steps", type=int)
    c.add_argument("--inducing", type=int)
    v = sub.add_parser("verify", parents=[common], help="finite-width vs limit KS checks")
    v.add_argument("theorem", type=str.lower, choices=THEOREMS)
    v.add_argument("--width", type=int)
    v.add_argument("--nets", type=int)
    v.add_argument("--gd-c", type=float, help="Euler step as a fraction of K / lambda_max")
    v.add_argument("--samples", type=int, help="draws for lemmab3")
    v.add_argument("--negative-control", action="store_true", help="compare against dof 2a + 1")
    sub.add_parser("grid", parents=[common], help="validation-NLL grid search, then one test evaluation")
    return p


def _config(args) -> wf.ExperimentConfig:
    network = {}
    for flag, key in (("depth", "depth"), ("activation", "activation"), ("weight_variance", "weight_variance"), ("bias_variance", "bias_variance")):
        val = getattr(args, flag, None)
        if val is not None:
            network[key] = val
    options = {}
    for flag, key in (("width", "width"), ("nets", "n_nets"), ("gd_c", "gd_c"), ("samples", "lemma_samples"), ("steps", "steps"), ("inducing", "n_inducing"), ("target", "target")):
        val = getattr(args, flag, None)
        if val is not None:
            options[key] = val
    if getattr(args, "negative_control", False):
        options["negative_control"] = True
    over = dict(prior=args.prior, inference=args.inference, noise_variance=args.noise, seed=args.seed, network=network, options=options)
    if args.command == "classify-sv" and args.inference is None and not args.config:
        over["inference"] = "svgp"
    if args.config:
        return wf.ExperimentConfig.from_json(args.config, **over)
    return wf.ExperimentConfig.from_dict({}, **over)


def _dataset(args, cfg, kind):
    if not args.data:
        raise wf.ConfigError(f"{args.command} needs --data")
    return wf.load_csv(args.data, cfg.opt("target"), tuple(cfg.opt("ratios")), cfg.seed, kind)


def run(argv=None) -> int:
    """Execute one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_PARSE
    limits = None
    try:
        limits = _limit_threads()
        cfg = _config(args)
        if args.command == "kernel":
            ds = _dataset(args, cfg, "regression")
            path, _ = wf.export_kernel(cfg, ds, args.kind, args.out)
            result = {"sidecar": str(path)}
        elif args.command == "regress":
            result, _ = wf.run_regression(cfg, _dataset(args, cfg, "regression"), args.out)
        elif args.command == "classify-sv":
            result, _ = wf.run_classification_sv(cfg, _dataset(args, cfg, "classification"), args.out)
        elif args.command == "verify":
            result = wf.run_verify(cfg, args.theorem, args.out)
        else:
            result, _ = wf.run_grid(cfg, _dataset(args, cfg, "regression"), args.out)
    except wf.ConfigError as err:
        print(f"tpnngp: error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as err:
        print(f"tpnngp: diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ArithmeticError, np.linalg.LinAlgError) as err:
        print(f"tpnngp: numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if limits is not None:
            limits.unregister()
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
