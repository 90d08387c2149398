"""Command-line entry point.

Exit status is 0 on success, 1 on I/O failure or a failed gradient check and
2 on a usage error or an invalid config.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import harness, nn
from .exceptions import ConfigError, DomainError, IDXParseError

logger = logging.getLogger("rct")

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_SAMPLES = 8


@dataclass(frozen=True)
class Command:
    name: str
    config: str = None
    out: str = None
    values: tuple = ()
    seed: int = None
    policy_off: bool = False
    jobs: int = 1
    seeds: int = harness.DEFAULT_SEEDS
    run_dir: str = None


def _floats(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("values list is empty")
    return vals


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    """Print the full help, not just the usage line, on a usage error."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(
        prog="rct", description="Quantized training with per-tensor adaptive bitwidths.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log policy decisions")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train one model and write report.json + history")
    p.add_argument("config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--policy-off", action="store_true", help="keep the initial bitwidth fixed")

    sweeps = {"sweep-tmin": (_floats, "t_min values"),
              "sweep-init": (_ints, "initial bitwidths"),
              "sweep-batch": (_ints, "batch sizes")}
    for name, (parse, what) in sweeps.items():
        p = sub.add_parser(name, help=f"multi-seed sweep over {what}")
        p.add_argument("config")
        p.add_argument("--values", type=parse, required=True, help=f"comma-separated {what}")
        p.add_argument("-o", "--out", required=True)
        p.add_argument("--seed", type=int, help="first seed (default: the config's)")
        p.add_argument("--seeds", type=_positive, default=harness.DEFAULT_SEEDS,
                       help="number of seeds per value")
        p.add_argument("--jobs", type=_positive, default=1, help="parallel runs")

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("config")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("run_dir")
    return parser


def parse_args(argv):
    args = build_parser().parse_args(argv)
    kw = {"name": args.command}
    if args.command == "report":
        kw["run_dir"] = args.run_dir
    else:
        kw.update(config=args.config, seed=args.seed)
    if args.command == "train":
        kw.update(out=args.out, policy_off=args.policy_off)
    elif args.command.startswith("sweep-"):
        kw.update(out=args.out, values=args.values, jobs=args.jobs, seeds=args.seeds)
    return Command(**kw), args.verbose


def _load(cmd):
    config = harness.load_config(cmd.config)
    if cmd.seed is not None:
        config = replace(config, seed=cmd.seed)
    if cmd.policy_off:
        config = config.policy_off()
    return config


def _train(cmd):
    report = harness.run(_load(cmd), cmd.out)
    print(f"test accuracy {report.final_accuracy:.4f}, "
          f"weighted average bitwidth {report.weighted_avg_bitwidth:.3f}")
    print(f"wrote {os.path.join(cmd.out, harness.REPORT_FILE)}")
    return 0


def _sweep(cmd):
    config = _load(cmd)
    fn = {"sweep-tmin": harness.sweep_tmin, "sweep-init": harness.sweep_init_bitwidth,
          "sweep-batch": harness.sweep_batch_size}[cmd.name]
    seeds = [config.seed + i for i in range(cmd.seeds)]
    result = fn(config, cmd.values, seeds=seeds, jobs=cmd.jobs, out_dir=cmd.out)
    sys.stdout.write(result.to_csv())
    for key, value in result.summary.items():
        print(f"{key}: {value:.4g}")
    return 0


def _gradcheck(cmd):
    config = _load(cmd)
    data = harness.load_dataset(config.dataset)
    rng = np.random.default_rng(config.seed)
    model = nn.build_model(config.model, data.input_shape, 32, rng, act_bits=None)
    weights = nn.init_weights(model.layers, rng)
    n = min(GRADCHECK_SAMPLES, len(data.X_train))
    result = nn.gradient_check(model, data.X_train[:n], data.y_train[:n], weights)
    print(f"max relative gradient error: {result.max_rel_error:.3e} "
          f"({result.n_checked} checked, {result.n_skipped} skipped at ReLU kinks)")
    return 0 if result.max_rel_error <= GRADCHECK_TOLERANCE else 1


def format_report(report):
    e = report["energy"]
    m = report["memory"]
    lines = [
        f"{'test accuracy':<34}{report['final_accuracy']:.4f}",
        f"{'weighted average bitwidth':<34}{report['weighted_avg_bitwidth']:.3f}",
        f"{'parameter memory vs fp32':<34}{m['normalized_vs_fp32']:.4f}",
        f"{'GEMM energy (fp32 MAC equiv)':<34}{e['gemm_fp32_mac_equiv']:.6g}",
        f"{'GEMM energy vs fp32':<34}{e['gemm_ratio_vs_fp32']:.4f}",
        f"{'forward-only GEMM vs fp32':<34}{e['forward_ratio_vs_fp32']:.4f}",
        f"{'movement (fp32 model equiv)':<34}{e['movement_fp32_param_equiv']:.6g}",
        f"{'movement vs fp32':<34}{e['movement_ratio_vs_fp32']:.4f}",
        "",
        f"{'tensor':<24}{'bits':>6}",
    ]
    lines += [f"{name:<24}{k:>6}" for name, k in report["per_layer_bitwidth"].items()]
    return "\n".join(lines)


def _report(cmd):
    with open(os.path.join(cmd.run_dir, harness.REPORT_FILE), encoding="utf-8") as f:
        report = json.load(f)
    print(format_report(report))
    return 0


_HANDLERS = {"train": _train, "sweep-tmin": _sweep, "sweep-init": _sweep,
             "sweep-batch": _sweep, "gradcheck": _gradcheck, "report": _report}


def execute(cmd):
    try:
        return _HANDLERS[cmd.name](cmd)
    except FileNotFoundError as exc:
        if cmd.config is not None and exc.filename == cmd.config:
            print(f"rct: error: config not found: {cmd.config}", file=sys.stderr)
            return 2
        print(f"rct: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DomainError) as exc:
        print(f"rct: error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, IDXParseError, KeyError, json.JSONDecodeError) as exc:
        print(f"rct: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    try:
        cmd, verbose = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return execute(cmd)


if __name__ == "__main__":
    sys.exit(main())
