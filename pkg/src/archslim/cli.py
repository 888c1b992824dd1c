"""Command-line front end: analyze, plan, prune, stats, student.

Exit codes: 0 on success, 1 for usage errors, 2 for data errors (anything
derived from ArchslimError). Diagnostics go to stderr; results go to the
requested output file or stdout.
"""

from __future__ import annotations

import argparse
import pathlib
import sys

from . import __version__
from .canonical import canonical_json, write_text_atomic
from .errors import ArchslimError, EmptyNetwork, IoFailure, ZeroVariance
from .model_stats import (
    ModelStats,
    architecture_from_network,
    count_stats,
    curve_csv,
    reduction_report,
)
from .prune_engine import Criterion, prune_network, survivor_sets
from .slim_planner import (
    ArchitecturePlan,
    CouplingPolicy,
    plan_architecture,
    plan_from_json,
    plan_to_json,
    search_delta_for_target,
    student_manifest,
)
from .spectral_core import analyze_layer
from .weights_io import NetworkWeights, read_weights, write_weights

PROG = "3as"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _warn(text: str) -> None:
    print(f"{PROG}: warning: {text}", file=sys.stderr)


def _delta_value(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _input_shape(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(
            f"expected C,H,W positive integers, got {text!r}"
        )
    return dims


def _target_value(text: str) -> tuple[str, float]:
    metric, sep, ratio_text = text.partition(":")
    if not sep or metric not in ("params", "flops", "filters"):
        raise argparse.ArgumentTypeError(
            f"expected params:R, flops:R or filters:R, got {text!r}"
        )
    try:
        ratio = float(ratio_text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number after ':', got {text!r}")
    if not 0.0 < ratio < 1.0:
        raise argparse.ArgumentTypeError(
            f"target ratio must be in (0, 1), got {ratio_text}"
        )
    return metric, ratio


def _override(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=DELTA, got {text!r}")
    return name, _delta_value(value)


def _add_analysis_flags(sub, with_target: bool = False) -> None:
    if with_target:
        group = sub.add_mutually_exclusive_group()
        group.add_argument(
            "--delta", type=_delta_value, default=None,
            help="variance threshold in [0, 1] (default 0.95)",
        )
        group.add_argument(
            "--target", type=_target_value, default=None, metavar="METRIC:RATIO",
            help="search delta so the remaining params/flops/filters "
            "fraction hits RATIO",
        )
    else:
        sub.add_argument(
            "--delta", type=_delta_value, default=None,
            help="variance threshold in [0, 1] (default 0.95)",
        )
    sub.add_argument(
        "--zscore", action="store_true",
        help="standardize filter rows before the eigen analysis",
    )
    sub.add_argument(
        "--delta-override", type=_override, action="append", default=[],
        metavar="NAME=DELTA", help="per-layer threshold override (repeatable)",
    )


def _add_plan_source(sub) -> None:
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--plan", help="read the slimming plan from this JSON file")
    group.add_argument(
        "--delta", type=_delta_value, default=None,
        help="plan inline at this threshold (default 0.95)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description="spectral CNN slimming toolkit")
    parser.add_argument(
        "--version", action="version", version=f"{PROG} {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="per-layer eigenvalue contribution curves")
    p.add_argument("weights", help="input .nwf weight file")
    _add_analysis_flags(p)
    p.add_argument("-o", "--output", help="write curves CSV here (default stdout)")
    p.add_argument("--report", help="also write a JSON summary here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="kept-filter budget for every conv layer")
    p.add_argument("weights", help="input .nwf weight file")
    _add_analysis_flags(p, with_target=True)
    p.add_argument(
        "--coupling", choices=[c.value for c in CouplingPolicy], default="max",
        help="how coupled layers agree on a shared count (default max)",
    )
    p.add_argument(
        "--input-shape", type=_input_shape, default=(3, 32, 32), metavar="C,H,W",
        help="network input shape for --target params/flops (default 3,32,32)",
    )
    p.add_argument("-o", "--output", help="write plan JSON here (default stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("prune", help="rewrite weights with losing filters removed")
    p.add_argument("weights", help="input .nwf weight file")
    _add_plan_source(p)
    p.add_argument(
        "--criterion", choices=[c.value for c in Criterion], default="l1",
        help="filter importance measure (default l1)",
    )
    p.add_argument(
        "--coupling", choices=[c.value for c in CouplingPolicy], default="max",
        help="coupled-layer policy for inline plans (default max)",
    )
    p.add_argument(
        "--zscore", action="store_true",
        help="standardize filter rows for inline plans",
    )
    p.add_argument(
        "--delta-override", type=_override, action="append", default=[],
        metavar="NAME=DELTA", help="per-layer threshold for inline plans",
    )
    p.add_argument(
        "--audit", help="write the surviving filter indices as JSON here"
    )
    p.add_argument("-o", "--output", required=True, help="write slim .nwf here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("stats", help="parameter and flop counts")
    p.add_argument("weights", help="input .nwf weight file")
    p.add_argument(
        "--input-shape", type=_input_shape, default=(3, 32, 32), metavar="C,H,W",
        help="network input shape (default 3,32,32)",
    )
    p.add_argument(
        "--macs", action="store_true",
        help="report multiply-accumulates instead of flops",
    )
    p.add_argument(
        "--after", help="second .nwf file; print the reduction between the two"
    )
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("student", help="architecture manifest for the slim network")
    p.add_argument("weights", help="input .nwf weight file")
    _add_plan_source(p)
    p.add_argument(
        "--coupling", choices=[c.value for c in CouplingPolicy], default="max",
        help="coupled-layer policy for inline plans (default max)",
    )
    p.add_argument(
        "--zscore", action="store_true",
        help="standardize filter rows for inline plans",
    )
    p.add_argument(
        "--delta-override", type=_override, action="append", default=[],
        metavar="NAME=DELTA", help="per-layer threshold for inline plans",
    )
    p.add_argument("-o", "--output", help="write manifest JSON here (default stdout)")
    p.set_defaults(func=cmd_student)

    return parser


def _emit(text: str, output: str | None) -> None:
    if output:
        write_text_atomic(output, text)
    else:
        sys.stdout.write(text)


def _load_plan_file(path: str) -> ArchitecturePlan:
    try:
        text = pathlib.Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read plan {path!r}: {exc}") from exc
    return plan_from_json(text)


def _resolve_plan(args, net: NetworkWeights) -> ArchitecturePlan:
    if getattr(args, "plan", None):
        return _load_plan_file(args.plan)
    delta = args.delta if args.delta is not None else 0.95
    plan = plan_architecture(
        net,
        delta,
        CouplingPolicy(args.coupling),
        args.zscore,
        dict(args.delta_override),
    )
    _emit_plan_warnings(plan)
    return plan


def _emit_plan_warnings(plan: ArchitecturePlan) -> None:
    for entry in plan.entries:
        for note in entry.warnings:
            _warn(f"{entry.layer_name}: {note}")


def cmd_analyze(args) -> int:
    net = read_weights(args.weights)
    if not net.conv_layers():
        raise EmptyNetwork("network contains no conv layers")
    overrides = dict(args.delta_override)
    default_delta = args.delta if args.delta is not None else 0.95
    spectra = []
    summary = []
    for rec in net.conv_layers():
        delta = overrides.get(rec.name, default_delta)
        try:
            spectrum = analyze_layer(
                net.tensor(rec.name), delta, rec.name, zscore=args.zscore
            )
        except ZeroVariance:
            _warn(f"layer {rec.name!r} has zero variance; omitted")
            continue
        spectra.append(spectrum)
        summary.append(
            {
                "layer": rec.name,
                "filters": rec.shape[0],
                "selected": spectrum.selected,
                "delta": delta,
                "info_measure": spectrum.info_measure,
                "alpha": [float(a) for a in spectrum.alpha],
            }
        )
    if not spectra:
        raise ZeroVariance("every conv layer has zero variance")
    _emit(curve_csv(spectra), args.output)
    if args.report:
        write_text_atomic(args.report, canonical_json({"layers": summary}) + "\n")
    return 0


def cmd_plan(args) -> int:
    net = read_weights(args.weights)
    policy = CouplingPolicy(args.coupling)
    if args.target is not None:
        metric, ratio = args.target
        result = search_delta_for_target(
            net,
            metric,
            ratio,
            input_shape=args.input_shape,
            policy=policy,
            zscore=args.zscore,
        )
        plan = result.plan
        print(
            f"{PROG}: delta {result.delta:.10g} leaves "
            f"{result.achieved_remaining:.4f} of {metric}",
            file=sys.stderr,
        )
        if not result.within_tolerance:
            _warn(
                f"target {metric} ratio {ratio} missed by more than 0.005 "
                f"(achieved {result.achieved_remaining:.4f})"
            )
    else:
        delta = args.delta if args.delta is not None else 0.95
        plan = plan_architecture(
            net, delta, policy, args.zscore, dict(args.delta_override)
        )
    _emit_plan_warnings(plan)
    _emit(plan_to_json(plan) + "\n", args.output)
    return 0


def cmd_prune(args) -> int:
    net = read_weights(args.weights)
    plan = _resolve_plan(args, net)
    criterion = Criterion(args.criterion)
    slim = prune_network(net, plan, criterion)
    write_weights(slim, args.output)
    if args.audit:
        survivors = survivor_sets(net, plan, criterion)
        audit = {
            "criterion": criterion.value,
            "layers": {
                name: [int(i) for i in idx] for name, idx in survivors.items()
            },
        }
        write_text_atomic(args.audit, canonical_json(audit) + "\n")
    return 0


def _stats_text(stats: ModelStats) -> str:
    width = max([len(s.layer_name) for s in stats.per_layer] + [5]) + 2
    lines = [f"{'layer':<{width}}{'params':>14}{'flops':>18}"]
    for s in stats.per_layer:
        lines.append(f"{s.layer_name:<{width}}{s.params:>14}{s.flops:>18}")
    lines.append(f"{'TOTAL':<{width}}{stats.total_params:>14}{stats.total_flops:>18}")
    return "\n".join(lines) + "\n"


def cmd_stats(args) -> int:
    net = read_weights(args.weights)
    stats = count_stats(architecture_from_network(net), args.input_shape, args.macs)
    if args.after:
        after_net = read_weights(args.after)
        after = count_stats(
            architecture_from_network(after_net), args.input_shape, args.macs
        )
        report = reduction_report(stats, after)
        text = (
            canonical_json(report.to_json_obj()) + "\n"
            if args.json
            else report.to_text()
        )
    else:
        text = canonical_json(stats.to_json_obj()) + "\n" if args.json else _stats_text(stats)
    sys.stdout.write(text)
    return 0


def cmd_student(args) -> int:
    net = read_weights(args.weights)
    plan = _resolve_plan(args, net)
    manifest = student_manifest(plan, net)
    _emit(canonical_json(manifest) + "\n", args.output)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArchslimError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
