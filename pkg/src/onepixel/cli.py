"""``onepixel`` command line.

Exit codes: 0 success (or campaign completed), 1 attack failed or converged
early, 2 usage/input/oracle error, 3 campaign stopped by its time budget.
JSON goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .attack import AttackConfig, AttackDirection, AttackError, run_attack
from .campaign import (
    SchemaError,
    build_report,
    emit_plots,
    filter_dataset,
    load_manifest,
    read_results,
    run_campaign,
    summary_lines,
    write_manifest,
    write_stats,
    write_trace_csv,
)
from .evolution import ConfigError, DeConfig
from .imaging import apply_perturbation, read_png, write_png
from .oracle import DEFAULT_ENDPOINT, DEFAULT_FIELD_PATH, CachedOracle, HttpOracle, parse_oracle_spec
from .png import PngError

log = logging.getLogger("onepixel")

EXIT_OK, EXIT_FAILED, EXIT_ERROR, EXIT_TRUNCATED = 0, 1, 2, 3

_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> float:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r} (e.g. 30s, 5m, 2h, 5d)")
    return float(m.group(1)) * _UNITS[m.group(2)]


def _direction(text: str) -> AttackDirection:
    try:
        return AttackDirection.parse(text)
    except (KeyError, ValueError):
        raise argparse.ArgumentTypeError(f"unknown direction {text!r}") from None


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_oracle_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("oracle")
    src = g.add_mutually_exclusive_group()
    src.add_argument(
        "--endpoint",
        default=None,
        help=f"model URL; falls back to $ONEPIXEL_ENDPOINT, then {DEFAULT_ENDPOINT}",
    )
    src.add_argument(
        "--oracle",
        default=None,
        help="in-process synthetic oracle, e.g. planted:base=0.97,trigger=255-255-0,w=0.5,delta=-0.95 "
        "| darkness:threshold=0.5,steepness=10 | constant:0.42",
    )
    g.add_argument(
        "--field-path",
        default=None,
        help=f"JSON path to the score; falls back to $ONEPIXEL_FIELD_PATH, then {DEFAULT_FIELD_PATH}",
    )
    g.add_argument("--timeout", type=float, default=30.0, help="HTTP timeout in seconds")
    g.add_argument("--retries", type=int, default=2, help="HTTP retries on transport errors and 5xx")
    g.add_argument("--cache-size", type=int, default=65536, help="LRU score cache entries")


def _add_de_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("differential evolution")
    g.add_argument("--np", type=int, default=200, dest="np", help="population size")
    g.add_argument("--f", type=float, default=0.5, dest="f", help="mutation factor")
    g.add_argument("--cr", type=float, default=0.7, dest="cr", help="recombination factor")
    g.add_argument("--max-iter", type=int, default=100, help="maximum generations")
    g.add_argument("--tol", type=float, default=0.01, help="relative convergence tolerance")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    t = p.add_argument_group("outcome thresholds")
    t.add_argument("--success-threshold", type=float, default=0.5, help="score to cross for success")
    t.add_argument(
        "--strong-threshold",
        type=float,
        default=None,
        help="score to cross for strong success (None: 0.05 when minimizing, 0.95 when maximizing)",
    )
    t.add_argument(
        "--early-stop",
        action="store_true",
        help="stop evolving once the strong threshold is crossed",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onepixel",
        description="One-pixel black-box attacks on image classifiers.",
        formatter_class=_Formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("attack", help="attack one image", formatter_class=_Formatter)
    p.add_argument("image", type=Path, help="PNG to attack")
    p.add_argument("--direction", type=_direction, default="mitosis_to_normal",
                   help="mitosis_to_normal (minimize) or normal_to_mitosis (maximize)")
    p.add_argument("--out", type=Path, default=None,
                   help="directory for the adversarial PNG and trace CSV")
    _add_oracle_flags(p)
    _add_de_flags(p)

    p = sub.add_parser("campaign", help="filter and attack a labelled tile set",
                       formatter_class=_Formatter)
    p.add_argument("source", type=Path, help="directory with mitosis/ and normal/ or a CSV manifest")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument("--direction", choices=["both", "mitosis_to_normal", "normal_to_mitosis"],
                   default="both", help="which attacks to run")
    p.add_argument("--parallel", type=int, default=1, help="concurrent attacks")
    p.add_argument("--budget", type=parse_duration, default=None,
                   help="wall-clock limit after which no new attack starts (e.g. 5d)")
    p.add_argument("--mitosis-min", type=float, default=0.9, help="keep mitosis tiles scoring at least this")
    p.add_argument("--normal-max", type=float, default=0.1, help="keep normal tiles scoring at most this")
    p.add_argument("--no-filter", action="store_true", help="attack every tile regardless of score")
    p.add_argument("--plot-traces", nargs="*", default=[], metavar="IMAGE_ID",
                   help="image ids whose convergence traces are rendered")
    _add_oracle_flags(p)
    _add_de_flags(p)

    p = sub.add_parser("filter", help="score a tile set and keep unambiguous tiles",
                       formatter_class=_Formatter)
    p.add_argument("source", type=Path, help="directory with mitosis/ and normal/ or a CSV manifest")
    p.add_argument("--mitosis-min", type=float, default=0.9, help="keep mitosis tiles scoring at least this")
    p.add_argument("--normal-max", type=float, default=0.1, help="keep normal tiles scoring at most this")
    p.add_argument("--out", type=Path, default=None, help="write kept tiles as a CSV manifest")
    _add_oracle_flags(p)

    p = sub.add_parser("stats", help="recompute campaign statistics from results.csv",
                       formatter_class=_Formatter)
    p.add_argument("results", type=Path, help="results CSV")
    p.add_argument("--out", type=Path, default=None, help="write stats JSON here instead of stdout")

    p = sub.add_parser("render", help="render plots and adversarial images from results.csv",
                       formatter_class=_Formatter)
    p.add_argument("results", type=Path, help="results CSV")
    p.add_argument("--image-id", action="append", default=[], help="image to render (repeatable)")
    p.add_argument("--traces", type=Path, default=None, help="traces CSV (default: traces.csv beside results)")
    p.add_argument("--manifest", type=Path, default=None,
                   help="manifest or tile directory (default: entries.csv beside results)")
    p.add_argument("--out-dir", type=Path, default=None, help="output directory (default: beside results)")

    p = sub.add_parser("serve", help="run the mock model server", formatter_class=_Formatter)
    p.add_argument("--host", default="127.0.0.1", help="bind address")
    p.add_argument("--port", type=int, default=5000, help="bind port")
    p.add_argument("--oracle", default="planted:base=0.97,trigger=255-255-0,w=0.5,delta=-0.95",
                   help="backing synthetic oracle")
    p.add_argument("--latency", type=float, default=0.0, help="seconds added to each prediction")
    p.add_argument("--failure-rate", type=float, default=0.0, help="fraction of predictions answered 503")
    p.add_argument("--seed", type=int, default=0, help="failure-injection seed")
    return parser


def _make_oracle(args):
    if args.oracle:
        inner = parse_oracle_spec(args.oracle)
    else:
        inner = HttpOracle(args.endpoint, args.field_path, timeout=args.timeout, retries=args.retries)
    return CachedOracle(inner, capacity=args.cache_size)


def _attack_config(args, direction: AttackDirection) -> AttackConfig:
    de = DeConfig(
        population_size=args.np,
        mutation_factor=args.f,
        recombination=args.cr,
        max_iterations=args.max_iter,
        tolerance=args.tol,
        rng_seed=args.seed,
    )
    return AttackConfig(
        direction=direction,
        de=de,
        success_threshold=args.success_threshold,
        strong_threshold=args.strong_threshold,
        early_stop_on_strong=args.early_stop,
    )


def record_json(record) -> dict:
    p = record.best_perturbation
    return {
        "image_id": record.image_id,
        "direction": record.direction.value,
        "original_score": record.original_score,
        "final_score": record.final_score,
        "outcome": record.outcome.value,
        "iterations": record.iterations,
        "evaluations": record.evaluations,
        "perturbation": asdict(p) if p is not None else None,
        "trace": record.trace,
        "de_params": asdict(record.de_params),
    }


def cmd_attack(args) -> int:
    config = _attack_config(args, args.direction)
    image = read_png(args.image)
    record = run_attack(image, _make_oracle(args), config, image_id=args.image.stem)
    print(json.dumps(record_json(record), indent=2))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_png(apply_perturbation(image, record.best_perturbation),
                  args.out / f"{record.image_id}_adv.png")
        write_trace_csv(record, args.out / f"{record.image_id}_trace.csv")
    return EXIT_OK if record.outcome.succeeded else EXIT_FAILED


def cmd_campaign(args) -> int:
    entries = load_manifest(args.source)
    if args.direction != "both":
        wanted = AttackDirection(args.direction)
        entries = [e for e in entries if e.label.direction is wanted]
    oracle = _make_oracle(args)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    template = _attack_config(args, AttackDirection.MITOSIS_TO_NORMAL)
    if args.budget is not None and args.budget <= 0:
        log.warning("time budget exhausted before the first attack")
        return EXIT_TRUNCATED
    if not args.no_filter:
        entries = [f.entry for f in filter_dataset(entries, oracle, args.mitosis_min, args.normal_max)]
        log.info("%d tiles pass the score filter", len(entries))
    write_manifest(entries, out / "entries.csv")

    def progress(done, total, row):
        log.info("[%d/%d] %s %s", done, total, row.image_id, row.record.outcome.value)

    try:
        result = run_campaign(
            entries, oracle, template, parallelism=args.parallel, output=out / "results.csv",
            seed=args.seed, budget=args.budget, traces_path=out / "traces.csv", progress=progress,
        )
    except KeyboardInterrupt:
        log.warning("interrupted; completed rows are in %s", out / "results.csv")
        return EXIT_TRUNCATED
    write_stats(result.report, out / "stats.json")
    emit_plots(result.report, result.rows, out, trace_ids=args.plot_traces)
    for line in summary_lines(result.report):
        log.info("%s", line)
    if result.truncated:
        log.warning("time budget reached; rerun with the same --out-dir to resume")
        return EXIT_TRUNCATED
    return EXIT_OK


def cmd_filter(args) -> int:
    entries = load_manifest(args.source)
    kept = filter_dataset(entries, _make_oracle(args), args.mitosis_min, args.normal_max)
    rows = [
        {"image_id": f.entry.image_id, "path": str(f.entry.path), "label": f.entry.label.value,
         "score": f.score}
        for f in kept
    ]
    if args.out is not None:
        write_manifest([f.entry for f in kept], args.out)
    print(json.dumps({"total": len(entries), "kept": len(kept), "entries": rows}, indent=2))
    return EXIT_OK


def cmd_stats(args) -> int:
    report = build_report(read_results(args.results))
    if args.out is not None:
        write_stats(report, args.out)
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    base = args.results.parent
    traces = args.traces or base / "traces.csv"
    rows = read_results(args.results, traces)
    out = args.out_dir or base
    sources = None
    manifest = args.manifest or base / "entries.csv"
    if args.image_id:
        known = {r.image_id for r in rows}
        unknown = [i for i in args.image_id if i not in known]
        if unknown:
            raise KeyError(f"image ids not in results: {unknown}")
        if manifest.exists():
            sources = {e.image_id: e for e in load_manifest(manifest)}
    written = emit_plots(
        build_report(rows), rows, out, trace_ids=args.image_id,
        adversarial_ids=args.image_id if sources else (), sources=sources,
    )
    for path in written:
        print(path)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .modelserver import ServerConfig, serve_forever

    serve_forever(ServerConfig(args.host, args.port, args.oracle, args.latency,
                               args.failure_rate, args.seed))
    return EXIT_OK


COMMANDS = {
    "attack": cmd_attack,
    "campaign": cmd_campaign,
    "filter": cmd_filter,
    "stats": cmd_stats,
    "render": cmd_render,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=max(level, logging.DEBUG), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "campaign":
        logging.getLogger("onepixel").setLevel(min(level, logging.INFO))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SchemaError, PngError, AttackError, OSError, KeyError, ValueError) as exc:
        print(f"onepixel {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR

