"""Batch attacks over a labelled tile set, with CSV persistence and statistics."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .attack import (
    AttackConfig,
    AttackDirection,
    AttackError,
    AttackRecord,
    Outcome,
    run_attack,
)
from .evolution import DeConfig
from .imaging import PixelPerturbation, RgbImage, apply_perturbation, read_png, write_png

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "image_id", "label", "direction", "orig_score", "final_score", "outcome",
    "iterations", "evaluations", "x", "y", "r", "g", "b",
    "np", "f", "cr", "max_iter", "tol", "seed",
)  # fmt: skip
TRACE_COLUMNS = ("image_id", "iteration", "best_score")


class Label(str, enum.Enum):
    MITOSIS = "mitosis"
    NORMAL = "normal"

    @property
    def direction(self) -> AttackDirection:
        if self is Label.MITOSIS:
            return AttackDirection.MITOSIS_TO_NORMAL
        return AttackDirection.NORMAL_TO_MITOSIS


class SchemaError(ValueError):
    """A results file does not match the expected layout."""


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    path: Path
    label: Label

    def load(self) -> RgbImage:
        return read_png(self.path)


@dataclass(frozen=True)
class FilteredEntry:
    entry: DatasetEntry
    score: float


@dataclass
class ResultRow:
    label: Label
    record: AttackRecord

    @property
    def image_id(self) -> str:
        return self.record.image_id


# -- dataset ---------------------------------------------------------------------


def load_manifest(source) -> list[DatasetEntry]:
    """Read a tile set from ``mitosis/`` and ``normal/`` subdirectories of PNGs,
    or from a CSV manifest with columns ``image_id,path,label`` (relative paths
    resolve against the manifest's directory)."""
    source = Path(source)
    entries: list[DatasetEntry] = []
    if source.is_dir():
        for label in Label:
            sub = source / label.value
            if sub.is_dir():
                entries += [DatasetEntry(p.stem, p, label) for p in sorted(sub.glob("*.png"))]
        if not entries:
            raise ValueError(f"{source} has no PNGs under mitosis/ or normal/")
    else:
        with open(source, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"image_id", "path", "label"} - set(reader.fieldnames or ())
            if missing:
                raise SchemaError(f"manifest {source} lacks columns {sorted(missing)}")
            for row in reader:
                path = Path(row["path"])
                if not path.is_absolute():
                    path = source.parent / path
                entries.append(DatasetEntry(row["image_id"], path, Label(row["label"].strip().lower())))
    seen = Counter(e.image_id for e in entries)
    dupes = sorted(k for k, v in seen.items() if v > 1)
    if dupes:
        raise ValueError(f"duplicate image ids: {dupes[:5]}")
    return entries


def write_manifest(entries: Iterable[DatasetEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image_id", "path", "label"))
        for e in sorted(entries, key=lambda e: e.image_id):
            w.writerow((e.image_id, str(Path(e.path).resolve()), e.label.value))


def filter_dataset(
    entries: Sequence[DatasetEntry],
    oracle,
    mitosis_min: float = 0.9,
    normal_max: float = 0.1,
) -> list[FilteredEntry]:
    """Keep the unambiguous tiles: mitosis scoring at least ``mitosis_min`` and
    normal scoring at most ``normal_max``.  Tiles the oracle cannot score are
    logged and dropped."""
    kept = []
    for entry in entries:
        try:
            score = oracle.score(entry.load())
        except Exception as exc:
            log.warning("skipping %s: %s", entry.image_id, exc)
            continue
        if entry.label is Label.MITOSIS and score >= mitosis_min:
            kept.append(FilteredEntry(entry, score))
        elif entry.label is Label.NORMAL and score <= normal_max:
            kept.append(FilteredEntry(entry, score))
    return kept


# -- statistics --------------------------------------------------------------------


@dataclass
class SummaryStats:
    count: int
    min: float
    max: float
    mean: float
    median: float
    std: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _median_sorted(v: np.ndarray) -> float:
    n = len(v)
    mid = n // 2
    if n % 2:
        return float(v[mid])
    return float((v[mid - 1] + v[mid]) / 2)


def summarize(values) -> SummaryStats:
    """Five-number summary plus box-plot whiskers.

    Quartiles are medians of the lower and upper halves with the middle value
    excluded when the count is odd.  Whiskers end at the most extreme data
    points within 1.5 IQR of the box; anything beyond is an outlier.
    """
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    n = len(v)
    if n == 0:
        raise ValueError("cannot summarize an empty sequence")
    half = n // 2
    if n == 1:
        q1 = q3 = float(v[0])
    else:
        q1 = _median_sorted(v[:half])
        q3 = _median_sorted(v[half + n % 2 :])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return SummaryStats(
        count=n,
        min=float(v[0]),
        max=float(v[-1]),
        mean=float(np.mean(v)),
        median=_median_sorted(v),
        std=float(np.std(v)),
        q1=q1,
        q3=q3,
        whisker_low=float(inside[0]),
        whisker_high=float(inside[-1]),
        outliers=[float(x) for x in v[(v < lo) | (v > hi)]],
    )


@dataclass
class DirectionReport:
    direction: str
    total: int
    outcomes: dict[str, int]
    attempted: int  # excludes early-converged and errored rows
    success: int
    strong_success: int
    success_rate: Optional[float]
    strong_rate: Optional[float]
    mean_iterations: Optional[float]
    median_change: Optional[float]
    early_mean_change: Optional[float]
    before: Optional[SummaryStats]
    after: Optional[SummaryStats]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["before"] = self.before.to_dict() if self.before else None
        d["after"] = self.after.to_dict() if self.after else None
        return d


@dataclass
class CampaignReport:
    total: int
    directions: dict[str, DirectionReport]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "directions": {k: v.to_dict() for k, v in self.directions.items()},
        }


def _mean(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _direction_report(direction: AttackDirection, records: list[AttackRecord]) -> DirectionReport:
    outcomes = Counter(r.outcome.value for r in records)
    attempted = [
        r for r in records if r.outcome not in (Outcome.EARLY_CONVERGED, Outcome.ERROR)
    ]
    early = [r for r in records if r.outcome is Outcome.EARLY_CONVERGED]
    success = sum(r.outcome.succeeded for r in attempted)
    strong = sum(r.outcome is Outcome.STRONG_SUCCESS for r in attempted)
    changes = [abs(r.final_score - r.original_score) for r in attempted]
    return DirectionReport(
        direction=direction.value,
        total=len(records),
        outcomes={o.value: outcomes.get(o.value, 0) for o in Outcome},
        attempted=len(attempted),
        success=success,
        strong_success=strong,
        success_rate=success / len(attempted) if attempted else None,
        strong_rate=strong / len(attempted) if attempted else None,
        mean_iterations=_mean([float(r.iterations) for r in attempted]),
        median_change=_median_sorted(np.sort(changes)) if changes else None,
        early_mean_change=_mean([abs(r.final_score - r.original_score) for r in early]),
        before=summarize([r.original_score for r in attempted]) if attempted else None,
        after=summarize([r.final_score for r in attempted]) if attempted else None,
    )


def build_report(rows: Iterable[ResultRow]) -> CampaignReport:
    """Aggregate rows per direction.  Rows are ordered by image id first so the
    floating-point results do not depend on completion order."""
    rows = sorted(rows, key=lambda r: (r.image_id, r.record.direction.value))
    by_dir = {
        d.value: _direction_report(d, [r.record for r in rows if r.record.direction is d])
        for d in AttackDirection
    }
    return CampaignReport(total=len(rows), directions=by_dir)


class ColorHistogram:
    """Exact attack-pixel colour counts over successful attacks."""

    def __init__(self, counts: Optional[Counter] = None):
        self.counts: Counter = counts or Counter()

    def __len__(self):
        return len(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())

    def most_common(self, n: Optional[int] = None) -> list[tuple[tuple[int, int, int], int]]:
        # ties broken by colour so the order is reproducible
        ranked = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked if n is None else ranked[:n]

    def top(self) -> Optional[tuple[int, int, int]]:
        ranked = self.most_common(1)
        return ranked[0][0] if ranked else None


def color_histogram(records: Iterable[AttackRecord]) -> ColorHistogram:
    counts = Counter(
        r.best_perturbation.color
        for r in records
        if r.outcome.succeeded and r.best_perturbation is not None
    )
    return ColorHistogram(counts)


# -- CSV ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def row_to_csv(row: ResultRow) -> list[str]:
    r = row.record
    p = r.best_perturbation
    de = r.de_params
    fields = [
        r.image_id, row.label.value, r.direction.value, r.original_score, r.final_score,
        r.outcome.value, r.iterations, r.evaluations,
        *(p.as_tuple() if p is not None else (None,) * 5),
        de.population_size, float(de.mutation_factor), float(de.recombination),
        de.max_iterations, float(de.tolerance), de.rng_seed,
    ]  # fmt: skip
    return [_fmt(v) for v in fields]


def _opt(cast, text: str):
    return None if text == "" else cast(text)


def row_from_csv(values: dict[str, str], trace: Optional[list[float]] = None) -> ResultRow:
    coords = [_opt(int, values[k]) for k in ("x", "y", "r", "g", "b")]
    perturbation = None if None in coords else PixelPerturbation(*coords)
    de = DeConfig(
        population_size=int(values["np"]),
        mutation_factor=float(values["f"]),
        recombination=float(values["cr"]),
        max_iterations=int(values["max_iter"]),
        tolerance=float(values["tol"]),
        rng_seed=int(values["seed"]),
    )
    record = AttackRecord(
        image_id=values["image_id"],
        direction=AttackDirection(values["direction"]),
        original_score=_opt(float, values["orig_score"]),
        final_score=_opt(float, values["final_score"]),
        best_perturbation=perturbation,
        outcome=Outcome(values["outcome"]),
        iterations=_opt(int, values["iterations"]),
        evaluations=_opt(int, values["evaluations"]),
        trace=list(trace or []),
        de_params=de,
    )
    return ResultRow(Label(values["label"]), record)


def read_results(path, traces_path=None) -> list[ResultRow]:
    """Parse a results CSV, raising :class:`SchemaError` with the offending row
    number on any malformed line."""
    traces = read_traces(traces_path) if traces_path and Path(traces_path).exists() else {}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != RESULT_COLUMNS:
            missing = [c for c in RESULT_COLUMNS if c not in header]
            extra = [c for c in header if c not in RESULT_COLUMNS]
            raise SchemaError(
                f"{path}: header mismatch; missing {missing}, unexpected {extra}, "
                f"expected order {','.join(RESULT_COLUMNS)}"
            )
        for lineno, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(RESULT_COLUMNS):
                raise SchemaError(
                    f"{path}: row {lineno} has {len(values)} fields, expected {len(RESULT_COLUMNS)}"
                )
            mapping = dict(zip(RESULT_COLUMNS, values))
            try:
                rows.append(row_from_csv(mapping, traces.get(mapping["image_id"])))
            except (ValueError, TypeError, KeyError) as exc:
                raise SchemaError(f"{path}: row {lineno}: {exc}") from None
    return rows


def write_results(rows: Iterable[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in sorted(rows, key=lambda r: r.image_id):
            w.writerow(row_to_csv(row))


def read_traces(path) -> dict[str, list[float]]:
    traces: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            traces.setdefault(row["image_id"], []).append(
                (int(row["iteration"]), float(row["best_score"]))
            )
    return {k: [s for _, s in sorted(v)] for k, v in traces.items()}


def write_trace_csv(record: AttackRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "best_score"))
        for i, s in enumerate(record.trace):
            w.writerow((i, repr(float(s))))


class ResultSink:
    """Append-only, thread-safe writer for the results and traces files."""

    def __init__(self, results_path, traces_path=None):
        self.results_path = Path(results_path)
        self.traces_path = Path(traces_path) if traces_path else None
        self._lock = threading.Lock()
        self._results = self._open(self.results_path, RESULT_COLUMNS)
        self._traces = self._open(self.traces_path, TRACE_COLUMNS) if self.traces_path else None

    @staticmethod
    def _open(path: Path, header):
        fresh = not path.exists() or path.stat().st_size == 0
        fh = open(path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(header)
            fh.flush()
        return fh, writer

    def write(self, row: ResultRow) -> None:
        with self._lock:
            fh, writer = self._results
            writer.writerow(row_to_csv(row))
            fh.flush()
            if self._traces is not None and row.record.trace:
                tfh, twriter = self._traces
                for i, s in enumerate(row.record.trace):
                    twriter.writerow((row.image_id, i, repr(float(s))))
                tfh.flush()

    def close(self) -> None:
        with self._lock:
            for pair in (self._results, self._traces):
                if pair is not None:
                    pair[0].close()


# -- campaign ----------------------------------------------------------------------


def derive_seed(campaign_seed: int, image_id: str) -> int:
    """64-bit per-image seed, independent of scheduling order."""
    digest = hashlib.sha256(f"{campaign_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def attack_config_for(template: AttackConfig, label: Label, seed: int) -> AttackConfig:
    direction = label.direction
    strong = template.strong_threshold if template.direction is direction else None
    return AttackConfig(
        direction=direction,
        de=DeConfig(**{**asdict(template.de), "rng_seed": seed}),
        success_threshold=template.success_threshold,
        strong_threshold=strong,
        early_stop_on_strong=template.early_stop_on_strong,
    )


@dataclass
class CampaignResult:
    report: CampaignReport
    rows: list[ResultRow]
    truncated: bool
    skipped_existing: int = 0


def run_campaign(
    entries: Sequence[FilteredEntry | DatasetEntry],
    oracle,
    attack_config: Optional[AttackConfig] = None,
    parallelism: int = 1,
    output=None,
    *,
    seed: int = 0,
    budget: Optional[float] = None,
    traces_path=None,
    progress=None,
) -> CampaignResult:
    """Attack every entry (mitosis tiles are pushed down, normal tiles up).

    ``output`` is a results CSV path; rows already present there are kept and
    their image ids skipped.  ``budget`` is a wall-clock limit in seconds after
    which no new attack starts.
    """
    template = attack_config or AttackConfig()
    items = [e.entry if isinstance(e, FilteredEntry) else e for e in entries]
    existing: list[ResultRow] = []
    sink = None
    if output is not None:
        output = Path(output)
        if output.exists() and output.stat().st_size:
            existing = read_results(output, traces_path)
        sink = ResultSink(output, traces_path)
    done_ids = {r.image_id for r in existing}
    todo = [e for e in items if e.image_id not in done_ids]
    if done_ids:
        log.info("resuming: %d rows already present", len(done_ids))

    start = time.monotonic()
    new_rows: list[ResultRow] = []
    rows_lock = threading.Lock()
    truncated = False

    def task(entry: DatasetEntry) -> bool:
        nonlocal truncated
        if budget is not None and time.monotonic() - start >= budget:
            truncated = True
            return False
        cfg = attack_config_for(template, entry.label, derive_seed(seed, entry.image_id))
        try:
            record = run_attack(entry.load(), oracle, cfg, image_id=entry.image_id)
        except (AttackError, OSError, ValueError) as exc:
            log.warning("attack on %s failed: %s", entry.image_id, exc)
            record = AttackRecord(
                image_id=entry.image_id,
                direction=cfg.direction,
                original_score=None,
                final_score=None,
                best_perturbation=None,
                outcome=Outcome.ERROR,
                iterations=None,
                evaluations=None,
                trace=list(getattr(exc, "trace", [])),
                de_params=cfg.de,
                error=str(exc),
            )
        row = ResultRow(entry.label, record)
        if sink is not None:
            sink.write(row)
        with rows_lock:
            new_rows.append(row)
            if progress is not None:
                progress(len(new_rows), len(todo), row)
        return True

    try:
        if parallelism <= 1:
            for entry in todo:
                task(entry)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                list(pool.map(task, todo))
    finally:
        if sink is not None:
            sink.close()

    rows = existing + new_rows
    return CampaignResult(
        report=build_report(rows),
        rows=sorted(rows, key=lambda r: r.image_id),
        truncated=truncated,
        skipped_existing=len(done_ids),
    )


def write_stats(report: CampaignReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


# -- plots -------------------------------------------------------------------------


def _figure(width=6.0, height=4.0):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "onepixel"
    from matplotlib.figure import Figure

    return Figure(figsize=(width, height))


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _bxp_stats(label: str, s: SummaryStats) -> dict:
    return {
        "label": label, "med": s.median, "q1": s.q1, "q3": s.q3,
        "whislo": s.whisker_low, "whishi": s.whisker_high, "fliers": s.outliers,
    }  # fmt: skip


def render_boxplot(report: DirectionReport, path) -> None:
    fig = _figure()
    ax = fig.add_subplot()
    ax.bxp([_bxp_stats("Before attack", report.before), _bxp_stats("After attack", report.after)])
    ax.set_ylabel("Confidence score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"{report.direction.replace('_', '-')} (n={report.attempted})")
    _save_svg(fig, path)


def render_trace(record: AttackRecord, path) -> None:
    fig = _figure()
    ax = fig.add_subplot()
    ax.plot(range(len(record.trace)), record.trace, marker="o", markersize=3)
    kind = "Lowest" if record.direction.minimize else "Highest"
    ax.set_xlabel("Differential evolution step")
    ax.set_ylabel(f"{kind} confidence score")
    ax.set_title(record.image_id)
    _save_svg(fig, path)


def adversarial_image(source: RgbImage, record: AttackRecord) -> RgbImage:
    return apply_perturbation(source, record.best_perturbation)


def emit_plots(
    report: CampaignReport,
    rows: Sequence[ResultRow],
    out_dir,
    trace_ids: Iterable[str] = (),
    adversarial_ids: Iterable[str] = (),
    sources: Optional[dict[str, DatasetEntry]] = None,
) -> list[Path]:
    """Write box-plot stats and SVGs per direction, plus trace CSV/SVG and
    adversarial PNGs for the requested image ids.  Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    written: list[Path] = []
    for name, d in report.directions.items():
        if d.before is None:
            continue
        stats_path = out / f"box_{name}.json"
        stats_path.write_text(
            json.dumps({"before": d.before.to_dict(), "after": d.after.to_dict()}, indent=2) + "\n"
        )
        svg_path = out / f"box_{name}.svg"
        render_boxplot(d, svg_path)
        written += [stats_path, svg_path]
    by_id = {r.image_id: r for r in rows}
    for image_id in trace_ids:
        record = by_id[image_id].record
        if not record.trace:
            log.warning("no trace recorded for %s", image_id)
            continue
        csv_path, svg_path = out / f"{image_id}_trace.csv", out / f"{image_id}_trace.svg"
        write_trace_csv(record, csv_path)
        render_trace(record, svg_path)
        written += [csv_path, svg_path]
    for image_id in adversarial_ids:
        record = by_id[image_id].record
        if record.best_perturbation is None:
            log.warning("no perturbation recorded for %s", image_id)
            continue
        if sources is None or image_id not in sources:
            raise KeyError(f"source image for {image_id!r} not available")
        png_path = out / f"{image_id}_adv.png"
        write_png(adversarial_image(sources[image_id].load(), record), png_path)
        written.append(png_path)
    return written


def summary_lines(report: CampaignReport) -> list[str]:
    """Human-readable one-liners for logs."""
    lines = []
    for d in report.directions.values():
        if not d.total:
            continue
        rate = "n/a" if d.success_rate is None else f"{d.success_rate:.1%}"
        lines.append(
            f"{d.direction}: {d.total} attacks, {d.outcomes['early_converged']} early-converged, "
            f"{d.success}/{d.attempted} crossed the success threshold ({rate}), "
            f"{d.strong_success} strong"
        )
    return lines

