"""
One-pass benchmark runner and ablation harness.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Callable, Dict, Iterable, List, Optional, Sequence as SequenceT, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.cache import (
    clear_expired_cache,
    generate_cache_key,
    get_cache_stats,
    get_cached,
    init_cache_db,
    set_cached,
)
from app.config import AppConfig, config_to_dict
from app.datasets import Sequence, list_sequences, load_sequence
from app.errors import DataError
from app.logging_config import progress_enabled
from app.metrics import OpeResult, curves_frame, mean_result, ope_metrics
from app.model import SataNetwork
from app.tracker import TrackResult, track_sequence
from app.utils import array_digest

logger = logging.getLogger(__name__)

TrackerFn = Callable[[Sequence], TrackResult]


def weights_digest(params) -> str:
    names = sorted(params)
    return array_digest(np.frombuffer("|".join(names).encode(), dtype=np.uint8),
                        *(params[n].data for n in names))


def network_tracker(net: SataNetwork) -> TrackerFn:
    def run(seq: Sequence) -> TrackResult:
        return track_sequence(seq.frames, seq.boxes[0], net, desc=seq.name)
    return run


def oracle_tracker(seq: Sequence) -> TrackResult:
    """Returns the ground truth; used to check the metric plumbing."""
    return TrackResult(boxes=list(seq.boxes), seconds=0.0, weight_stats=[])


def mean_tau_weights(weight_stats: Iterable[Dict[int, float]]) -> Dict[int, float]:
    """Per-tau mean over the frames that report that tau."""
    sums: Dict[int, List[float]] = {}
    for frame_stats in weight_stats:
        for tau, w in frame_stats.items():
            sums.setdefault(int(tau), []).append(w)
    return {tau: float(np.mean(ws)) for tau, ws in sorted(sums.items())}


# =====================================
# REPORTS
# =====================================
@dataclass
class SequenceReport:
    name: str
    frames: int
    result: Optional[OpeResult] = None
    seconds: float = 0.0
    fps: float = 0.0
    tau_weights: Dict[int, float] = field(default_factory=dict)
    error: Optional[str] = None
    cached: bool = False

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "frames": self.frames,
            "result": self.result.to_dict() if self.result else None,
            "seconds": self.seconds,
            "fps": self.fps,
            "tau_weights": {str(k): v for k, v in self.tau_weights.items()},
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SequenceReport":
        return cls(
            name=data["name"],
            frames=data["frames"],
            result=OpeResult(**data["result"]) if data.get("result") else None,
            seconds=data["seconds"],
            fps=data["fps"],
            tau_weights={int(k): v for k, v in data.get("tau_weights", {}).items()},
            error=data.get("error"),
        )


@dataclass
class BenchmarkReport:
    sequences: List[SequenceReport]
    aggregate: Optional[OpeResult]
    fps: float

    @property
    def tau_weights(self) -> Dict[int, float]:
        """Frame-weighted per-tau mean across sequences."""
        totals: Dict[int, Tuple[float, int]] = {}
        for rep in self.sequences:
            for tau, w in rep.tau_weights.items():
                s, n = totals.get(tau, (0.0, 0))
                totals[tau] = (s + w * rep.frames, n + rep.frames)
        return {tau: s / n for tau, (s, n) in sorted(totals.items())}

    def table(self) -> pd.DataFrame:
        rows = []
        for rep in self.sequences:
            rows.append({
                "sequence": rep.name,
                "frames": rep.frames,
                "auc": rep.result.auc if rep.result else np.nan,
                "precision@20": rep.result.precision_at_20 if rep.result else np.nan,
                "center_error": rep.result.mean_center_error if rep.result else np.nan,
                "fps": rep.fps,
                "error": rep.error or "",
            })
        if self.aggregate is not None:
            rows.append({
                "sequence": "ALL",
                "frames": self.aggregate.frames,
                "auc": self.aggregate.auc,
                "precision@20": self.aggregate.precision_at_20,
                "center_error": self.aggregate.mean_center_error,
                "fps": self.fps,
                "error": "",
            })
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict:
        return {
            "sequences": [rep.to_dict() for rep in self.sequences],
            "aggregate": self.aggregate.to_dict() if self.aggregate else None,
            "fps": self.fps,
            "tau_weights": {str(k): v for k, v in self.tau_weights.items()},
        }

    def write(self, report_dir: str) -> Dict[str, str]:
        """report.json, report.txt, success.csv and precision.csv."""
        os.makedirs(report_dir, exist_ok=True)
        paths = {name: os.path.join(report_dir, name)
                 for name in ("report.json", "report.txt", "success.csv", "precision.csv")}
        with open(paths["report.json"], "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=4)
        with open(paths["report.txt"], "w", encoding="utf-8") as fh:
            fh.write(self.table().to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n")
        results = {rep.name: rep.result for rep in self.sequences if rep.result is not None}
        if self.aggregate is not None:
            results["ALL"] = self.aggregate
        if results:
            curves = curves_frame(results)
            curves["success"].to_csv(paths["success.csv"])
            curves["precision"].to_csv(paths["precision.csv"])
        logger.info(f"✅ report written to {report_dir}")
        return paths


# =====================================
# RUNNER
# =====================================
def evaluate_sequence(seq: Sequence, tracker: TrackerFn) -> SequenceReport:
    """Track and score one sequence; failures are recorded, not raised."""
    try:
        run = tracker(seq)
        result = ope_metrics(run.boxes, seq.boxes)
    except (ValueError, ArithmeticError) as e:
        logger.error(f"❌ {seq.name}: {e}")
        return SequenceReport(name=seq.name, frames=len(seq), error=str(e))
    return SequenceReport(name=seq.name, frames=len(seq), result=result, seconds=run.seconds,
                          fps=run.fps, tau_weights=mean_tau_weights(run.weight_stats))


Source = Union[Sequence, str]


def _sources(dataset: Union[str, SequenceT[Source]]) -> List[Source]:
    """Sequences or sequence paths; paths are loaded per sequence inside the run."""
    if isinstance(dataset, str):
        return list_sequences(dataset)
    return list(dataset)


def _preload(dataset: Union[str, SequenceT[Source]]) -> List[Source]:
    """Load what loads once; unloadable paths stay paths so every run reports them."""
    loaded = []
    for source in _sources(dataset):
        if isinstance(source, str):
            try:
                source = load_sequence(source)
            except DataError as e:
                logger.error(f"❌ {e}")
        loaded.append(source)
    return loaded


def _source_name(source: Source) -> str:
    return os.path.basename(os.path.normpath(source)) if isinstance(source, str) else source.name


def _cache_key(seq: Sequence, net: SataNetwork) -> str:
    config_json = json.dumps(config_to_dict(net.config), sort_keys=True)
    return generate_cache_key(seq.digest(), weights_digest(net.params), config_json)


def run_benchmark(dataset: Union[str, SequenceT[Source]], net: SataNetwork,
                  tracker: Optional[TrackerFn] = None,
                  report_dir: Optional[str] = None) -> BenchmarkReport:
    """
    Run the tracker over every sequence and aggregate OPE metrics.

    Args:
        dataset: Dataset directory, or a list of sequences and/or sequence paths
        net: Network whose config drives the run
        tracker: Replacement tracker; defaults to the network tracker
        report_dir: Where to write the report files (falls back to bench.report_dir)

    Returns:
        BenchmarkReport with one entry per sequence in input order. A sequence
        that fails to load or track is recorded with its error; the run goes on.
    """
    cfg: AppConfig = net.config
    sources = _sources(dataset)
    use_cache = tracker is None and cfg.bench.cache_path is not None
    tracker = tracker or network_tracker(net)
    if use_cache:
        init_cache_db(cfg.bench.cache_path)
        clear_expired_cache(cfg.bench.cache_path)

    def evaluate(source: Source) -> SequenceReport:
        if isinstance(source, str):
            try:
                seq = load_sequence(source)
            except DataError as e:
                logger.error(f"❌ {e}")
                return SequenceReport(name=_source_name(source), frames=0, error=str(e))
        else:
            seq = source
        key = _cache_key(seq, net) if use_cache else None
        if key:
            hit = get_cached(cfg.bench.cache_path, key)
            if hit is not None:
                logger.debug(f"cache hit for {seq.name}")
                rep = SequenceReport.from_dict(hit)
                rep.cached = True
                return rep
        rep = evaluate_sequence(seq, tracker)
        if key and rep.error is None:
            set_cached(cfg.bench.cache_path, key, seq.name, rep.to_dict(), cfg.bench.cache_ttl_hours)
        return rep

    with ThreadPoolExecutor(max_workers=cfg.bench.workers) as ex:
        reports = list(tqdm(ex.map(evaluate, sources), total=len(sources), desc="sequences",
                            disable=not progress_enabled(logger)))

    ok = [rep for rep in reports if rep.result is not None]
    aggregate = mean_result([rep.result for rep in ok]) if ok else None
    steps = sum(rep.frames - 1 for rep in ok)
    seconds = sum(rep.seconds for rep in ok)
    fps = steps / seconds if seconds > 0 else 0.0

    failed = len(reports) - len(ok)
    if aggregate is not None:
        logger.info(f"{'⚠️' if failed else '✅'} {len(ok)}/{len(reports)} sequences: "
                    f"AUC {aggregate.auc:.4f}, precision@20 {aggregate.precision_at_20:.4f}, {fps:.1f} FPS")
    else:
        logger.error(f"❌ all {len(reports)} sequences failed")

    if use_cache:
        stats = get_cache_stats(cfg.bench.cache_path)
        logger.info(f"💾 cache {stats['database_file']}: {stats['total_entries']} entries, {stats['size_mb']} MB")

    report = BenchmarkReport(reports, aggregate, fps)
    report_dir = report_dir or cfg.bench.report_dir
    if report_dir:
        report.write(report_dir)
    return report


# =====================================
# ABLATION
# =====================================
LEVEL_NAMES = {0: "deep", 1: "mid", 2: "shallow"}


@dataclass(frozen=True)
class AblationRow:
    levels: Tuple[int, ...]
    T: int
    include_current: bool = True

    @property
    def name(self) -> str:
        if self.T == 0 or not self.levels:
            base = "no-agg"
        else:
            base = "+".join(LEVEL_NAMES[level] for level in self.levels) + f"@T{self.T}"
        return base if self.include_current else base + " (history only)"

    def apply(self, cfg: AppConfig) -> AppConfig:
        return replace(
            cfg,
            tracker=replace(cfg.tracker, T=self.T),
            aggregate=replace(cfg.aggregate, levels=self.levels, include_current=self.include_current),
        )


TABLE_CONFIGS: Tuple[AblationRow, ...] = (
    AblationRow((), 0),
    AblationRow((0,), 3),
    AblationRow((1,), 3),
    AblationRow((2,), 3),
    AblationRow((0, 1), 3),
    AblationRow((0, 1, 2), 3),
    AblationRow((0, 1), 2),
)


def ablation_rows(grid: bool = False, t_sweep: bool = False,
                  include_current: SequenceT[bool] = (True,)) -> List[AblationRow]:
    """
    Published rows, optionally extended with every level subset at T 2 and 3
    (`grid`) and full-level rows for T = 0..5 (`t_sweep`). Duplicates are dropped.
    """
    base = list(TABLE_CONFIGS)
    if grid:
        subsets = [s for n in (1, 2, 3) for s in combinations((0, 1, 2), n)]
        base += [AblationRow(s, t) for t in (2, 3) for s in subsets]
    if t_sweep:
        base += [AblationRow((0, 1, 2), t) for t in range(6)]

    rows, seen = [], set()
    for flag in include_current:
        for row in base:
            row = replace(row, include_current=flag)
            key = (row.levels if row.T else (), row.T, row.include_current)
            if key not in seen:
                seen.add(key)
                rows.append(row)
    return rows


def ablate(dataset: Union[str, SequenceT[Source]], net: SataNetwork,
           rows: Optional[SequenceT[AblationRow]] = None,
           report_dir: Optional[str] = None) -> pd.DataFrame:
    """
    Run every row end-to-end with the same parameters.

    Returns one line per row with AUC, precision@20, FPS and the mean
    aggregation weight for each tau (columns w_tau0, w_tau1, ...).
    """
    sequences = _preload(dataset)
    rows = list(rows or TABLE_CONFIGS)
    lines = []
    for row in rows:
        cfg = row.apply(net.config)
        row_net = SataNetwork(replace(cfg, bench=replace(cfg.bench, report_dir=None)), net.params)
        logger.info(f"ablation row {row.name}")
        report = run_benchmark(sequences, row_net)
        line = {
            "config": row.name,
            "levels": ",".join(str(level) for level in row.levels),
            "T": row.T,
            "include_current": row.include_current,
            "auc": report.aggregate.auc if report.aggregate else np.nan,
            "precision@20": report.aggregate.precision_at_20 if report.aggregate else np.nan,
            "fps": report.fps,
        }
        for tau, w in report.tau_weights.items():
            line[f"w_tau{tau}"] = w
        lines.append(line)

    table = pd.DataFrame(lines)
    if report_dir:
        os.makedirs(report_dir, exist_ok=True)
        table.to_csv(os.path.join(report_dir, "ablation.csv"), index=False)
        with open(os.path.join(report_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n")
        logger.info(f"✅ ablation table written to {report_dir}")
    return table
