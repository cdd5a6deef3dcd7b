"""
Command-line entry point: python -m app.main <command> [options]

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from app.benchmark import (
    BenchmarkReport,
    SequenceReport,
    ablate,
    ablation_rows,
    run_benchmark,
)
from app.config import AppConfig, load_config, log_config
from app.datasets import (
    SynthSpec,
    list_sequences,
    load_sequence,
    read_boxes,
    save_sequence,
    synth_corpus,
    synth_sequence,
    write_boxes,
    write_overlays,
)
from app.errors import DataError, GradientCheckError, TrackingError
from app.logging_config import setup_logging
from app.metrics import ope_metrics
from app.model import SataNetwork
from app.tracker import track_sequence
from app.training import grad_check_suite, small_config, train
from app.weights_io import apply_weights, load_weights, save_weights

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit(2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# =====================================
# SHARED SETUP
# =====================================
def _config(args) -> AppConfig:
    try:
        cfg = load_config(args.config)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.show_config:
        log_config(cfg)
    return cfg


def _network(cfg: AppConfig, weights: Optional[str]) -> SataNetwork:
    net = SataNetwork.create(cfg, seed=cfg.runtime.seed)
    if weights:
        params, _ = apply_weights(net.params, load_weights(weights), cfg.runtime.np_dtype)
        net = net.with_params(params)
        logger.info(f"✅ loaded weights from {weights}")
    return net


# =====================================
# COMMANDS
# =====================================
def cmd_track(args) -> int:
    cfg = _config(args)
    net = _network(cfg, args.weights)
    seq = load_sequence(args.seq)
    result = track_sequence(seq.frames, seq.boxes[0], net, desc=seq.name)
    write_boxes(args.out, result.boxes)
    logger.info(f"✅ {seq.name}: {len(result.boxes)} boxes written to {args.out} ({result.fps:.1f} FPS)")
    if args.overlay:
        write_overlays(args.overlay, seq.frames, result.boxes, seq.boxes)
        logger.info(f"✅ overlays written to {args.overlay}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.boxes:
        seq = load_sequence(args.seq)
        predicted = read_boxes(args.boxes)
        if len(predicted) != len(seq):
            raise DataError(f"{args.boxes}: {len(predicted)} boxes for {len(seq)} frames")
        result = ope_metrics(predicted, seq.boxes)
        report = BenchmarkReport([SequenceReport(seq.name, len(seq), result)], result, 0.0)
        logger.info(f"✅ {seq.name}: AUC {result.auc:.4f}, precision@20 {result.precision_at_20:.4f}")
    else:
        cfg = _config(args)
        report = run_benchmark(args.seq, _network(cfg, args.weights), report_dir=args.report)
        if report.aggregate is None:
            raise DataError(f"every sequence under {args.seq} failed")
        return EXIT_OK
    if args.report:
        report.write(args.report)
    print(report.table().to_string(index=False))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.steps is not None and args.steps < 1:
        raise UsageError(f"--steps must be at least 1, got {args.steps}")
    cfg = _config(args)
    net = _network(cfg, args.weights)
    if args.data:
        corpus = [load_sequence(path) for path in list_sequences(args.data)]
    else:
        corpus = synth_corpus(count=args.count, seed=cfg.train.seed)
    net, losses = train(corpus, net, checkpoint=args.out, steps=args.steps)
    save_weights(args.out, net.params)
    logger.info(f"✅ trained {len(losses)} steps: loss {losses[0]:.6f} -> {losses[-1]:.6f}; weights in {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    cfg = replace(cfg, runtime=replace(cfg.runtime, dtype="float64"))
    if not args.full_size:
        cfg = small_config(cfg)
    net = _network(cfg, args.weights)
    try:
        report = grad_check_suite(net, n_params=args.params, seed=args.seed, corrupt=args.corrupt)
    except GradientCheckError as e:
        logger.error(f"❌ {e}")
        return EXIT_CHECK
    if report.ok:
        logger.info(f"✅ gradient checks passed, max error {report.max_error:.2e}")
        return EXIT_OK
    for entry in report.violations:
        logger.error(f"❌ {entry.module} {entry.parameter}{list(entry.index)}: error {entry.error:.2e}")
    return EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    net = _network(cfg, args.weights)
    flags = (True, False) if args.history_only else (True,)
    rows = ablation_rows(grid=args.grid, t_sweep=args.t_sweep, include_current=flags)
    table = ablate(args.data, net, rows, report_dir=args.report)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(
        size=tuple(args.size),
        target_size=tuple(args.target_size),
        motion=args.motion,
        velocity=tuple(args.velocity),
        scale_end=args.scale_end,
        texture=args.texture,
        noise=args.noise,
        frames=args.frames,
        seed=args.seed,
        drift=args.drift,
        name=os.path.basename(os.path.normpath(args.out)),
    )
    if args.count == 1:
        save_sequence(synth_sequence(spec), args.out)
    else:
        for i in range(args.count):
            name = f"{spec.name}-{i:02d}"
            save_sequence(synth_sequence(replace(spec, seed=args.seed + i, name=name)),
                          os.path.join(args.out, name))
    logger.info(f"✅ {args.count} synthetic sequence(s) written to {args.out}")
    return EXIT_OK


# =====================================
# PARSER
# =====================================
def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sata-tracker", description="Correlation-filter tracker with temporal aggregation")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: LOG_LEVEL env)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def common(p, weights=True):
        p.add_argument("--config", default=None, help="JSON config file (default: SATA_CONFIG env)")
        p.add_argument("--show-config", action="store_true", help="log the effective config")
        if weights:
            p.add_argument("--weights", default=None, help="weights file to load")

    p = sub.add_parser("track", help="track one sequence and write its boxes")
    common(p)
    p.add_argument("--seq", required=True, help="sequence directory (OTB layout)")
    p.add_argument("--out", required=True, help="output boxes file")
    p.add_argument("--overlay", default=None, help="directory for per-frame overlay PNGs")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a boxes file, or benchmark the tracker on a dataset")
    common(p)
    p.add_argument("--seq", required=True, help="sequence or dataset directory")
    p.add_argument("--boxes", default=None, help="predicted boxes file; omit to run the tracker")
    p.add_argument("--report", default=None, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train on a dataset or on a synthetic corpus")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: synthetic corpus)")
    p.add_argument("--count", type=int, default=10, help="synthetic corpus size")
    p.add_argument("--steps", type=int, default=None, help="total steps (default: epochs x steps_per_epoch)")
    p.add_argument("--out", required=True, help="output weights file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)
    p.add_argument("--params", type=int, default=200, help="sampled parameters per group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-size", action="store_true", help="use the configured geometry instead of 25 px")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the ablation table")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--grid", action="store_true", help="add every level subset at T 2 and 3")
    p.add_argument("--t-sweep", action="store_true", help="add full-level rows for T = 0..5")
    p.add_argument("--history-only", action="store_true", help="also run each row without the current frame")
    p.add_argument("--report", default=None, help="report directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write synthetic sequences")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=(120, 200), metavar=("H", "W"))
    p.add_argument("--target-size", type=float, nargs=2, default=(24.0, 24.0), metavar=("W", "H"))
    p.add_argument("--motion", choices=("constant_velocity", "sinusoidal", "scale_ramp"), default="constant_velocity")
    p.add_argument("--velocity", type=float, nargs=2, default=(2.0, 0.0), metavar=("DX", "DY"))
    p.add_argument("--scale-end", type=float, default=1.3)
    p.add_argument("--texture", choices=("checker", "noise"), default="checker")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.log_level)

    try:
        return args.func(args)
    except UsageError as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except (DataError, TrackingError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
