import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from rich.console import Console

from ..core import ReadoutError
from ..runtime import BatchRuntime
from ._console import print_summary
from ._logging import close_logging, configure_logging
from .config import ExperimentConfig, load_config
from .experiments import CROSSTALK_NAME, build_context, run_crosstalk_study, run_experiment, write_crosstalk_csv, write_manifest
from .stages import (
    CALIBRATION_FRAMES_NAME,
    CALIBRATION_LABELS_NAME,
    FRAMES_NAME,
    LABELS_NAME,
    VERDICTS_NAME,
    calibrate_from_files,
    calibration_inputs,
    classify_to_file,
    load_trials,
    report_from_verdicts,
    simulate_to_files,
)

logger = logging.getLogger(__name__)

PROG = "ionreadout"


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="INI experiment configuration.")
    parser.add_argument("--seed", type=int, help="Master seed (overrides [experiment] seed).")
    parser.add_argument("--trials", type=int, help="Number of trials (overrides [experiment] trials).")
    parser.add_argument("--threads", type=int, help="Worker threads (overrides [experiment] threads).")
    parser.add_argument("--out-dir", type=Path, help="Output directory (overrides [output] dir).")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log DEBUG records to the console.")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Simulate camera-based trapped-ion readout and evaluate readout classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Simulate trials and write IRF1 frames plus labels.")
    _common(p)

    p = sub.add_parser("calibrate", help="Fit count distributions from simulated frames.")
    _common(p)
    p.add_argument("--frames", type=Path,
                   help=f"IRF1 frames (default <out-dir>/{CALIBRATION_FRAMES_NAME}, or {FRAMES_NAME} for qunybble).")
    p.add_argument("--labels", type=Path,
                   help=f"Label sidecar (default <out-dir>/{CALIBRATION_LABELS_NAME}, or {LABELS_NAME} for qunybble).")

    p = sub.add_parser("classify", help="Classify frames with a calibration archive; write verdicts.")
    _common(p)
    p.add_argument("--frames", type=Path, help=f"IRF1 frames (default <out-dir>/{FRAMES_NAME}).")
    p.add_argument("--labels", type=Path, help=f"Label sidecar (default <out-dir>/{LABELS_NAME}).")
    p.add_argument("--archive-dir", type=Path, help="Directory holding the calibration archives (default <out-dir>).")
    p.add_argument("--method", default="M", help="T, M or A (single exposure); T, ST or STA (time resolved); T, M, MN or MN3 (qunybble). Default M.")
    p.add_argument("--roi-size", type=int, help="ROI size N (default [analysis] roi_max).")

    p = sub.add_parser("report", help="Compute epsilon from a verdict file.")
    _common(p)
    p.add_argument("--verdicts", type=Path, help=f"Verdict CSV (default <out-dir>/{VERDICTS_NAME}).")
    p.add_argument("--method", default="M", help="Method tag written to the report.")
    p.add_argument("--roi-size", type=int, help="ROI size written to the report (default [analysis] roi_max).")

    p = sub.add_parser("crosstalk", help="Cumulative signal versus pixel rank from single-ion-bright frames.")
    _common(p)

    p = sub.add_parser("run", help="Simulate, calibrate, classify and sweep N end to end.")
    _common(p)
    return parser.parse_args(argv)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        "experiment.seed": args.seed,
        "experiment.trials": args.trials,
        "experiment.threads": args.threads,
        "output.dir": None if args.out_dir is None else str(args.out_dir),
    }
    if args.command == "crosstalk":
        overrides["experiment.kind"] = "crosstalk_study"
    return load_config(args.config, overrides)


def dispatch(args: argparse.Namespace, console: Console) -> None:
    cfg = _config(args)
    out_dir = Path(cfg.out_dir)
    configure_logging(out_dir, logging.DEBUG if args.verbose else logging.INFO)
    runtime = BatchRuntime(cfg.threads)

    if args.command == "run":
        result = run_experiment(cfg, runtime)
        print_summary(result.reports, f"{cfg.kind}: minimum epsilon per method", console)
        return

    ctx = build_context(cfg, runtime)
    roi_size = getattr(args, "roi_size", None) or max(cfg.roi_sizes)
    if args.command == "simulate":
        simulate_to_files(ctx)
    elif args.command == "crosstalk":
        write_crosstalk_csv(ctx.output(CROSSTALK_NAME), run_crosstalk_study(ctx))
        write_manifest(ctx, {"stage": "crosstalk"})
    elif args.command == "calibrate":
        frames_path, labels_path = calibration_inputs(cfg, out_dir)
        counts, protocol, labels = load_trials(args.frames or frames_path, args.labels or labels_path)
        calibrate_from_files(ctx, counts, protocol, labels)
    elif args.command == "classify":
        counts, protocol, labels = load_trials(args.frames or out_dir / FRAMES_NAME, args.labels or out_dir / LABELS_NAME)
        classify_to_file(ctx, counts, protocol, labels, args.method, roi_size, args.archive_dir)
    else:
        report = report_from_verdicts(ctx, args.verdicts or out_dir / VERDICTS_NAME, args.method, roi_size)
        print_summary([report], "report", console)


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    console = Console()
    try:
        dispatch(args, console)
    except (ReadoutError, OSError, ValueError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"{PROG}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.debug("Command %s crashed", args.command, exc_info=True)
        logger.error("%s failed unexpectedly: %s: %s", args.command, type(e).__name__, e)
        return 1
    finally:
        close_logging()
    return 0
