"""File-based stages: frames and labels on disk, archives, verdicts, reports.

Calibration never sees the frames it is later asked to classify. Register
trials are calibrated from their check, pre and post exposures and classified
on the test exposure; single-exposure and time-resolved runs write a separate
calibration set drawn from the calibration streams.
"""
import csv
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..calibration import (
    HistogramAccumulator,
    PixelOrder,
    brightness_order,
    fit_per_exposure,
    neighbour_sets,
    read_archive,
    write_archive,
)
from ..classify import (
    DEFAULT_R_STOP,
    AdaptiveClassifier,
    BatchVerdicts,
    MLClassifier,
    NeighbourMLClassifier,
    RoiClassifier,
    SpatioTemporalClassifier,
    ThresholdClassifier,
    ThresholdRule,
)
from ..core import ConfigError, FrameFormatError
from ..irf import TrialLabel, decode_irf, read_labels, write_irf_stack, write_labels
from ..metrics import EpsilonReport, compute_epsilon, threshold_reports, write_report_csv
from ..register_sim import CHECK_EXPOSURE, TEST_EXPOSURE, ProtocolKind, TrialBatch
from .config import ExperimentConfig
from .experiments import (
    CALIBRATION_EXPOSURES,
    RunContext,
    SumHistograms,
    cumulative_roi_sums,
    neighbour_arities,
    register_pixel_order,
    write_manifest,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

FRAMES_NAME = "frames.irf"
LABELS_NAME = "labels.txt"
CALIBRATION_FRAMES_NAME = "calibration_frames.irf"
CALIBRATION_LABELS_NAME = "calibration_labels.txt"
THRESHOLDS_NAME = "thresholds.csv"
VERDICTS_NAME = "verdicts.csv"
VERDICT_COLUMNS = ("trial", "ion", "truth", "verdict", "R", "pixels_used", "exposures_used", "iterations")
THRESHOLD_COLUMNS = ("N", "ion", "threshold", "calibration_epsilon")

# Methods each protocol can classify from its archives.
CLASSIFY_METHODS = {
    ProtocolKind.SingleExposure: ("T", "M", "A"),
    ProtocolKind.TimeResolved: ("T", "ST", "STA"),
    ProtocolKind.Qunybble: ("T", "M", "MN", "MN3"),
}


def exposure_archive_name(j: int) -> str:
    return f"calibration_exposure_{j + 1:02d}.csv"


def _write_trials(ctx: RunContext, frames_name: str, labels_name: str, purpose_tag: str,
                  n_trials: int) -> Tuple[Path, Path]:
    batches = ctx.map_blocks(purpose_tag, lambda b: ctx.simulate(b, purpose_tag), n_trials)
    batch = TrialBatch.concatenate(batches)
    n, m = batch.counts.shape[:2]
    frames_path = ctx.output(frames_name)
    write_irf_stack(frames_path, batch.counts.reshape((n * m,) + batch.counts.shape[2:]),
                    [ctx.protocol.exposure_s] * (n * m))
    labels_path = ctx.output(labels_name)
    write_labels(labels_path, ctx.protocol.kind.value, batch.labels())
    logger.info("Wrote %d trials x %d exposures to %s", n, m, frames_path)
    return frames_path, labels_path


def simulate_to_files(ctx: RunContext) -> Tuple[Path, Path]:
    """Simulate `trials` trials and write every exposure as IRF1 plus the label sidecar.

    Alternating protocols also get `calibration_trials` trials from the
    calibration streams in their own pair of files.
    """
    paths = _write_trials(ctx, FRAMES_NAME, LABELS_NAME, "trials", ctx.cfg.trials)
    extra = {"stage": "simulate"}
    if ctx.protocol.alternating:
        _write_trials(ctx, CALIBRATION_FRAMES_NAME, CALIBRATION_LABELS_NAME, "calibration",
                      ctx.cfg.calibration_trials)
        extra["calibration_trials"] = ctx.cfg.calibration_trials
    write_manifest(ctx, extra)
    return paths


def calibration_inputs(cfg: ExperimentConfig, out_dir: Path) -> Tuple[Path, Path]:
    """Default frames and labels the calibrate stage reads for this experiment kind."""
    if cfg.kind == ProtocolKind.Qunybble.value:
        return out_dir / FRAMES_NAME, out_dir / LABELS_NAME
    return out_dir / CALIBRATION_FRAMES_NAME, out_dir / CALIBRATION_LABELS_NAME


def load_trials(frames_path: PathLike, labels_path: PathLike) -> Tuple[np.ndarray, str, List[TrialLabel]]:
    """(counts (n_trials, n_exposures, H, W), protocol name, labels)."""
    with open(frames_path, "rb") as fh:
        counts, _ = decode_irf(fh.read())
    protocol, labels = read_labels(labels_path)
    if not labels:
        raise FrameFormatError(f"{labels_path} holds no trials")
    if counts.shape[0] % len(labels):
        raise FrameFormatError(f"{counts.shape[0]} frames do not split into {len(labels)} trials")
    m = counts.shape[0] // len(labels)
    return counts.reshape((len(labels), m) + counts.shape[1:]), protocol, labels


def stored_batch(ctx: RunContext, counts: np.ndarray, protocol: str, labels: List[TrialLabel]) -> TrialBatch:
    """Frames and labels from disk as a TrialBatch of the configured protocol."""
    if protocol != ctx.protocol.kind.value:
        raise FrameFormatError(f"frames were written by a {protocol} run, config is {ctx.protocol.kind.value}")
    n_ions = ctx.models.imaging.n_ions
    if labels[0].prepared_state.n_ions != n_ions:
        raise FrameFormatError(f"labels describe {labels[0].prepared_state.n_ions} ions, config has {n_ions}")
    if counts.shape[2:] != ctx.models.imaging.shape:
        raise FrameFormatError(f"frames are {counts.shape[2:]}, config grid is {ctx.models.imaging.shape}")
    try:
        return TrialBatch.from_labels(ctx.protocol, ctx.models.camera, counts, labels)
    except ValueError as e:
        raise FrameFormatError(str(e)) from e


def _alternating_order(ctx: RunContext, batch: TrialBatch) -> PixelOrder:
    bright = batch.prepared_bright[:, 0]
    if bright.all() or not bright.any():
        raise FrameFormatError("pixel order needs both bright and dark calibration trials")
    shape = ctx.models.imaging.shape
    mean_b = batch.counts[bright].reshape((-1,) + shape).mean(axis=0)
    mean_d = batch.counts[~bright].reshape((-1,) + shape).mean(axis=0)
    return brightness_order(mean_b - mean_d, ctx.models.imaging.ion_pixel_coordinates())


def _threshold_rows(ctx: RunContext, hist: SumHistograms) -> List[List[str]]:
    rows = []
    for i, n in enumerate(ctx.roi_sizes):
        for k in range(hist.n_ions):
            theta, rep = threshold_reports(*hist.pair(k, i), roi_size=n)
            rows.append([str(n), str(k), str(theta), repr(rep.epsilon)])
    return rows


def write_thresholds_csv(path: PathLike, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(THRESHOLD_COLUMNS)
        writer.writerows(rows)


def read_thresholds_csv(path: PathLike) -> Dict[int, Tuple[int, ...]]:
    """Per-ion thresholds keyed by ROI size."""
    table: Dict[int, Dict[int, int]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                table.setdefault(int(row["N"]), {})[int(row["ion"])] = int(row["threshold"])
            except (KeyError, ValueError) as e:
                raise FrameFormatError(f"{path}:{lineno}: bad threshold row: {e}") from e
    if not table:
        raise FrameFormatError(f"{path} holds no thresholds")
    out = {}
    for n, per_ion in table.items():
        if sorted(per_ion) != list(range(len(per_ion))):
            raise FrameFormatError(f"{path}: N={n} needs one threshold per ion")
        out[n] = tuple(per_ion[k] for k in range(len(per_ion)))
    return out


def calibrate_from_files(ctx: RunContext, counts: np.ndarray, protocol: str,
                         labels: List[TrialLabel]) -> Dict[str, Path]:
    """Fit distributions and thresholds from labelled frames; returns the written files by name.

    Register trials contribute their pre and post exposures only, labelled
    with the state during each exposure; exposures in which a state changed
    are left out. The pixel order comes from the check exposures.
    """
    batch = stored_batch(ctx, counts, protocol, labels)
    imaging, kind = ctx.models.imaging, ctx.protocol.kind
    states, steady = batch.exposure_states(), batch.steady_exposures()
    out: Dict[str, Path] = {}
    hist = SumHistograms(imaging.n_ions, len(ctx.roi_sizes))

    if kind is ProtocolKind.Qunybble:
        order = register_pixel_order(ctx, batch.counts[:, CHECK_EXPOSURE].mean(axis=0))
        cal = list(CALIBRATION_EXPOSURES)
        keep = steady[:, cal].ravel()
        frames = batch.counts[:, cal].reshape((-1,) + imaging.shape)[keep]
        bright = states[:, cal].reshape(-1, imaging.n_ions)[keep]
        for a in sorted({0} | set(neighbour_arities(ctx.cfg, imaging.n_ions).values())):
            nbrs = neighbour_sets(imaging.ion_positions_um, a) if a else None
            acc = HistogramAccumulator(imaging.n_ions, ctx.max_n, a)
            acc.add_frames(frames, bright, order, nbrs)
            name = "calibration.csv" if a == 0 else f"calibration_nu{a}.csv"
            out[name] = ctx.output(name)
            write_archive(out[name], ctx.fit(acc, order, nbrs))
            logger.info("Calibrated arity %d from %d pre/post exposures", a, frames.shape[0])
        hist.add(cumulative_roi_sums(frames, order, ctx.roi_sizes), bright)
    else:
        order = _alternating_order(ctx, batch)
        dists = fit_per_exposure(batch.counts, states, steady, order, ctx.max_n,
                                 alpha=ctx.cfg["analysis.smoothing_alpha"],
                                 min_samples=ctx.cfg["analysis.min_samples"])
        names = ["calibration.csv"] if kind is ProtocolKind.SingleExposure else [
            exposure_archive_name(j) for j in range(len(dists))]
        for name, d in zip(names, dists):
            out[name] = ctx.output(name)
            write_archive(out[name], d)
        logger.info("Calibrated %d exposure(s) from %d trials", len(dists), batch.n_trials)
        # Thresholds act on counts summed over every exposure.
        hist.add(cumulative_roi_sums(batch.counts.sum(axis=1), order, ctx.roi_sizes), batch.prepared_bright)

    out[THRESHOLDS_NAME] = ctx.output(THRESHOLDS_NAME)
    write_thresholds_csv(out[THRESHOLDS_NAME], _threshold_rows(ctx, hist))
    write_manifest(ctx, {"stage": "calibrate", "calibration_trials": batch.n_trials})
    return out


def _archive_order(base: Path, kind: ProtocolKind) -> PixelOrder:
    name = exposure_archive_name(0) if kind is ProtocolKind.TimeResolved else "calibration.csv"
    return read_archive(base / name).order


def classifier_from_archives(ctx: RunContext, method: str, archive_dir: Optional[PathLike] = None) -> RoiClassifier:
    base = Path(archive_dir) if archive_dir is not None else ctx.out_dir
    kind = ctx.protocol.kind
    supported = CLASSIFY_METHODS[kind]
    if method not in supported:
        raise ConfigError("analysis.methods", f"classify supports {', '.join(supported)} for {kind.value}; "
                                              f"got '{method}'")
    r_stop = ctx.cfg["analysis.r_stop"]
    if method == "T":
        order = _archive_order(base, kind)
        thresholds = read_thresholds_csv(base / THRESHOLDS_NAME)
        return ThresholdClassifier({n: ThresholdRule.from_order(order, n, th) for n, th in thresholds.items()})
    if method in ("ST", "STA"):
        dists = [read_archive(base / exposure_archive_name(j)) for j in range(ctx.protocol.n_exposures)]
        stop = None if method == "ST" else (r_stop if r_stop > 0 else DEFAULT_R_STOP)
        return SpatioTemporalClassifier(dists, ctx.protocol.exposure_s, ctx.models.decay.lifetime_s, stop)
    if method in ("M", "A"):
        dists = read_archive(base / "calibration.csv")
        if method == "M":
            return MLClassifier(dists)
        return AdaptiveClassifier(dists, r_stop) if r_stop > 0 else AdaptiveClassifier(dists)
    arity = min(3 if method == "MN3" else ctx.cfg["analysis.neighbour_arity"], ctx.models.imaging.n_ions - 1)
    return NeighbourMLClassifier(read_archive(base / f"calibration_nu{arity}.csv"))


def write_verdicts_csv(path: PathLike, trial_ids: np.ndarray, truth: np.ndarray, verdicts: BatchVerdicts) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(VERDICT_COLUMNS)
        for i, trial in enumerate(trial_ids):
            for k in range(truth.shape[1]):
                writer.writerow([
                    int(trial),
                    k,
                    "0" if truth[i, k] else "1",
                    "0" if verdicts.bright[i, k] else "1",
                    repr(abs(float(verdicts.llr[i, k]))),
                    "" if verdicts.pixels_used is None else int(verdicts.pixels_used[i, k]),
                    "" if verdicts.exposures_used is None else int(verdicts.exposures_used[i, k]),
                    "" if verdicts.iterations is None else int(verdicts.iterations[i]),
                ])


def read_verdicts_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """(truth, verdict) bright masks, shape (n_trials, n_ions)."""
    rows: Dict[int, Dict[int, Tuple[bool, bool]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.setdefault(int(row["trial"]), {})[int(row["ion"])] = (row["truth"] == "0", row["verdict"] == "0")
            except (KeyError, ValueError) as e:
                raise FrameFormatError(f"{path}:{lineno}: bad verdict row: {e}") from e
    if not rows:
        raise FrameFormatError(f"{path} holds no verdicts")
    trials = sorted(rows)
    n_ions = len(rows[trials[0]])
    if any(sorted(rows[t]) != list(range(n_ions)) for t in trials):
        raise FrameFormatError(f"{path}: every trial needs one row per ion")
    truth = np.array([[rows[t][k][0] for k in range(n_ions)] for t in trials])
    verdict = np.array([[rows[t][k][1] for k in range(n_ions)] for t in trials])
    return truth, verdict


def readout_frames(batch: TrialBatch, method: str) -> Tuple[np.ndarray, np.ndarray]:
    """(frames, truth) a method classifies.

    Registers are read on the test exposure against the state during it.
    Time-resolved thresholding sums every exposure; ST and STA take them all.
    """
    kind = batch.protocol.kind
    if kind is ProtocolKind.Qunybble:
        return batch.counts[:, TEST_EXPOSURE], batch.exposure_states()[:, TEST_EXPOSURE]
    if kind is ProtocolKind.TimeResolved:
        frames = batch.counts if method in ("ST", "STA") else batch.counts.sum(axis=1)
        return frames, batch.prepared_bright
    return batch.counts[:, 0], batch.prepared_bright


def classify_to_file(ctx: RunContext, counts: np.ndarray, protocol: str, labels: List[TrialLabel],
                     method: str, roi_size: int, archive_dir: Optional[PathLike] = None) -> Path:
    batch = stored_batch(ctx, counts, protocol, labels)
    classifier = classifier_from_archives(ctx, method, archive_dir)
    frames, truth = readout_frames(batch, method)
    try:
        verdicts = classifier.predict(frames, roi_size)
    except ValueError as e:
        raise ConfigError("analysis.roi_max", f"{method} at N={roi_size}: {e}") from e
    path = ctx.output(VERDICTS_NAME)
    write_verdicts_csv(path, np.arange(len(labels)), truth, verdicts)
    logger.info("Classified %d trials with %s at N=%d", len(labels), method, roi_size)
    write_manifest(ctx, {"stage": "classify", "method": method, "N": roi_size})
    return path


def report_from_verdicts(ctx: RunContext, verdicts_path: PathLike, method: str, roi_size: int) -> EpsilonReport:
    truth, verdict = read_verdicts_csv(verdicts_path)
    sub = ctx.cfg["analysis.subtract_prep_error"] or None
    report = compute_epsilon(verdict, truth, sub, method=method, roi_size=roi_size)
    write_report_csv(ctx.output("report.csv"), [report])
    write_manifest(ctx, {"stage": "report", "method": method, "N": roi_size})
    return report
