"""Experiment pipelines.

Trials are drawn in counter-derived blocks, so any pass over a data set can
be replayed bit for bit instead of being held in memory. Each pass is a
barrier: calibration is finished before anything is classified with it.
Block results are reduced in block order, which makes every output file
independent of the thread count.
"""
from dataclasses import dataclass, field
from importlib import metadata
import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from ..calibration import (
    DistributionSet,
    HistogramAccumulator,
    PixelOrder,
    accumulate_per_exposure,
    brightness_order,
    cumulative_signal,
    neighbour_sets,
    write_archive,
)
from ..classify import (
    AdaptiveClassifier,
    BatchVerdicts,
    MLClassifier,
    NeighbourMLClassifier,
    RoiClassifier,
    ThresholdClassifier,
    ThresholdRule,
    adaptive_stop,
    cumulative_exposure_log_likelihoods,
    optimize_threshold,
    running_spatiotemporal_log_ratios,
    spatiotemporal_log_likelihoods,
)
from ..emccd import expose_batch, readout_time
from ..metrics import (
    EpsilonReport,
    ErrorTally,
    PostselectionThresholds,
    merge_tallies,
    minimum_report,
    postselect,
    rectangular_roi_sums,
    report_from_tally,
    sweep_tallies,
    threshold_tally,
    tune_postselection,
    tune_r_stop,
    write_report_csv,
)
from ..optics import AiryPSF, crosstalk_fraction, disc_fraction, roi_diameter_for_pixels
from ..register_sim import (
    CHECK_EXPOSURE,
    POST_EXPOSURES,
    PRE_EXPOSURES,
    TEST_EXPOSURE,
    SimulationModels,
    TrialBatch,
    TrialProtocol,
    run_trial_batch,
    single_ion_bright_frames,
    state_during,
)
from ..runtime import BatchRuntime
from .config import ExperimentConfig
from .streams import block_starts, stream_for

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Exposures of a qunybble trial whose post-selected state is known: both pre and both post.
CALIBRATION_EXPOSURES = PRE_EXPOSURES + POST_EXPOSURES

MANIFEST_NAME = "manifest.json"
REPORT_NAME = "reports.csv"
CROSSTALK_NAME = "crosstalk.csv"


def package_version() -> str:
    try:
        return metadata.version("ionreadout")
    except metadata.PackageNotFoundError:
        return "unknown"


class SumHistograms:
    """Histograms of summed ROI counts per (ion, state, slot) with an associative merge.

    A slot is one ROI size, or one (exposure count, ROI size) pair.
    """

    def __init__(self, n_ions: int, n_slots: int):
        self.n_ions = n_ions
        self.n_slots = n_slots
        self.hist = np.zeros((n_ions, 2, n_slots, 1), dtype=np.int64)

    def _grow(self, n_counts: int) -> None:
        if n_counts > self.hist.shape[-1]:
            self.hist = np.pad(self.hist, [(0, 0)] * 3 + [(0, n_counts - self.hist.shape[-1])])

    def add(self, sums: np.ndarray, bright: np.ndarray) -> None:
        """`sums` (n, n_ions, n_slots), `bright` (n, n_ions)."""
        if sums.shape[0] == 0:
            return
        self._grow(int(sums.max()) + 1)
        c = self.hist.shape[-1]
        state = (~np.asarray(bright, dtype=bool)).astype(np.int64)
        ion = np.arange(self.n_ions)[None, :, None]
        slot = np.arange(self.n_slots)[None, None, :]
        flat = ((ion * 2 + state[:, :, None]) * self.n_slots + slot) * c + sums
        binned = np.bincount(flat.ravel(), minlength=self.hist.size)
        self.hist += binned.reshape(self.hist.shape)

    def merge(self, other: "SumHistograms") -> "SumHistograms":
        out = SumHistograms(self.n_ions, self.n_slots)
        out._grow(max(self.hist.shape[-1], other.hist.shape[-1]))
        out.hist[..., : self.hist.shape[-1]] += self.hist
        out.hist[..., : other.hist.shape[-1]] += other.hist
        return out

    def pair(self, ion: int, slot: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.hist[ion, 0, slot], self.hist[ion, 1, slot]

    def pooled_tally(self, slot: int) -> Tuple[Tuple[int, ...], ErrorTally]:
        """Per-ion optimal thresholds of one slot and their pooled errors."""
        thetas, total = [], ErrorTally()
        for k in range(self.n_ions):
            theta, tally = threshold_tally(*self.pair(k, slot))
            thetas.append(theta)
            total = total + tally
        return tuple(thetas), total


def cumulative_roi_sums(counts: np.ndarray, order: PixelOrder, roi_sizes: Sequence[int]) -> np.ndarray:
    """ROI sums of frames (..., H, W) at each size, shape (..., n_ions, n_sizes)."""
    idx = np.asarray(roi_sizes) - 1
    max_n = int(max(roi_sizes))
    return np.stack(
        [np.cumsum(order.gather(counts, k, max_n), axis=-1)[..., idx] for k in range(order.n_ions)], axis=-2
    )


def _reduce(parts: Sequence[T], merge: Callable[[T, T], T]) -> T:
    out = parts[0]
    for part in parts[1:]:
        out = merge(out, part)
    return out


@dataclass
class ExperimentResult:
    kind: str
    reports: List[EpsilonReport]
    out_dir: Path
    files: List[str]
    manifest: Dict[str, Any]


@dataclass
class RunContext:
    """What every pipeline shares: models, the runtime and the output bookkeeping."""
    cfg: ExperimentConfig
    models: SimulationModels
    protocol: TrialProtocol
    runtime: BatchRuntime
    out_dir: Path
    bright_counts: float
    files: List[str] = field(default_factory=list)
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def roi_sizes(self) -> Tuple[int, ...]:
        return self.cfg.roi_sizes

    @property
    def max_n(self) -> int:
        return max(self.roi_sizes)

    def blocks(self, n_trials: int) -> List[Tuple[int, int]]:
        size = self.cfg.block_size
        return [(first, min(size, n_trials - first)) for first in block_starts(n_trials, size)]

    def simulate(self, block: Tuple[int, int], purpose_tag: str = "trials") -> TrialBatch:
        first, n = block
        return run_trial_batch(self.protocol, self.models, self.cfg.seed, first, n, purpose_tag)

    def map_blocks(self, name: str, fn: Callable[[Tuple[int, int]], T], n_trials: int) -> List[T]:
        blocks = self.blocks(n_trials)
        logger.debug("%s: %d blocks", name, len(blocks))
        return self.runtime.map_ordered(name, fn, blocks)

    def output(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.out_dir / name

    def fit(self, acc: HistogramAccumulator, order: PixelOrder,
            neighbours: Optional[Tuple[Tuple[int, ...], ...]] = None) -> DistributionSet:
        return acc.finalize(
            order,
            neighbours,
            alpha=self.cfg["analysis.smoothing_alpha"],
            min_samples=self.cfg["analysis.min_samples"],
        )


def build_context(cfg: ExperimentConfig, runtime: Optional[BatchRuntime] = None,
                  out_dir: Optional[os.PathLike] = None) -> RunContext:
    bright_counts = cfg.bright_counts_per_400us()
    models, protocol = cfg.build_models(bright_counts)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return RunContext(cfg, models, protocol, runtime or BatchRuntime(cfg.threads), out, bright_counts)


# ---------------------------------------------------------------------------
# Alternating single-ion style experiments
# ---------------------------------------------------------------------------

def alternating_pixel_order(ctx: RunContext, n_trials: int) -> PixelOrder:
    """Order from the bright-minus-dark mean image of the calibration trials."""
    shape = ctx.models.imaging.shape

    def block(b: Tuple[int, int]) -> Tuple[np.ndarray, int, np.ndarray, int]:
        batch = ctx.simulate(b, "calibration")
        bright = batch.intended_bright[:, 0]
        frames_b = batch.counts[bright].reshape((-1,) + shape)
        frames_d = batch.counts[~bright].reshape((-1,) + shape)
        return (frames_b.sum(axis=0, dtype=np.float64), frames_b.shape[0],
                frames_d.sum(axis=0, dtype=np.float64), frames_d.shape[0])

    parts = ctx.map_blocks("order", block, n_trials)
    sum_b, n_b, sum_d, n_d = _reduce(parts, lambda a, c: (a[0] + c[0], a[1] + c[1], a[2] + c[2], a[3] + c[3]))
    if n_b == 0 or n_d == 0:
        raise ValueError("pixel order needs both bright and dark calibration trials")
    return brightness_order(sum_b / n_b - sum_d / n_d, ctx.models.imaging.ion_pixel_coordinates())


def _tuned_adaptive(ctx: RunContext, scans: Dict[float, Sequence[EpsilonReport]],
                    full: Sequence[EpsilonReport], key: str) -> float:
    fixed = ctx.cfg["analysis.r_stop"]
    r_stop = fixed if fixed > 0 else tune_r_stop(scans, full)
    ctx.manifest.setdefault("r_stop", {})[key] = r_stop
    ctx.manifest.setdefault("r_stop_scan", {})[key] = {
        repr(r): minimum_report(reps).epsilon for r, reps in sorted(scans.items())
    }
    logger.info("%s: R_stop = %g", key, r_stop)
    return r_stop


def _r_stop_candidates(cfg: ExperimentConfig) -> Tuple[float, ...]:
    fixed = cfg["analysis.r_stop"]
    return (fixed,) if fixed > 0 else cfg.r_stop_grid


def _record_readout_time(ctx: RunContext, n_exposures: int, adaptive: Optional[EpsilonReport] = None) -> None:
    """Wall time per readout with every frame read in full; for a temporally adaptive
    readout, at the mean number of exposures of its best ROI size."""
    imaging, camera = ctx.models.imaging, ctx.models.camera
    n_pixels = imaging.width_px * imaging.height_px
    budget = {"full": readout_time(camera, ctx.protocol.exposure_s, n_pixels, n_exposures)}
    if adaptive is not None and adaptive.mean_exposures_used is not None:
        budget[adaptive.method] = readout_time(camera, ctx.protocol.exposure_s, n_pixels, adaptive.mean_exposures_used)
    ctx.manifest["readout_time_s"] = budget


def run_single_exposure(ctx: RunContext) -> List[EpsilonReport]:
    cfg, sizes = ctx.cfg, ctx.roi_sizes
    methods = cfg.methods
    n_ions = ctx.models.imaging.n_ions
    sub = cfg["analysis.subtract_prep_error"] or None

    logger.info("Calibrating on %d trials", cfg.calibration_trials)
    order = alternating_pixel_order(ctx, cfg.calibration_trials)

    def calibrate(b: Tuple[int, int]) -> HistogramAccumulator:
        batch = ctx.simulate(b, "calibration")
        acc = HistogramAccumulator(n_ions, ctx.max_n)
        acc.add_frames(batch.counts[:, 0], batch.intended_bright, order)
        return acc

    acc = _reduce(ctx.map_blocks("calibrate", calibrate, cfg.calibration_trials), HistogramAccumulator.merge)
    dists = ctx.fit(acc, order)
    write_archive(ctx.output("calibration.csv"), dists)

    r_grid = _r_stop_candidates(cfg)

    def evaluate(b: Tuple[int, int]) -> Dict[str, Any]:
        batch = ctx.simulate(b)
        counts, truth = batch.counts[:, 0], batch.intended_bright
        out: Dict[str, Any] = {}
        if "T" in methods:
            hist = SumHistograms(n_ions, len(sizes))
            hist.add(cumulative_roi_sums(counts, order, sizes), truth)
            out["T"] = hist
        if "M" in methods:
            out["M"] = sweep_tallies(counts, truth, MLClassifier(dists), sizes)
        if "A" in methods:
            out["A"] = {r: sweep_tallies(counts, truth, AdaptiveClassifier(dists, r), sizes) for r in r_grid}
        return out

    logger.info("Classifying %d test trials with %s", cfg.trials, ",".join(methods))
    parts = ctx.map_blocks("evaluate", evaluate, cfg.trials)
    reports: List[EpsilonReport] = []

    if "T" in methods:
        hist = _reduce([p["T"] for p in parts], SumHistograms.merge)
        t_reports, thetas = [], {}
        for i, n in enumerate(sizes):
            thetas[n], tally = hist.pooled_tally(i)
            t_reports.append(report_from_tally(tally, "T", n, cfg.trials, subtract_prep_error=sub))
        best = minimum_report(t_reports)
        ctx.manifest["threshold"] = {"N": best.roi_size, "thresholds": list(thetas[best.roi_size])}
        reports += t_reports

    full_ml: List[EpsilonReport] = []
    if "M" in methods:
        tallies = merge_tallies([p["M"] for p in parts])
        full_ml = [report_from_tally(tallies[n], "M", n, cfg.trials, subtract_prep_error=sub) for n in sizes]
        reports += full_ml

    if "A" in methods:
        scans = {}
        for r in r_grid:
            tallies = merge_tallies([p["A"][r] for p in parts])
            scans[r] = [report_from_tally(tallies[n], "A", n, cfg.trials, subtract_prep_error=sub,
                                          adaptive_pixels=True) for n in sizes]
        r_stop = _tuned_adaptive(ctx, scans, full_ml or scans[max(scans)], "A")
        reports += scans[r_stop]
    _record_readout_time(ctx, 1)
    return reports


def run_time_resolved(ctx: RunContext) -> List[EpsilonReport]:
    cfg, sizes, protocol = ctx.cfg, ctx.roi_sizes, ctx.protocol
    methods = cfg.methods
    n_ions = ctx.models.imaging.n_ions
    n_exp = protocol.n_exposures
    t_s, tau = protocol.exposure_s, ctx.models.decay.lifetime_s
    sub = cfg["analysis.subtract_prep_error"] or None

    logger.info("Calibrating %d exposures on %d trials", n_exp, cfg.calibration_trials)
    order = alternating_pixel_order(ctx, cfg.calibration_trials)

    def calibrate(b: Tuple[int, int]) -> List[HistogramAccumulator]:
        batch = ctx.simulate(b, "calibration")
        return accumulate_per_exposure(batch.counts, batch.exposure_states(), batch.steady_exposures(),
                                       order, ctx.max_n)

    parts = ctx.map_blocks("calibrate", calibrate, cfg.calibration_trials)
    dists = [ctx.fit(_reduce([p[j] for p in parts], HistogramAccumulator.merge), order) for j in range(n_exp)]
    for j, d in enumerate(dists):
        write_archive(ctx.output(f"calibration_exposure_{j + 1:02d}.csv"), d)

    r_grid = _r_stop_candidates(cfg)
    size_idx = np.asarray(sizes) - 1

    def evaluate(b: Tuple[int, int]) -> Dict[str, Any]:
        batch = ctx.simulate(b)
        counts, truth = batch.counts, batch.intended_bright
        out: Dict[str, Any] = {}
        if "T" in methods:
            per_ion = []
            for k in range(n_ions):
                ranks = np.cumsum(order.gather(counts, k, ctx.max_n), axis=-1)[..., size_idx]
                per_ion.append(np.cumsum(ranks, axis=1).reshape(counts.shape[0], -1))
            hist = SumHistograms(n_ions, n_exp * len(sizes))
            hist.add(np.stack(per_ion, axis=1), truth)
            out["T"] = hist
        if "ST" not in methods and "STA" not in methods:
            return out
        cum = [cumulative_exposure_log_likelihoods(counts, dists, ctx.max_n, k) for k in range(n_ions)]
        if "ST" in methods:
            st: Dict[Tuple[int, int], ErrorTally] = {}
            for m in range(1, n_exp + 1):
                for n in sizes:
                    llr = np.stack([
                        np.subtract(*spatiotemporal_log_likelihoods(lb[:, :m, n - 1], ld[:, :m, n - 1], t_s, tau))
                        for lb, ld in cum
                    ], axis=-1)
                    st[(m, n)] = ErrorTally.from_verdicts(BatchVerdicts(bright=llr > 0, llr=llr), truth)
            out["ST"] = st
        if "STA" in methods:
            sta: Dict[float, Dict[int, ErrorTally]] = {}
            for r in r_grid:
                sta[r] = {}
                for n in sizes:
                    cols = [
                        adaptive_stop(running_spatiotemporal_log_ratios(lb[..., n - 1], ld[..., n - 1], t_s, tau), r)
                        for lb, ld in cum
                    ]
                    verdicts = BatchVerdicts(
                        bright=np.stack([c[0] for c in cols], axis=-1),
                        llr=np.stack([c[1] for c in cols], axis=-1),
                        exposures_used=np.stack([c[2] for c in cols], axis=-1),
                    )
                    sta[r][n] = ErrorTally.from_verdicts(verdicts, truth)
            out["STA"] = sta
        return out

    logger.info("Classifying %d test trials with %s", cfg.trials, ",".join(methods))
    parts = ctx.map_blocks("evaluate", evaluate, cfg.trials)
    reports: List[EpsilonReport] = []

    if "T" in methods:
        hist = _reduce([p["T"] for p in parts], SumHistograms.merge)
        for m in range(1, n_exp + 1):
            for i, n in enumerate(sizes):
                _, tally = hist.pooled_tally((m - 1) * len(sizes) + i)
                reports.append(report_from_tally(tally, "T", n, cfg.trials, n_exposures=m, subtract_prep_error=sub))

    full_st: List[EpsilonReport] = []
    if "ST" in methods:
        merged: Dict[Tuple[int, int], ErrorTally] = {}
        for p in parts:
            for key, tally in p["ST"].items():
                merged[key] = merged.get(key, ErrorTally()) + tally
        for m in range(1, n_exp + 1):
            reps = [report_from_tally(merged[(m, n)], "ST", n, cfg.trials, n_exposures=m, subtract_prep_error=sub)
                    for n in sizes]
            reports += reps
            if m == n_exp:
                full_st = reps

    adaptive: Optional[EpsilonReport] = None
    if "STA" in methods:
        scans = {}
        for r in r_grid:
            tallies = merge_tallies([p["STA"][r] for p in parts])
            scans[r] = [report_from_tally(tallies[n], "STA", n, cfg.trials, n_exposures=n_exp,
                                          subtract_prep_error=sub, adaptive_exposures=True) for n in sizes]
        r_stop = _tuned_adaptive(ctx, scans, full_st or scans[max(scans)], "STA")
        reports += scans[r_stop]
        adaptive = minimum_report(scans[r_stop])
    _record_readout_time(ctx, n_exp, adaptive)
    return reports


# ---------------------------------------------------------------------------
# Four-ion register with post-selection
# ---------------------------------------------------------------------------

def _pre_post(ctx: RunContext, batch: TrialBatch) -> Tuple[np.ndarray, np.ndarray]:
    centres = ctx.models.imaging.ion_pixel_coordinates()
    w, h = ctx.cfg["analysis.postselect_width_px"], ctx.cfg["analysis.postselect_height_px"]
    counts = batch.counts
    pre = rectangular_roi_sums(counts[:, PRE_EXPOSURES[0]] + counts[:, PRE_EXPOSURES[1]], centres, w, h)
    post = rectangular_roi_sums(counts[:, POST_EXPOSURES[0]] + counts[:, POST_EXPOSURES[1]], centres, w, h)
    return pre, post


def postselection_audit(batch: TrialBatch, keep: np.ndarray, inferred: np.ndarray) -> Dict[str, int]:
    """Ground-truth check of post-selection over the retained trials.

    `state_errors` counts retained trials whose inferred state differs from the
    state during the test exposure. Retained trials with a decay are split by
    whether it happened before the end of the test exposure or after it.
    """
    test_end = float(batch.exposure_starts[TEST_EXPOSURE]) + batch.protocol.exposure_s
    decayed = ~np.isnan(batch.decay_times[keep])
    by_test = batch.decayed_before(test_end)[keep]
    return {
        "retained": int(keep.sum()),
        "state_errors": int((inferred != state_during(batch, TEST_EXPOSURE)[keep]).any(axis=-1).sum()),
        "decay_escapes_by_test": int(by_test.any(axis=-1).sum()),
        "decay_escapes_after_test": int((decayed & ~by_test).any(axis=-1).sum()),
    }


def register_pixel_order(ctx: RunContext, check_mean: np.ndarray) -> PixelOrder:
    """Brightness order from the all-bright check exposures, or from single-ion-bright frames."""
    imaging = ctx.models.imaging
    if ctx.cfg["analysis.order_source"] == "check":
        return brightness_order(check_mean, imaging.ion_pixel_coordinates())
    n_frames = ctx.cfg["analysis.order_frames"]

    def ion_mean(k: int) -> np.ndarray:
        rng = stream_for(ctx.cfg.seed, k, "order")
        frames = single_ion_bright_frames(ctx.models, k, n_frames, ctx.protocol.exposure_s, rng)
        return frames.mean(axis=0)

    return brightness_order(np.stack(ctx.runtime.map_ordered("order", ion_mean, range(imaging.n_ions))))


def neighbour_arities(cfg: ExperimentConfig, n_ions: int) -> Dict[str, int]:
    out = {}
    if "MN" in cfg.methods:
        out["MN"] = min(cfg["analysis.neighbour_arity"], n_ions - 1)
    if "MN3" in cfg.methods:
        out["MN3"] = min(3, n_ions - 1)
    return {m: a for m, a in out.items() if a > 0}


def run_qunybble(ctx: RunContext) -> List[EpsilonReport]:
    cfg, sizes = ctx.cfg, ctx.roi_sizes
    methods = cfg.methods
    imaging = ctx.models.imaging
    n_ions, shape = imaging.n_ions, imaging.shape
    sub = cfg["analysis.subtract_prep_error"] or None

    # Pass 1: pre/post sums for threshold tuning and the mean check image.
    def survey(b: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        batch = ctx.simulate(b)
        pre, post = _pre_post(ctx, batch)
        return pre, post, batch.counts[:, CHECK_EXPOSURE].sum(axis=0, dtype=np.float64)

    logger.info("Post-selection survey of %d trials", cfg.trials)
    parts = ctx.map_blocks("survey", survey, cfg.trials)
    pre = np.concatenate([p[0] for p in parts])
    post = np.concatenate([p[1] for p in parts])
    check_mean = _reduce([p[2] for p in parts], np.add) / cfg.trials
    thresholds = tune_postselection(pre, post, cfg["analysis.retained_target"])
    ctx.manifest["postselection"] = {
        "theta_lower": list(thresholds.theta_lower),
        "theta_upper": list(thresholds.theta_upper),
        "retained_fraction": thresholds.retained_fraction,
        "single_threshold_retained_fraction": thresholds.single_threshold_fraction,
        "box_px": [cfg["analysis.postselect_width_px"], cfg["analysis.postselect_height_px"]],
    }
    order = register_pixel_order(ctx, check_mean)

    def select(batch: TrialBatch, th: PostselectionThresholds) -> Tuple[np.ndarray, np.ndarray]:
        p, q = _pre_post(ctx, batch)
        sel = postselect(p, q, np.asarray(th.theta_lower), np.asarray(th.theta_upper))
        return sel.retained, sel.inferred_bright[sel.retained]

    arities = neighbour_arities(cfg, n_ions)
    neighbours = {a: neighbour_sets(imaging.ion_positions_um, a) for a in set(arities.values())}

    # Pass 2: calibration from the pre/post exposures of retained trials.
    def calibrate(b: Tuple[int, int]) -> Dict[Any, Any]:
        batch = ctx.simulate(b)
        keep, inferred = select(batch, thresholds)
        frames = batch.counts[keep][:, list(CALIBRATION_EXPOSURES)].reshape((-1,) + shape)
        labels = np.repeat(inferred, len(CALIBRATION_EXPOSURES), axis=0)
        out: Dict[Any, Any] = {}
        acc = HistogramAccumulator(n_ions, ctx.max_n)
        acc.add_frames(frames, labels, order)
        out[0] = acc
        for a, nbrs in neighbours.items():
            acc = HistogramAccumulator(n_ions, ctx.max_n, a)
            acc.add_frames(frames, labels, order, nbrs)
            out[a] = acc
        if "T" in methods:
            hist = SumHistograms(n_ions, len(sizes))
            hist.add(cumulative_roi_sums(frames, order, sizes), labels)
            out["T"] = hist
        out.update(postselection_audit(batch, keep, inferred))
        return out

    logger.info("Calibrating from retained trials")
    parts = ctx.map_blocks("calibrate", calibrate, cfg.trials)
    retained = sum(p["retained"] for p in parts)
    if retained == 0:
        raise ValueError("post-selection retained no trials")
    ctx.manifest["postselection"].update({
        "retained_trials": retained,
        "state_errors": sum(p["state_errors"] for p in parts),
        "decay_escapes_by_test": sum(p["decay_escapes_by_test"] for p in parts),
        "decay_escapes_after_test": sum(p["decay_escapes_after_test"] for p in parts),
    })

    dists: Dict[int, DistributionSet] = {}
    for a in [0] + sorted(neighbours):
        acc = _reduce([p[a] for p in parts], HistogramAccumulator.merge)
        dists[a] = ctx.fit(acc, order, neighbours.get(a))
        write_archive(ctx.output("calibration.csv" if a == 0 else f"calibration_nu{a}.csv"), dists[a])

    classifiers: Dict[str, RoiClassifier] = {}
    if "T" in methods:
        hist = _reduce([p["T"] for p in parts], SumHistograms.merge)
        rules = {}
        for i, n in enumerate(sizes):
            thetas = [optimize_threshold(*hist.pair(k, i))[0] for k in range(n_ions)]
            rules[n] = ThresholdRule.from_order(order, n, thetas)
        classifiers["T"] = ThresholdClassifier(rules)
    if "M" in methods:
        classifiers["M"] = MLClassifier(dists[0])
    for method, a in arities.items():
        classifiers[method] = NeighbourMLClassifier(dists[a])

    # Pass 3: classify the test exposure of retained trials.
    def evaluate(b: Tuple[int, int]) -> Dict[str, Dict[int, ErrorTally]]:
        batch = ctx.simulate(b)
        keep, inferred = select(batch, thresholds)
        test = batch.counts[keep, TEST_EXPOSURE]
        return {m: sweep_tallies(test, inferred, c, sizes) for m, c in classifiers.items()}

    logger.info("Classifying %d retained trials with %s", retained, ",".join(classifiers))
    parts = ctx.map_blocks("evaluate", evaluate, cfg.trials)
    reports: List[EpsilonReport] = []
    for method in classifiers:
        tallies = merge_tallies([p[method] for p in parts])
        reports += [report_from_tally(tallies[n], method, n, retained, total_trials=cfg.trials,
                                      subtract_prep_error=sub) for n in sizes]
    if "T" in classifiers:
        best = minimum_report([r for r in reports if r.method == "T"])
        ctx.manifest["threshold"] = {
            "N": best.roi_size, "thresholds": list(classifiers["T"].rules[best.roi_size].thresholds),
        }
    return reports


# ---------------------------------------------------------------------------
# Cross-talk study
# ---------------------------------------------------------------------------

CROSSTALK_COLUMNS = (
    "target_ion", "source_ion", "rank", "roi_diameter_um",
    "measured_fraction", "model_fraction", "diffraction_limited_fraction",
)


def run_crosstalk_study(ctx: RunContext) -> List[List[str]]:
    """Cumulative signal of every ion inside each target ion's brightest pixels.

    The diffraction-limited column is an Airy pattern of the configured
    aperture with ten times smaller spacing and ROI diameter.
    """
    cfg, imaging, camera = ctx.cfg, ctx.models.imaging, ctx.models.camera
    n_frames = cfg["analysis.order_frames"]
    t_s = ctx.protocol.exposure_s
    max_rank = ctx.max_n

    def ion_mean(k: int) -> np.ndarray:
        frames = single_ion_bright_frames(ctx.models, k, n_frames, t_s, stream_for(cfg.seed, k, "crosstalk"))
        return frames.mean(axis=0)

    means = np.stack(ctx.runtime.map_ordered("crosstalk", ion_mean, range(imaging.n_ions)))
    dark = expose_batch(camera, np.zeros((n_frames,) + imaging.shape),
                        stream_for(cfg.seed, 0, "crosstalk-dark")).mean(axis=0)
    images = means - dark[None]
    order = brightness_order(images)

    airy = AiryPSF(cfg["optics.wavelength_nm"] * 1e-9, cfg["optics.numerical_aperture"])
    pitch = imaging.pixel_pitch_um
    positions = np.asarray(imaging.ion_positions_um)
    diameters = [roi_diameter_for_pixels(r, pitch) for r in range(1, max_rank + 1)]

    rows: List[List[str]] = []
    nearest: Dict[str, float] = {}
    for target in range(imaging.n_ions):
        measured = cumulative_signal(images, order, target, max_rank)
        model = cumulative_signal(imaging.fraction_maps, order, target, max_rank)
        for source in range(imaging.n_ions):
            offset = float(np.hypot(*(positions[target] - positions[source]))) / 10.0
            for r in range(max_rank):
                limit = disc_fraction(airy, offset, diameters[r] / 20.0)
                rows.append([str(target), str(source), str(r + 1), repr(diameters[r]),
                             repr(float(measured[source, r])), repr(float(model[source, r])), repr(limit)])
            if abs(target - source) == 1:
                # Circular ROI one spacing across, centred on the neighbour.
                nearest[f"{source}->{target}"] = crosstalk_fraction(
                    imaging, tuple(positions[target]), cfg["ions.spacing_um"], source)
    ctx.manifest["crosstalk_at_spacing"] = nearest
    return rows


def write_crosstalk_csv(path: os.PathLike, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CROSSTALK_COLUMNS)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def write_manifest(ctx: RunContext, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = ctx.output(MANIFEST_NAME)
    manifest = {
        "version": package_version(),
        "experiment": ctx.cfg.kind,
        "seed": ctx.cfg.seed,
        "config": ctx.cfg.as_dict(),
        "bright_counts_per_400us": ctx.bright_counts,
        "per_ion_bright_rate_hz": ctx.models.imaging.per_ion_bright_rate,
        "grid_px": [ctx.models.imaging.width_px, ctx.models.imaging.height_px],
        **ctx.manifest,
        **(extra or {}),
    }
    manifest["files"] = sorted(ctx.files)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


PIPELINES: Dict[str, Callable[[RunContext], List[EpsilonReport]]] = {
    "single_exposure": run_single_exposure,
    "time_resolved": run_time_resolved,
    "qunybble": run_qunybble,
}


def run_experiment(cfg: ExperimentConfig, runtime: Optional[BatchRuntime] = None,
                   out_dir: Optional[os.PathLike] = None) -> ExperimentResult:
    """Simulate, calibrate, classify and sweep N; write reports and the manifest."""
    ctx = build_context(cfg, runtime, out_dir)
    logger.info("Running %s (seed %d, %d trials, %d threads) into %s",
                cfg.kind, cfg.seed, cfg.trials, ctx.runtime.threads, ctx.out_dir)

    reports: List[EpsilonReport] = []
    if cfg.kind == "crosstalk_study":
        write_crosstalk_csv(ctx.output(CROSSTALK_NAME), run_crosstalk_study(ctx))
    else:
        reports = PIPELINES[cfg.kind](ctx)
        write_report_csv(ctx.output(REPORT_NAME), reports)
        for method in dict.fromkeys(r.method for r in reports):
            logger.info("Minimum %s", minimum_report([r for r in reports if r.method == method]))
    write_manifest(ctx)
    logger.info("Wrote %s", ", ".join(sorted(ctx.files)))
    return ExperimentResult(cfg.kind, reports, ctx.out_dir, list(ctx.files), dict(ctx.manifest))
