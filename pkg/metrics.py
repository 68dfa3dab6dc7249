from dataclasses import dataclass
import csv
import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .classify import BatchVerdicts, RoiClassifier, optimize_threshold
from .core import check_shape

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

REPORT_COLUMNS = (
    "method", "N", "M", "epsilon", "epsilon_B", "epsilon_D", "sigma", "n_trials",
    "retained_fraction", "mean_pixels_used", "mean_exposures_used",
)


@dataclass(frozen=True)
class ErrorTally:
    """Qubit readouts and errors per prepared state, plus adaptive resource totals."""
    n_bright: int = 0
    n_dark: int = 0
    errors_bright: int = 0
    errors_dark: int = 0
    pixels_used: int = 0
    exposures_used: int = 0

    def __add__(self, other: "ErrorTally") -> "ErrorTally":
        return ErrorTally(
            self.n_bright + other.n_bright,
            self.n_dark + other.n_dark,
            self.errors_bright + other.errors_bright,
            self.errors_dark + other.errors_dark,
            self.pixels_used + other.pixels_used,
            self.exposures_used + other.exposures_used,
        )

    @property
    def n_readouts(self) -> int:
        return self.n_bright + self.n_dark

    @staticmethod
    def from_verdicts(verdicts: BatchVerdicts, truth_bright: np.ndarray) -> "ErrorTally":
        truth = np.asarray(truth_bright, dtype=bool)
        check_shape("truth_bright", truth, verdicts.bright.shape)
        wrong = verdicts.bright != truth
        return ErrorTally(
            n_bright=int(truth.sum()),
            n_dark=int((~truth).sum()),
            errors_bright=int((wrong & truth).sum()),
            errors_dark=int((wrong & ~truth).sum()),
            pixels_used=0 if verdicts.pixels_used is None else int(verdicts.pixels_used.sum()),
            exposures_used=0 if verdicts.exposures_used is None else int(verdicts.exposures_used.sum()),
        )


@dataclass(frozen=True)
class EpsilonReport:
    """ε = ½(ε_B + ε_D) with binomial standard errors for one method and ROI size.

    For registers the components pool every qubit readout of the stated kind.
    """
    method: str
    roi_size: int
    epsilon: float
    epsilon_b: float
    epsilon_d: float
    sigma: float
    sigma_b: float
    sigma_d: float
    n_trials: int
    n_bright: int
    n_dark: int
    n_exposures: Optional[int] = None
    total_trials: Optional[int] = None
    prep_error_subtracted: float = 0.0
    mean_pixels_used: Optional[float] = None
    mean_exposures_used: Optional[float] = None

    @property
    def retained(self) -> int:
        return self.n_trials

    @property
    def rejected(self) -> int:
        return 0 if self.total_trials is None else self.total_trials - self.n_trials

    @property
    def retained_fraction(self) -> Optional[float]:
        if self.total_trials is None:
            return None
        return self.n_trials / self.total_trials

    def __str__(self) -> str:
        return (f"{self.method} N={self.roi_size}: eps={self.epsilon:.3g}({self.sigma:.2g}) "
                f"eps_B={self.epsilon_b:.3g} eps_D={self.epsilon_d:.3g} n={self.n_trials}")


def _binomial_sigma(errors: int, n: int) -> Tuple[float, float]:
    if n == 0:
        return 0.0, 0.0
    p = errors / n
    return p, math.sqrt(p * (1.0 - p) / n)


def report_from_tally(
    tally: ErrorTally,
    method: str,
    roi_size: int,
    n_trials: int,
    n_exposures: Optional[int] = None,
    total_trials: Optional[int] = None,
    subtract_prep_error: Optional[float] = None,
    adaptive_pixels: bool = False,
    adaptive_exposures: bool = False,
) -> EpsilonReport:
    if tally.n_readouts == 0:
        raise ValueError("cannot compute epsilon from an empty tally")
    eps_b, sig_b = _binomial_sigma(tally.errors_bright, tally.n_bright)
    eps_d, sig_d = _binomial_sigma(tally.errors_dark, tally.n_dark)
    sub = 0.0
    if subtract_prep_error:
        # A preparation error contributes c to ε through 2c on ε_D.
        sub = float(subtract_prep_error)
        eps_d = max(eps_d - 2.0 * sub, 0.0)
    readouts = tally.n_readouts
    return EpsilonReport(
        method=method,
        roi_size=roi_size,
        epsilon=0.5 * (eps_b + eps_d),
        epsilon_b=eps_b,
        epsilon_d=eps_d,
        sigma=0.5 * math.sqrt(sig_b * sig_b + sig_d * sig_d),
        sigma_b=sig_b,
        sigma_d=sig_d,
        n_trials=n_trials,
        n_bright=tally.n_bright,
        n_dark=tally.n_dark,
        n_exposures=n_exposures,
        total_trials=total_trials,
        prep_error_subtracted=sub,
        mean_pixels_used=tally.pixels_used / readouts if adaptive_pixels else None,
        mean_exposures_used=tally.exposures_used / readouts if adaptive_exposures else None,
    )


def compute_epsilon(
    verdict_bright: np.ndarray,
    truth_bright: np.ndarray,
    subtract_prep_error: Optional[float] = None,
    method: str = "",
    roi_size: int = 0,
) -> EpsilonReport:
    """Report for aligned verdict and truth arrays, (n_trials,) or (n_trials, n_ions)."""
    verdict = np.asarray(verdict_bright, dtype=bool)
    truth = np.asarray(truth_bright, dtype=bool)
    if verdict.size == 0:
        raise ValueError("compute_epsilon needs at least one verdict")
    if verdict.ndim == 1:
        verdict, truth = verdict[:, None], truth[:, None]
    tally = ErrorTally.from_verdicts(BatchVerdicts(bright=verdict, llr=np.zeros(verdict.shape)), truth)
    return report_from_tally(tally, method, roi_size, verdict.shape[0], subtract_prep_error=subtract_prep_error)


def sweep_tallies(counts: np.ndarray, truth_bright: np.ndarray, classifier: RoiClassifier,
                  n_range: Iterable[int]) -> Dict[int, ErrorTally]:
    """Per-ROI-size tallies for one block of frames; merge blocks with `+`."""
    verdicts = classifier.sweep(counts, n_range)
    return {n: ErrorTally.from_verdicts(v, truth_bright) for n, v in verdicts.items()}


def merge_tallies(parts: Sequence[Dict[int, ErrorTally]]) -> Dict[int, ErrorTally]:
    out: Dict[int, ErrorTally] = {}
    for part in parts:
        for n, tally in part.items():
            out[n] = out.get(n, ErrorTally()) + tally
    return out


def sweep_roi(counts: np.ndarray, truth_bright: np.ndarray, classifier: RoiClassifier,
              n_range: Iterable[int], **report_kwargs) -> List[EpsilonReport]:
    """One report per ROI size with the classifier and its calibration fixed."""
    tallies = sweep_tallies(counts, truth_bright, classifier, n_range)
    return [
        report_from_tally(t, classifier.method, n, counts.shape[0], **report_kwargs)
        for n, t in tallies.items()
    ]


def threshold_tally(bright_hist: np.ndarray, dark_hist: np.ndarray) -> Tuple[int, ErrorTally]:
    """Optimal threshold for summed-count histograms and the errors it makes on them."""
    theta, _ = optimize_threshold(bright_hist, dark_hist)
    b = np.asarray(bright_hist, dtype=np.int64)
    d = np.asarray(dark_hist, dtype=np.int64)
    return theta, ErrorTally(
        n_bright=int(b.sum()),
        n_dark=int(d.sum()),
        errors_bright=int(b[:theta].sum()),
        errors_dark=int(d[theta:].sum()),
    )


def threshold_reports(bright_hist: np.ndarray, dark_hist: np.ndarray, roi_size: int,
                      method: str = "T", n_exposures: Optional[int] = None) -> Tuple[int, EpsilonReport]:
    """Optimal threshold for summed-count histograms and the report it achieves on them."""
    theta, tally = threshold_tally(bright_hist, dark_hist)
    return theta, report_from_tally(tally, method, roi_size, tally.n_readouts, n_exposures=n_exposures)


def rectangular_roi_sums(counts: np.ndarray, centres: np.ndarray, width: int, height: int) -> np.ndarray:
    """Counts (..., H, W) summed over a width x height box around each (row, col) centre -> (..., n_ions)."""
    h_img, w_img = counts.shape[-2:]
    sums = []
    for r, c in np.asarray(centres, dtype=float):
        top = max(int(math.floor(r - height / 2.0 + 0.5)), 0)
        left = max(int(math.floor(c - width / 2.0 + 0.5)), 0)
        box = counts[..., top:min(top + height, h_img), left:min(left + width, w_img)]
        sums.append(box.sum(axis=(-2, -1)))
    return np.stack(sums, axis=-1)


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold θ splitting a count histogram into {< θ} and {≥ θ} with maximal between-class variance."""
    h = np.asarray(hist, dtype=float)
    if h.sum() <= 0:
        raise ValueError("otsu_threshold needs a non-empty histogram")
    values = np.arange(h.size)
    w0 = np.cumsum(h)[:-1]
    m0 = np.cumsum(h * values)[:-1]
    total, mean_total = h.sum(), (h * values).sum()
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mean_total * w0 - total * m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    if between.size == 0 or between.max() < 0:
        return int(h.size)
    return int(np.argmax(between)) + 1


@dataclass(frozen=True, eq=False)
class PostSelection:
    """Outcome of pre/post post-selection; arrays are (n_trials, n_ions) unless noted."""
    # (n_trials,)
    retained: np.ndarray
    inferred_bright: np.ndarray

    @property
    def retained_fraction(self) -> float:
        return float(self.retained.mean()) if self.retained.size else 0.0


def postselect(pre: np.ndarray, post: np.ndarray, theta_lower, theta_upper) -> PostSelection:
    """Keep a trial only if every ion reads bright (both sums ≥ θ_u) or dark (both < θ_l).

    Thresholds are scalars or per-ion arrays.
    """
    lo = np.broadcast_to(np.asarray(theta_lower), pre.shape[-1:])
    hi = np.broadcast_to(np.asarray(theta_upper), pre.shape[-1:])
    if np.any(lo > hi):
        raise ValueError(f"lower threshold {lo} exceeds upper threshold {hi}")
    bright = (pre >= hi) & (post >= hi)
    dark = (pre < lo) & (post < lo)
    return PostSelection(retained=(bright | dark).all(axis=-1), inferred_bright=bright)


@dataclass(frozen=True)
class PostselectionThresholds:
    theta_lower: Tuple[int, ...]
    theta_upper: Tuple[int, ...]
    retained_fraction: float
    single_threshold_fraction: float


def tune_postselection(pre: np.ndarray, post: np.ndarray, target_retained: float = 0.95) -> PostselectionThresholds:
    """Widen a symmetric gap around each ion's Otsu threshold until at most
    `target_retained` of the trials survive (or the lower threshold reaches 0)."""
    check_shape("post", post, pre.shape)
    n_ions = pre.shape[-1]
    centre = np.array([
        otsu_threshold(np.bincount(np.concatenate([pre[:, k], post[:, k]]).astype(np.int64)))
        for k in range(n_ions)
    ])
    single = postselect(pre, post, centre, centre).retained_fraction
    gap = 0
    while True:
        lo = np.maximum(centre - gap, 0)
        hi = centre + gap
        frac = postselect(pre, post, lo, hi).retained_fraction
        if frac <= target_retained or lo.max() == 0:
            break
        gap += 1
    logger.info("Post-selection gap %d: thresholds %s..%s keep %.4f (single threshold %.4f)",
                gap, lo.tolist(), hi.tolist(), frac, single)
    return PostselectionThresholds(tuple(int(v) for v in lo), tuple(int(v) for v in hi), frac, single)


def tune_r_stop(adaptive: Dict[float, Sequence[EpsilonReport]], full_ml: Sequence[EpsilonReport]) -> float:
    """Smallest R_stop whose minimum ε over N is within one standard error of the full-ML minimum."""
    best_ml = min(full_ml, key=lambda r: r.epsilon)
    limit = best_ml.epsilon + best_ml.sigma
    for r_stop in sorted(adaptive):
        if min(rep.epsilon for rep in adaptive[r_stop]) <= limit:
            return r_stop
    return max(adaptive)


def minimum_report(reports: Sequence[EpsilonReport]) -> EpsilonReport:
    """Report with the smallest ε; the smallest N on ties."""
    return min(reports, key=lambda r: (r.epsilon, r.roi_size))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_row(rep: EpsilonReport) -> List[str]:
    return [_fmt(v) for v in (
        rep.method, rep.roi_size, rep.n_exposures, rep.epsilon, rep.epsilon_b, rep.epsilon_d,
        rep.sigma, rep.n_trials, rep.retained_fraction, rep.mean_pixels_used, rep.mean_exposures_used,
    )]


def write_report_csv(path: PathLike, reports: Sequence[EpsilonReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for rep in reports:
            writer.writerow(report_row(rep))


def read_report_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
