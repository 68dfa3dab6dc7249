"""Readout classifiers.

Every classifier has a vectorised batch form working on blocks of frames and
a single-frame wrapper returning a `Verdict`. Likelihoods are accumulated as
cumulative sums over pixels in brightness order, so the verdict at ROI size N
and the adaptive verdict that never stops early are the same number.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
import math
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from overrides import override
from scipy.special import logsumexp

from .calibration import DistributionSet, PixelOrder, neighbour_codes
from .core import ModelValidityError, RegisterState, code_to_bright
from .emccd import Frame

logger = logging.getLogger(__name__)

# -ln(1e-6)
DEFAULT_R_STOP = 13.815510557964274

FrameLike = Union[Frame, np.ndarray]


@dataclass(frozen=True)
class Verdict:
    state_estimate: RegisterState
    log_likelihood_ratios: Tuple[float, ...]
    pixels_used: Optional[Tuple[int, ...]] = None
    exposures_used: Optional[int] = None
    iterations: Optional[int] = None

    @property
    def estimated_error(self) -> float:
        """Σ_k exp(-R_k), the estimated probability of any readout error."""
        return float(sum(math.exp(-r) for r in self.log_likelihood_ratios))


@dataclass(frozen=True, eq=False)
class BatchVerdicts:
    """Verdicts for a block of frames; arrays are (n_frames, n_ions) unless noted."""
    bright: np.ndarray
    llr: np.ndarray
    pixels_used: Optional[np.ndarray] = None
    exposures_used: Optional[np.ndarray] = None
    # (n_frames,)
    iterations: Optional[np.ndarray] = None

    def verdict(self, i: int) -> Verdict:
        return Verdict(
            state_estimate=RegisterState.from_bright_mask(self.bright[i]),
            log_likelihood_ratios=tuple(float(r) for r in np.abs(self.llr[i])),
            pixels_used=None if self.pixels_used is None else tuple(int(p) for p in self.pixels_used[i]),
            exposures_used=None if self.exposures_used is None else int(self.exposures_used[i].max()),
            iterations=None if self.iterations is None else int(self.iterations[i]),
        )


@dataclass(frozen=True, eq=False)
class ThresholdRule:
    """Per-ion ROI pixel sets (flat indices) and integer count thresholds."""
    rois: Tuple[np.ndarray, ...]
    thresholds: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.rois) != len(self.thresholds):
            raise ValueError("ThresholdRule needs one threshold per ROI")
        if any(t < 0 for t in self.thresholds):
            raise ValueError(f"thresholds must be >= 0, got {self.thresholds}")

    @staticmethod
    def from_order(order: PixelOrder, roi_size: int, thresholds: Sequence[int]) -> "ThresholdRule":
        return ThresholdRule(tuple(order.roi(k, roi_size) for k in range(order.n_ions)), tuple(thresholds))

    def sums(self, counts: np.ndarray) -> np.ndarray:
        """ROI sums (..., n_ions) of frames (..., H, W)."""
        flat = counts.reshape(counts.shape[:-2] + (-1,))
        for roi in self.rois:
            if roi.size and roi.max() >= flat.shape[-1]:
                raise ValueError("ROI pixel outside the frame")
        return np.stack([flat[..., roi].sum(axis=-1) for roi in self.rois], axis=-1)


def _counts(frame: FrameLike) -> np.ndarray:
    return frame.counts if isinstance(frame, Frame) else np.asarray(frame)


def optimize_threshold(bright_hist: np.ndarray, dark_hist: np.ndarray) -> Tuple[int, float]:
    """Threshold θ (bright iff sum ≥ θ) minimising ½(P_B(sum < θ) + P_D(sum ≥ θ)).

    Histograms are occurrence counts indexed by summed counts. Integer
    comparison makes the scan exact; ties go to the smallest θ.
    """
    b = np.asarray(bright_hist, dtype=np.int64)
    d = np.asarray(dark_hist, dtype=np.int64)
    n_b, n_d = int(b.sum()), int(d.sum())
    if n_b == 0 or n_d == 0:
        raise ValueError("optimize_threshold needs non-empty bright and dark histograms")
    size = max(b.size, d.size) + 1
    cb = np.concatenate([[0], np.cumsum(np.pad(b, (0, size - b.size)))])[:size]
    cd = np.concatenate([[0], np.cumsum(np.pad(d, (0, size - d.size)))])[:size]
    # cb[θ] = bright trials with sum < θ; n_d - cd[θ] = dark trials with sum ≥ θ.
    cost = cb * n_d + (n_d - cd) * n_b
    theta = int(np.argmin(cost))
    eps = 0.5 * (cb[theta] / n_b + (n_d - cd[theta]) / n_d)
    return theta, float(eps)


def fit_threshold_rule(counts: np.ndarray, bright: np.ndarray, order: PixelOrder,
                       roi_size: int) -> Tuple[ThresholdRule, Tuple[float, ...]]:
    """Per-ion optimal thresholds from labelled calibration frames; also returns predicted ε per ion."""
    thresholds, predicted = [], []
    for k in range(order.n_ions):
        sums = order.gather(counts, k, roi_size).sum(axis=-1)
        theta, eps = optimize_threshold(np.bincount(sums[bright[:, k]]), np.bincount(sums[~bright[:, k]]))
        thresholds.append(theta)
        predicted.append(eps)
    return ThresholdRule.from_order(order, roi_size, thresholds), tuple(predicted)


def threshold_batch(counts: np.ndarray, rule: ThresholdRule) -> BatchVerdicts:
    """Counts (n, H, W) or summed over exposures beforehand."""
    sums = rule.sums(counts)
    bright = sums >= np.asarray(rule.thresholds)
    return BatchVerdicts(bright=bright, llr=np.zeros(bright.shape))


def classify_threshold(frame: FrameLike, rule: ThresholdRule) -> Verdict:
    return threshold_batch(_counts(frame)[None], rule).verdict(0)


def threshold_summed(frames: Sequence[FrameLike], rule: ThresholdRule) -> Verdict:
    """Threshold applied to ROI counts summed over all exposures of a trial."""
    total = np.sum([_counts(f) for f in frames], axis=0)
    return classify_threshold(total, rule)


def ml_log_ratios(counts: np.ndarray, dists: DistributionSet, max_n: int, ion: int) -> np.ndarray:
    """Cumulative log(p_B / p_D) of one ion over ranks 1..max_n, shape (n, max_n).

    Uses the first neighbour condition; intended for neighbour-ignorant sets.
    """
    roi = dists.order.gather(counts, ion, max_n)
    lp = dists.rank_log_probs(ion, roi)
    return np.cumsum(lp[:, 0, 0, :] - lp[:, 1, 0, :], axis=-1)


def ml_batch(counts: np.ndarray, dists: DistributionSet, roi_size: int) -> BatchVerdicts:
    llr = np.stack([ml_log_ratios(counts, dists, roi_size, k)[:, -1] for k in range(dists.n_ions)], axis=-1)
    # Ties go to dark.
    return BatchVerdicts(bright=llr > 0, llr=llr)


def classify_ml(frame: FrameLike, dists: DistributionSet, roi_size: int) -> Verdict:
    return ml_batch(_counts(frame)[None], dists, roi_size).verdict(0)


def adaptive_stop(cum_llr: np.ndarray, r_stop: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stop at the first rank where |cumulative log-ratio| ≥ r_stop, else at the last.

    Returns (bright, log-ratio at stop, pixels used) from (n, N) cumulative log-ratios.
    """
    if not r_stop > 0:
        raise ValueError(f"R_stop must be positive, got {r_stop}")
    n, max_n = cum_llr.shape
    hit = np.abs(cum_llr) >= r_stop
    stop = np.where(hit.any(axis=-1), np.argmax(hit, axis=-1), max_n - 1)
    at_stop = cum_llr[np.arange(n), stop]
    return at_stop > 0, at_stop, stop + 1


def adaptive_batch(counts: np.ndarray, dists: DistributionSet, r_stop: float, max_n: int) -> BatchVerdicts:
    cols = [adaptive_stop(ml_log_ratios(counts, dists, max_n, k), r_stop) for k in range(dists.n_ions)]
    return BatchVerdicts(
        bright=np.stack([c[0] for c in cols], axis=-1),
        llr=np.stack([c[1] for c in cols], axis=-1),
        pixels_used=np.stack([c[2] for c in cols], axis=-1),
    )


def classify_adaptive(frame: FrameLike, dists: DistributionSet, r_stop: float = DEFAULT_R_STOP,
                      max_n: Optional[int] = None) -> Verdict:
    max_n = dists.roi_size if max_n is None else max_n
    return adaptive_batch(_counts(frame)[None], dists, r_stop, max_n).verdict(0)


def _decay_weight(n_exposures: int, t_s: float, tau: float) -> float:
    q = t_s / tau
    if n_exposures * q >= 1.0:
        raise ModelValidityError(
            f"{n_exposures} exposures of {t_s:g} s reach the decay lifetime {tau:g} s; the mixture is invalid"
        )
    return q


def cumulative_exposure_log_likelihoods(counts: np.ndarray, dists_per_exposure: Sequence[DistributionSet],
                                        max_n: int, ion: int) -> Tuple[np.ndarray, np.ndarray]:
    """Rank-cumulative (log p_Bj, log p_Dj) of frames (n, M, H, W), each shape (n, M, max_n)."""
    log_b, log_d = [], []
    for j in range(counts.shape[1]):
        d = dists_per_exposure[j]
        lp = d.rank_log_probs(ion, d.order.gather(counts[:, j], ion, max_n))
        log_b.append(np.cumsum(lp[:, 0, 0, :], axis=-1))
        log_d.append(np.cumsum(lp[:, 1, 0, :], axis=-1))
    return np.stack(log_b, axis=1), np.stack(log_d, axis=1)


def exposure_log_likelihoods(counts: np.ndarray, dists_per_exposure: Sequence[DistributionSet],
                             roi_size: int, ion: int) -> Tuple[np.ndarray, np.ndarray]:
    """(log p_Bj, log p_Dj) per exposure of frames (n, M, H, W), each shape (n, M)."""
    log_b, log_d = cumulative_exposure_log_likelihoods(counts, dists_per_exposure, roi_size, ion)
    return log_b[..., -1], log_d[..., -1]


def spatiotemporal_log_likelihoods(log_b: np.ndarray, log_d: np.ndarray, t_s: float,
                                   tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Total (log p_B, log p_D) over M exposures with at most one dark -> bright decay.

    p_D = (1 - M q) ∏_j p_Dj + q Σ_{j'} ∏_{j<j'} p_Dj ∏_{j≥j'} p_Bj, q = t_s / τ.
    """
    m = log_b.shape[-1]
    q = _decay_weight(m, t_s, tau)
    zeros = np.zeros(log_b.shape[:-1] + (1,))
    prefix_d = np.concatenate([zeros, np.cumsum(log_d, axis=-1)], axis=-1)
    prefix_b = np.concatenate([zeros, np.cumsum(log_b, axis=-1)], axis=-1)
    total_b = prefix_b[..., -1]
    # Decay during exposure j' (0-based): dark before it, bright from it on.
    decay_terms = math.log(q) + prefix_d[..., :-1] + (total_b[..., None] - prefix_b[..., :-1])
    no_decay = math.log1p(-m * q) + prefix_d[..., -1:]
    return total_b, logsumexp(np.concatenate([no_decay, decay_terms], axis=-1), axis=-1)


def spatiotemporal_batch(counts: np.ndarray, dists_per_exposure: Sequence[DistributionSet],
                         roi_size: int, t_s: float, tau: float) -> BatchVerdicts:
    """Counts (n, M, H, W); uses every exposure present."""
    llr = []
    for k in range(dists_per_exposure[0].n_ions):
        lb, ld = exposure_log_likelihoods(counts, dists_per_exposure, roi_size, k)
        total_b, total_d = spatiotemporal_log_likelihoods(lb, ld, t_s, tau)
        llr.append(total_b - total_d)
    llr = np.stack(llr, axis=-1)
    return BatchVerdicts(bright=llr > 0, llr=llr)


def classify_spatiotemporal(frames: Sequence[FrameLike], dists_per_exposure: Sequence[DistributionSet],
                            t_s: float, tau: float, roi_size: Optional[int] = None) -> Verdict:
    if len(frames) == 0:
        raise ValueError("need at least one exposure")
    roi_size = dists_per_exposure[0].roi_size if roi_size is None else roi_size
    stack = np.stack([_counts(f) for f in frames])[None]
    return spatiotemporal_batch(stack, dists_per_exposure, roi_size, t_s, tau).verdict(0)


def running_spatiotemporal_log_ratios(log_b: np.ndarray, log_d: np.ndarray, t_s: float,
                                      tau: float) -> np.ndarray:
    """log(p_B / p_D) after each of the first m = 1..M exposures, shape (n, M)."""
    m_max = log_b.shape[-1]
    q = _decay_weight(m_max, t_s, tau)
    cum_b = np.cumsum(log_b, axis=-1)
    cum_d = np.cumsum(log_d, axis=-1)
    zeros = np.zeros(log_b.shape[:-1] + (1,))
    # a_j' = Σ_{j<j'} (log p_Dj - log p_Bj); running logsumexp over j' ≤ m.
    a = np.concatenate([zeros, cum_d[..., :-1] - cum_b[..., :-1]], axis=-1)
    running = np.logaddexp.accumulate(a, axis=-1)
    m = np.arange(1, m_max + 1)
    log_pd = np.logaddexp(np.log1p(-m * q) + cum_d, math.log(q) + cum_b + running)
    return cum_b - log_pd


def spatiotemporal_adaptive_batch(counts: np.ndarray, dists_per_exposure: Sequence[DistributionSet],
                                  roi_size: int, t_s: float, tau: float, r_stop: float) -> BatchVerdicts:
    bright, llr, used = [], [], []
    for k in range(dists_per_exposure[0].n_ions):
        lb, ld = exposure_log_likelihoods(counts, dists_per_exposure, roi_size, k)
        b, r, m = adaptive_stop(running_spatiotemporal_log_ratios(lb, ld, t_s, tau), r_stop)
        bright.append(b)
        llr.append(r)
        used.append(m)
    return BatchVerdicts(bright=np.stack(bright, -1), llr=np.stack(llr, -1),
                         exposures_used=np.stack(used, -1))


def classify_spatiotemporal_adaptive(frames: Sequence[FrameLike], dists_per_exposure: Sequence[DistributionSet],
                                     t_s: float, tau: float, r_stop: float = DEFAULT_R_STOP,
                                     roi_size: Optional[int] = None) -> Verdict:
    roi_size = dists_per_exposure[0].roi_size if roi_size is None else roi_size
    stack = np.stack([_counts(f) for f in frames])[None]
    return spatiotemporal_adaptive_batch(stack, dists_per_exposure, roi_size, t_s, tau, r_stop).verdict(0)


def cumulative_neighbour_log_likelihoods(counts: np.ndarray, dists: DistributionSet, max_n: int) -> np.ndarray:
    """Rank-cumulative ROI log-likelihoods, shape (n_ions, n, 2, n_nu, max_n)."""
    out = []
    for k in range(dists.n_ions):
        roi = dists.order.gather(counts, k, max_n)
        out.append(np.cumsum(dists.rank_log_probs(k, roi), axis=-1))
    return np.stack(out)


def neighbour_log_likelihoods(counts: np.ndarray, dists: DistributionSet, roi_size: int) -> np.ndarray:
    """Summed ROI log-likelihoods per (ion, frame, state, ν), shape (n_ions, n, 2, n_nu)."""
    return cumulative_neighbour_log_likelihoods(counts, dists, roi_size)[..., -1]


def iteration_cap(arity: int, n_ions: int) -> int:
    return max(16, (1 << arity) * n_ions)


def iterate_neighbour_states(ll: np.ndarray, neighbours: Tuple[Tuple[int, ...], ...],
                             max_iter: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synchronous neighbour-conditioned ML from the all-bright guess.

    `ll` is (n_ions, n, 2, n_nu). Each update recomputes every ion's verdict
    using the previous estimate's neighbour states. A fixed point ends the
    iteration; on a cycle or at the cap the visited state with the highest
    summed log-likelihood wins (lowest code on ties).

    Returns (state codes (n,), log-ratios (n, n_ions), iterations (n,)).
    """
    n_ions, n = ll.shape[0], ll.shape[1]
    arity = len(neighbours[0]) if neighbours else 0
    cap = iteration_cap(arity, n_ions) if max_iter is None else max_iter
    n_states = 1 << n_ions
    all_bright = code_to_bright(np.arange(n_states), n_ions)  # (S, n_ions)

    # Per state x: the next state, the per-ion log-ratios and the summed log-likelihood.
    next_code = np.zeros((n, n_states), dtype=np.int64)
    llr_table = np.zeros((n, n_states, n_ions))
    total_ll = np.zeros((n, n_states))
    for k in range(n_ions):
        nu = neighbour_codes(all_bright, neighbours[k]) if arity else np.zeros(n_states, dtype=np.int64)
        lb = ll[k][:, 0, nu]  # (n, S)
        ld = ll[k][:, 1, nu]
        llr_table[:, :, k] = lb - ld
        dark = ~(lb > ld)
        next_code |= dark.astype(np.int64) << (n_ions - 1 - k)
        total_ll += np.where(all_bright[None, :, k], lb, ld)

    rows = np.arange(n)
    x = np.zeros(n, dtype=np.int64)
    visited = np.zeros((n, n_states), dtype=bool)
    visited[:, 0] = True
    result = np.full(n, -1, dtype=np.int64)
    iterations = np.zeros(n, dtype=np.int64)
    for it in range(1, cap + 1):
        open_ = result < 0
        if not open_.any():
            break
        nx = next_code[rows, x]
        fixed = open_ & (nx == x)
        result[fixed] = x[fixed]
        iterations[fixed] = it
        cycled = open_ & ~fixed & visited[rows, nx]
        if cycled.any():
            best = np.argmax(np.where(visited[cycled], total_ll[cycled], -np.inf), axis=-1)
            result[cycled] = best
            iterations[cycled] = it
        moving = open_ & ~fixed & ~cycled
        x = np.where(moving, nx, x)
        visited[rows[moving], nx[moving]] = True

    stuck = result < 0
    if stuck.any():
        logger.warning("Neighbour iteration hit the cap of %d on %d frames", cap, int(stuck.sum()))
        result[stuck] = np.argmax(np.where(visited[stuck], total_ll[stuck], -np.inf), axis=-1)
        iterations[stuck] = cap
    return result, llr_table[rows, result], iterations


def iterative_neighbour_batch(counts: np.ndarray, dists: DistributionSet, roi_size: int,
                              max_iter: Optional[int] = None) -> BatchVerdicts:
    if dists.arity == 0:
        raise ValueError("neighbour-conditioned classification needs a neighbour-aware DistributionSet")
    ll = neighbour_log_likelihoods(counts, dists, roi_size)
    codes, llr, iterations = iterate_neighbour_states(ll, dists.neighbours, max_iter)
    return BatchVerdicts(bright=code_to_bright(codes, dists.n_ions), llr=llr, iterations=iterations)


def classify_iterative_neighbours(frame: FrameLike, dists: DistributionSet, roi_size: int,
                                  max_iter: Optional[int] = None) -> Verdict:
    return iterative_neighbour_batch(_counts(frame)[None], dists, roi_size, max_iter).verdict(0)


class RoiClassifier(ABC):
    """A classifier evaluated at a chosen ROI size, as swept by `metrics.sweep_roi`."""

    @property
    @abstractmethod
    def method(self) -> str:
        raise NotImplementedError

    @abstractmethod
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        """Verdicts for frames (n, H, W) at ROI size `roi_size`."""
        raise NotImplementedError

    def sweep(self, counts: np.ndarray, roi_sizes: Iterable[int]) -> Dict[int, BatchVerdicts]:
        """`predict` at every ROI size; subclasses may share work across sizes."""
        return {n: self.predict(counts, n) for n in roi_sizes}


def _cumulative_llr(counts: np.ndarray, dists: DistributionSet, roi_sizes: Sequence[int]) -> np.ndarray:
    """Cumulative log-ratios (n_ions, n, max N) computed once for a sweep."""
    max_n = max(roi_sizes)
    return np.stack([ml_log_ratios(counts, dists, max_n, k) for k in range(dists.n_ions)])


class ThresholdClassifier(RoiClassifier):
    def __init__(self, rules: Dict[int, ThresholdRule]):
        self.rules = rules

    @property
    @override
    def method(self) -> str:
        return "T"

    @override
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        if roi_size not in self.rules:
            raise ValueError(f"no threshold rule fitted for N={roi_size}")
        return threshold_batch(counts, self.rules[roi_size])


class MLClassifier(RoiClassifier):
    def __init__(self, dists: DistributionSet):
        self.dists = dists

    @property
    @override
    def method(self) -> str:
        return "M"

    @override
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        return ml_batch(counts, self.dists, roi_size)

    @override
    def sweep(self, counts: np.ndarray, roi_sizes: Iterable[int]) -> Dict[int, BatchVerdicts]:
        sizes = list(roi_sizes)
        cum = _cumulative_llr(counts, self.dists, sizes)
        out = {}
        for n in sizes:
            llr = cum[:, :, n - 1].T
            out[n] = BatchVerdicts(bright=llr > 0, llr=llr)
        return out


class AdaptiveClassifier(RoiClassifier):
    def __init__(self, dists: DistributionSet, r_stop: float = DEFAULT_R_STOP):
        self.dists = dists
        self.r_stop = r_stop

    @property
    @override
    def method(self) -> str:
        return "A"

    @override
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        return adaptive_batch(counts, self.dists, self.r_stop, roi_size)

    @override
    def sweep(self, counts: np.ndarray, roi_sizes: Iterable[int]) -> Dict[int, BatchVerdicts]:
        sizes = list(roi_sizes)
        cum = _cumulative_llr(counts, self.dists, sizes)
        out = {}
        for n in sizes:
            cols = [adaptive_stop(cum[k, :, :n], self.r_stop) for k in range(self.dists.n_ions)]
            out[n] = BatchVerdicts(
                bright=np.stack([c[0] for c in cols], axis=-1),
                llr=np.stack([c[1] for c in cols], axis=-1),
                pixels_used=np.stack([c[2] for c in cols], axis=-1),
            )
        return out


class NeighbourMLClassifier(RoiClassifier):
    def __init__(self, dists: DistributionSet, max_iter: Optional[int] = None):
        self.dists = dists
        self.max_iter = max_iter

    @property
    @override
    def method(self) -> str:
        return "MN" if self.dists.arity <= 2 else f"MN{self.dists.arity}"

    @override
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        return iterative_neighbour_batch(counts, self.dists, roi_size, self.max_iter)

    @override
    def sweep(self, counts: np.ndarray, roi_sizes: Iterable[int]) -> Dict[int, BatchVerdicts]:
        sizes = list(roi_sizes)
        if self.dists.arity == 0:
            raise ValueError("neighbour-conditioned classification needs a neighbour-aware DistributionSet")
        cum = cumulative_neighbour_log_likelihoods(counts, self.dists, max(sizes))
        out = {}
        for n in sizes:
            codes, llr, iterations = iterate_neighbour_states(cum[..., n - 1], self.dists.neighbours, self.max_iter)
            out[n] = BatchVerdicts(bright=code_to_bright(codes, self.dists.n_ions), llr=llr, iterations=iterations)
        return out


class SpatioTemporalClassifier(RoiClassifier):
    """Decay-aware classification of frames (n, M, H, W) with one DistributionSet per exposure.

    With `r_stop` set it stops after the first exposure whose running |log(p_B/p_D)|
    reaches it (STA); otherwise every exposure is used (ST).
    """

    def __init__(self, dists_per_exposure: Sequence[DistributionSet], t_s: float, tau: float,
                 r_stop: Optional[float] = None):
        if len(dists_per_exposure) == 0:
            raise ValueError("need at least one exposure's distributions")
        self.dists_per_exposure = tuple(dists_per_exposure)
        self.t_s = t_s
        self.tau = tau
        self.r_stop = r_stop

    @property
    @override
    def method(self) -> str:
        return "ST" if self.r_stop is None else "STA"

    @override
    def predict(self, counts: np.ndarray, roi_size: int) -> BatchVerdicts:
        m = len(self.dists_per_exposure)
        if counts.ndim != 4 or counts.shape[1] != m:
            raise ValueError(f"expected frames (n, {m}, H, W), got {counts.shape}")
        if self.r_stop is None:
            return spatiotemporal_batch(counts, self.dists_per_exposure, roi_size, self.t_s, self.tau)
        return spatiotemporal_adaptive_batch(counts, self.dists_per_exposure, roi_size, self.t_s, self.tau,
                                             self.r_stop)
