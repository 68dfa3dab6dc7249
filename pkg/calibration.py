from dataclasses import dataclass
import logging
import math
import os
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import CalibrationError, FrameFormatError, IonState, check_shape

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
DEFAULT_FLOOR = 1e-9
DEFAULT_MIN_SAMPLES = 100
# Extra count bins above the observed maximum that receive smoothing mass.
SMOOTHING_MARGIN = 5

# State axis of every table: index 0 is bright, 1 is dark (the register bit).
STATE_INDEX = {IonState.Bright: 0, IonState.Dark: 1}

PathLike = Union[str, "os.PathLike[str]"]


@dataclass(frozen=True, eq=False)
class PixelOrder:
    """Per-ion permutation of flat (row-major) pixel indices, brightest first."""
    orders: Tuple[np.ndarray, ...]
    shape: Tuple[int, int]

    def __post_init__(self) -> None:
        n_pix = self.shape[0] * self.shape[1]
        for k, order in enumerate(self.orders):
            if order.shape != (n_pix,) or not np.array_equal(np.sort(order), np.arange(n_pix)):
                raise ValueError(f"order of ion {k} is not a permutation of {n_pix} pixels")

    @property
    def n_ions(self) -> int:
        return len(self.orders)

    def roi(self, ion: int, n: int) -> np.ndarray:
        """Flat indices of the `n` brightest pixels of `ion`."""
        return self.orders[ion][:n]

    def gather(self, counts: np.ndarray, ion: int, n: int) -> np.ndarray:
        """ROI counts in rank order: (..., H, W) -> (..., n)."""
        flat = counts.reshape(counts.shape[:-2] + (-1,))
        return flat[..., self.roi(ion, n)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelOrder):
            return NotImplemented
        return self.shape == other.shape and len(self.orders) == len(other.orders) and all(
            np.array_equal(a, b) for a, b in zip(self.orders, other.orders)
        )

    __hash__ = None


def voronoi_owner(ion_pixel_coords: np.ndarray, shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """(owner, distance) maps: the nearest ion to each pixel centre and the
    distance in pixels from every ion, shapes (H, W) and (n_ions, H, W)."""
    rows, cols = np.indices(shape)
    dist = np.hypot(
        rows[None] + 0.5 - ion_pixel_coords[:, 0, None, None],
        cols[None] + 0.5 - ion_pixel_coords[:, 1, None, None],
    )
    return np.argmin(dist, axis=0), dist


def brightness_order(mean_image: np.ndarray, ion_assignments: Optional[np.ndarray] = None) -> PixelOrder:
    """Order pixels by decreasing mean brightness attributable to each ion.

    `mean_image` is either a stack (n_ions, H, W) of single-ion-bright means,
    or one (H, W) image with every ion bright. In the second case
    `ion_assignments` gives the ion centres as (row, col) pixel coordinates:
    each ion's radial profile is estimated from the pixels closer to it than
    to any other ion, made non-increasing, and evaluated on the whole grid, so
    ROIs can extend past the neighbouring ions. Ties fall back to distance and
    then to the row-major index.
    """
    mean_image = np.asarray(mean_image, dtype=float)
    if mean_image.ndim == 3:
        shape = mean_image.shape[1:]
        orders = []
        for k, img in enumerate(mean_image):
            flat = img.ravel()
            if not flat.max() > np.median(flat):
                raise CalibrationError(f"ion {k} has no pixel above background", cell=f"ion {k}")
            orders.append(np.argsort(-flat, kind="stable"))
        return PixelOrder(tuple(orders), shape)

    if mean_image.ndim != 2 or ion_assignments is None:
        raise ValueError("brightness_order needs a (n_ions, H, W) stack or an (H, W) image with ion centres")
    centres = np.asarray(ion_assignments, dtype=float)
    check_shape("ion_assignments", centres, (None, 2))
    shape = mean_image.shape
    owner, dist = voronoi_owner(centres, shape)
    flat_img = mean_image.ravel()
    background = float(np.median(flat_img))
    index = np.arange(flat_img.size)
    orders = []
    for k in range(centres.shape[0]):
        own = (owner == k).ravel()
        d = dist[k].ravel()
        if not own.any() or not flat_img[own].max() > background:
            raise CalibrationError(f"ion {k} has no pixel above background", cell=f"ion {k}")
        rings = np.floor(d * 2.0).astype(int)
        n_rings = rings.max() + 1
        sums = np.bincount(rings[own], weights=flat_img[own], minlength=n_rings)
        hits = np.bincount(rings[own], minlength=n_rings)
        profile = np.full(n_rings, -np.inf)
        seen = hits > 0
        profile[seen] = sums[seen] / hits[seen]
        # Rings beyond the cell inherit the outermost measured level.
        last = np.flatnonzero(seen)[-1]
        profile[last + 1:] = profile[last]
        # Upper non-increasing envelope; also fills unmeasured inner rings.
        profile = np.maximum.accumulate(profile[::-1])[::-1]
        score = profile[rings]
        orders.append(np.lexsort((index, d, -score)))
    return PixelOrder(tuple(orders), shape)


def neighbour_sets(ion_positions_um: Sequence[Tuple[float, float]], arity: int) -> Tuple[Tuple[int, ...], ...]:
    """For each ion, the `arity` physically closest other ions (ties to the lower
    index), listed in ascending index order."""
    pos = np.asarray(ion_positions_um, dtype=float)
    n = pos.shape[0]
    if not 0 <= arity <= n - 1:
        raise ValueError(f"neighbour arity must lie in [0, {n - 1}] for {n} ions, got {arity}")
    out = []
    for k in range(n):
        others = [j for j in range(n) if j != k]
        others.sort(key=lambda j: (float(np.hypot(*(pos[j] - pos[k]))), j))
        out.append(tuple(sorted(others[:arity])))
    return tuple(out)


def neighbour_codes(bright: np.ndarray, neighbours: Tuple[int, ...]) -> np.ndarray:
    """ν code per row of `bright` (n, n_ions): neighbour dark bits, first neighbour most significant."""
    code = np.zeros(bright.shape[0], dtype=np.int64)
    for j in neighbours:
        code = (code << 1) | (~bright[:, j]).astype(np.int64)
    return code


def nu_label(code: int, arity: int) -> str:
    return format(code, f"0{arity}b") if arity else "-"


@dataclass(frozen=True, eq=False)
class CountDistribution:
    """Smoothed count PMFs of one ion per pixel rank, for one state and neighbour condition.

    `pmf` has shape (n_ranks, n_counts); each row sums to one over its
    support and counts beyond it have probability `floor`.
    """
    ion: int
    state: IonState
    neighbour_condition: Optional[str]
    pmf: Tuple[np.ndarray, ...]
    floor: float = DEFAULT_FLOOR

    @property
    def n_ranks(self) -> int:
        return len(self.pmf)

    def prob(self, rank: int, count: int) -> float:
        row = self.pmf[rank]
        return float(row[count]) if 0 <= count < row.size else self.floor

    def mean(self, rank: int) -> float:
        row = self.pmf[rank]
        return float(np.dot(np.arange(row.size), row))


@dataclass(frozen=True, eq=False)
class DistributionSet:
    """Fitted distributions for every (ion, state, ν, rank).

    Attributes:
        order: Pixel order the ranks refer to
        neighbours: Conditioning ions per ion (empty tuples when arity is 0)
        supports: (n_ions, 2, n_nu, N) number of counts carrying smoothed mass
        log_table: (n_ions, 2, n_nu, N, C) log-probabilities; the last count
            column and everything beyond a cell's support hold log(floor)
    """
    order: PixelOrder
    roi_size: int
    arity: int
    neighbours: Tuple[Tuple[int, ...], ...]
    alpha: float
    floor: float
    supports: np.ndarray
    log_table: np.ndarray

    @property
    def n_ions(self) -> int:
        return self.log_table.shape[0]

    @property
    def n_nu(self) -> int:
        return self.log_table.shape[2]

    @property
    def max_count(self) -> int:
        return self.log_table.shape[-1] - 1

    def distribution(self, ion: int, state: IonState, nu: int = 0) -> CountDistribution:
        s = STATE_INDEX[state]
        rows = tuple(
            np.exp(self.log_table[ion, s, nu, r, : self.supports[ion, s, nu, r]])
            for r in range(self.roi_size)
        )
        cond = nu_label(nu, self.arity) if self.arity else None
        return CountDistribution(ion, state, cond, rows, self.floor)

    def rank_log_probs(self, ion: int, roi_counts: np.ndarray) -> np.ndarray:
        """Per-rank log-probabilities of ROI counts (n, n_ranks) with n_ranks <= N.

        Returns shape (n, 2, n_nu, n_ranks).
        """
        n_ranks = roi_counts.shape[-1]
        if n_ranks > self.roi_size:
            raise ValueError(f"ROI of {n_ranks} pixels exceeds the calibrated {self.roi_size}")
        idx = np.minimum(roi_counts, self.max_count)
        table = self.log_table[ion, :, :, :n_ranks, :]  # (2, n_nu, n_ranks, C)
        ranks = np.arange(n_ranks)
        return np.moveaxis(table[:, :, ranks, idx], 2, 0)


class HistogramAccumulator:
    """Count histograms per (ion, state, ν, rank) with an associative merge."""

    def __init__(self, n_ions: int, roi_size: int, arity: int = 0):
        if roi_size < 1:
            raise ValueError(f"roi_size must be >= 1, got {roi_size}")
        self.n_ions = n_ions
        self.roi_size = roi_size
        self.arity = arity
        self.hist = np.zeros((n_ions, 2, 1 << arity, roi_size, 1), dtype=np.int64)

    @property
    def samples(self) -> np.ndarray:
        """(n_ions, 2, n_nu) frames seen per cell."""
        return self.hist[..., 0, :].sum(axis=-1)

    def _grow(self, n_counts: int) -> None:
        if n_counts > self.hist.shape[-1]:
            pad = n_counts - self.hist.shape[-1]
            self.hist = np.pad(self.hist, [(0, 0)] * 4 + [(0, pad)])

    def add(self, ion: int, roi_counts: np.ndarray, bright: np.ndarray, nu: Optional[np.ndarray] = None) -> None:
        """Add frames of one ion: ROI counts (n, N), its state (n,) and ν codes (n,)."""
        check_shape("roi_counts", roi_counts, (None, self.roi_size))
        n = roi_counts.shape[0]
        if n == 0:
            return
        if roi_counts.min() < 0:
            raise ValueError("counts must be non-negative")
        self._grow(int(roi_counts.max()) + 1)
        n_nu = self.hist.shape[2]
        c = self.hist.shape[-1]
        nu = np.zeros(n, dtype=np.int64) if nu is None else np.asarray(nu, dtype=np.int64)
        state = (~np.asarray(bright, dtype=bool)).astype(np.int64)
        cell = (state * n_nu + nu)[:, None] * self.roi_size + np.arange(self.roi_size)[None, :]
        flat = cell * c + roi_counts
        binned = np.bincount(flat.ravel(), minlength=2 * n_nu * self.roi_size * c)
        self.hist[ion] += binned.reshape(2, n_nu, self.roi_size, c)

    def add_frames(self, counts: np.ndarray, bright: np.ndarray, order: PixelOrder,
                   neighbours: Optional[Tuple[Tuple[int, ...], ...]] = None) -> None:
        """Add labelled frames (n, H, W) with per-ion states (n, n_ions) for every ion."""
        check_shape("bright", bright, (counts.shape[0], self.n_ions))
        for k in range(self.n_ions):
            nu = neighbour_codes(bright, neighbours[k]) if self.arity else None
            self.add(k, order.gather(counts, k, self.roi_size), bright[:, k], nu)

    def merge(self, other: "HistogramAccumulator") -> "HistogramAccumulator":
        if (self.n_ions, self.roi_size, self.arity) != (other.n_ions, other.roi_size, other.arity):
            raise ValueError("cannot merge accumulators of different layout")
        out = HistogramAccumulator(self.n_ions, self.roi_size, self.arity)
        out._grow(max(self.hist.shape[-1], other.hist.shape[-1]))
        out.hist[..., : self.hist.shape[-1]] += self.hist
        out.hist[..., : other.hist.shape[-1]] += other.hist
        return out

    def finalize(
        self,
        order: PixelOrder,
        neighbours: Optional[Tuple[Tuple[int, ...], ...]] = None,
        alpha: float = DEFAULT_ALPHA,
        floor: float = DEFAULT_FLOOR,
        min_samples: int = DEFAULT_MIN_SAMPLES,
    ) -> DistributionSet:
        """Add-α smoothing over [0, observed max + margin] of every cell."""
        if alpha <= 0:
            raise ValueError(f"smoothing alpha must be positive, got {alpha}")
        samples = self.samples
        for k, s, nu in np.argwhere(samples < min_samples):
            state = IonState.Bright if s == 0 else IonState.Dark
            cell = f"ion {k}, {state.value}, nu={nu_label(int(nu), self.arity)}"
            raise CalibrationError(
                "too few calibration frames", cell=cell, samples=int(samples[k, s, nu]), minimum=min_samples
            )

        hist = self.hist
        observed = hist.shape[-1]
        # Highest count seen per cell and rank.
        nonzero = hist > 0
        top = observed - 1 - np.argmax(nonzero[..., ::-1], axis=-1)
        supports = top + 1 + SMOOTHING_MARGIN
        c = int(supports.max()) + 1
        padded = np.zeros(hist.shape[:-1] + (c,), dtype=float)
        padded[..., :observed] = hist
        in_support = np.arange(c) < supports[..., None]
        smoothed = np.where(in_support, padded + alpha, 0.0)
        pmf = smoothed / smoothed.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore"):
            log_table = np.where(in_support, np.log(pmf), math.log(floor))
        log_table.setflags(write=False)
        return DistributionSet(
            order=order,
            roi_size=self.roi_size,
            arity=self.arity,
            neighbours=neighbours if neighbours is not None else tuple(() for _ in range(self.n_ions)),
            alpha=alpha,
            floor=floor,
            supports=supports,
            log_table=log_table,
        )


def fit_distributions(
    counts: np.ndarray,
    bright: np.ndarray,
    order: PixelOrder,
    roi_size: int,
    neighbour_aware: bool = False,
    neighbours: Optional[Tuple[Tuple[int, ...], ...]] = None,
    alpha: float = DEFAULT_ALPHA,
    floor: float = DEFAULT_FLOOR,
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> DistributionSet:
    """Empirical per-rank PMFs from labelled frames (n, H, W) and states (n, n_ions)."""
    if neighbour_aware and neighbours is None:
        raise ValueError("neighbour-aware fitting needs the neighbour sets")
    arity = len(neighbours[0]) if neighbour_aware else 0
    acc = HistogramAccumulator(order.n_ions, roi_size, arity)
    acc.add_frames(counts, bright, order, neighbours if neighbour_aware else None)
    return acc.finalize(order, neighbours if neighbour_aware else None, alpha, floor, min_samples)


def accumulate_per_exposure(counts: np.ndarray, bright: np.ndarray, usable: np.ndarray, order: PixelOrder,
                            roi_size: int) -> List[HistogramAccumulator]:
    """One accumulator per exposure index of (n, M, H, W) frames.

    `bright` is (n, M, n_ions); `usable` (n, M) masks out exposures in which a
    state changed.
    """
    check_shape("usable", usable, counts.shape[:2])
    out = []
    for j in range(counts.shape[1]):
        keep = usable[:, j]
        acc = HistogramAccumulator(order.n_ions, roi_size)
        acc.add_frames(counts[keep, j], bright[keep, j], order)
        out.append(acc)
    return out


def fit_per_exposure(counts: np.ndarray, bright: np.ndarray, usable: np.ndarray, order: PixelOrder,
                     roi_size: int, alpha: float = DEFAULT_ALPHA, floor: float = DEFAULT_FLOOR,
                     min_samples: int = DEFAULT_MIN_SAMPLES) -> List[DistributionSet]:
    accs = accumulate_per_exposure(counts, bright, usable, order, roi_size)
    return [acc.finalize(order, None, alpha, floor, min_samples) for acc in accs]


def cumulative_signal(ion_images: np.ndarray, order: PixelOrder, target_ion: int, max_rank: int) -> np.ndarray:
    """Fraction of each ion's grid signal inside the top-r pixels of `target_ion`, shape (n_ions, max_rank)."""
    totals = ion_images.reshape(ion_images.shape[0], -1).sum(axis=1)
    if np.any(totals <= 0):
        raise CalibrationError("single-ion image without signal")
    roi = order.gather(ion_images, target_ion, max_rank)
    return np.cumsum(roi, axis=-1) / totals[:, None]


def write_archive(path: PathLike, dists: DistributionSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# n_ions={dists.n_ions} roi_size={dists.roi_size} arity={dists.arity} "
                 f"alpha={dists.alpha!r} floor={dists.floor!r} height={dists.order.shape[0]} "
                 f"width={dists.order.shape[1]}\n")
        for k, order in enumerate(dists.order.orders):
            fh.write(f"# order {k} " + ",".join(str(int(i)) for i in order) + "\n")
        for k, nbrs in enumerate(dists.neighbours):
            fh.write(f"# neighbours {k} " + ",".join(str(j) for j in nbrs) + "\n")
        fh.write("ion,rank,state,nu,count,probability\n")
        for k in range(dists.n_ions):
            for state, s in STATE_INDEX.items():
                for nu in range(dists.n_nu):
                    for r in range(dists.roi_size):
                        for c in range(int(dists.supports[k, s, nu, r])):
                            p = math.exp(dists.log_table[k, s, nu, r, c])
                            fh.write(f"{k},{r + 1},{state.value},{nu_label(nu, dists.arity)},{c},{p!r}\n")


def read_archive(path: PathLike) -> DistributionSet:
    header = {}
    orders = {}
    neighbours = {}
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# order "):
                _, _, k, idx = line.split(" ", 3)
                orders[int(k)] = np.array([int(i) for i in idx.split(",")], dtype=np.int64)
            elif line.startswith("# neighbours "):
                parts = line.split(" ")
                neighbours[int(parts[2])] = tuple(int(j) for j in parts[3].split(",")) if len(parts) > 3 else ()
            elif line.startswith("#"):
                for field in line[1:].split():
                    key, _, value = field.partition("=")
                    header[key] = value
            elif not line.startswith("ion,"):
                rows.append(line.split(","))
    try:
        n_ions = int(header["n_ions"])
        roi_size = int(header["roi_size"])
        arity = int(header["arity"])
        alpha = float(header["alpha"])
        floor = float(header["floor"])
        shape = (int(header["height"]), int(header["width"]))
    except (KeyError, ValueError) as e:
        raise FrameFormatError(f"calibration archive header incomplete: {e}") from e
    if sorted(orders) != list(range(n_ions)):
        raise FrameFormatError("calibration archive lacks a pixel order per ion")

    n_nu = 1 << arity
    supports = np.zeros((n_ions, 2, n_nu, roi_size), dtype=np.int64)
    entries = []
    for row in rows:
        try:
            k, rank, state, nu, c, p = row
            s = STATE_INDEX[IonState(state)]
            nu_i = int(nu, 2) if arity else 0
            entries.append((int(k), s, nu_i, int(rank) - 1, int(c), float(p)))
        except (ValueError, KeyError) as e:
            raise FrameFormatError(f"bad calibration archive row {row}: {e}") from e
    for k, s, nu_i, r, c, _ in entries:
        supports[k, s, nu_i, r] = max(supports[k, s, nu_i, r], c + 1)
    log_table = np.full((n_ions, 2, n_nu, roi_size, int(supports.max()) + 1), math.log(floor))
    for k, s, nu_i, r, c, p in entries:
        log_table[k, s, nu_i, r, c] = math.log(p)
    log_table.setflags(write=False)
    return DistributionSet(
        order=PixelOrder(tuple(orders[k] for k in range(n_ions)), shape),
        roi_size=roi_size,
        arity=arity,
        neighbours=tuple(neighbours.get(k, ()) for k in range(n_ions)),
        alpha=alpha,
        floor=floor,
        supports=supports,
        log_table=log_table,
    )
