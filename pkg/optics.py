from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
import logging
import math
from typing import Iterable, Sequence, Tuple

import numpy as np
from overrides import override
from scipy import integrate, optimize, special

from .core import OpticsError

logger = logging.getLogger(__name__)

# First zero of J1; the Airy pattern's first dark ring.
_J1_FIRST_ZERO = 3.8317059702075125
# Energy fraction that defines the PSF support radius.
SUPPORT_ENERGY = 0.9999


class PointSpreadFunction(ABC):
    """Radially symmetric, non-negative intensity profile normalised to unit
    integral over the object plane. Radii are object-plane micrometres."""

    @property
    @abstractmethod
    def kind(self) -> str:
        raise NotImplementedError

    @abstractmethod
    def density(self, r_um: np.ndarray) -> np.ndarray:
        """Intensity per square micrometre at radius `r_um`."""
        raise NotImplementedError

    @abstractmethod
    def encircled_energy(self, r_um: np.ndarray) -> np.ndarray:
        """Fraction of the total energy inside radius `r_um`."""
        raise NotImplementedError

    @cached_property
    def support_radius_um(self) -> float:
        """Radius enclosing `SUPPORT_ENERGY` of the energy."""
        hi = 1.0
        while float(self.encircled_energy(np.asarray(hi))) < SUPPORT_ENERGY:
            hi *= 2.0
        return float(optimize.brentq(
            lambda r: float(self.encircled_energy(np.asarray(r))) - SUPPORT_ENERGY, 0.0, hi,
            xtol=1e-9,
        ))


class AiryPSF(PointSpreadFunction):
    """Diffraction-limited image of a point source through a circular aperture.

    The radial scale puts the first null diameter at 1.22·λ/tanα.
    """

    def __init__(self, wavelength_m: float = 397e-9, numerical_aperture: float = 0.25) -> None:
        if wavelength_m <= 0:
            raise ValueError(f"wavelength_m must be positive, got {wavelength_m}")
        if not 0 < numerical_aperture < 1:
            raise ValueError(f"numerical_aperture must lie in (0, 1), got {numerical_aperture}")
        self.wavelength_m = wavelength_m
        self.numerical_aperture = numerical_aperture
        self.first_null_radius_um = airy_first_null_radius_um(wavelength_m, numerical_aperture)
        self._scale_um = self.first_null_radius_um / _J1_FIRST_ZERO

    def __repr__(self) -> str:
        return f"AiryPSF(wavelength_m={self.wavelength_m!r}, numerical_aperture={self.numerical_aperture!r})"

    @property
    @override
    def kind(self) -> str:
        return "airy"

    @override
    def density(self, r_um: np.ndarray) -> np.ndarray:
        v = np.asarray(r_um, dtype=float) / self._scale_um
        return _airy_pattern(v) / (4.0 * math.pi * self._scale_um ** 2)

    @override
    def encircled_energy(self, r_um: np.ndarray) -> np.ndarray:
        v = np.asarray(r_um, dtype=float) / self._scale_um
        return 1.0 - special.j0(v) ** 2 - special.j1(v) ** 2


class GaussianPSF(PointSpreadFunction):
    def __init__(self, sigma_um: float) -> None:
        if sigma_um <= 0:
            raise ValueError(f"sigma_um must be positive, got {sigma_um}")
        self.sigma_um = sigma_um

    def __repr__(self) -> str:
        return f"GaussianPSF(sigma_um={self.sigma_um!r})"

    @property
    @override
    def kind(self) -> str:
        return "gaussian"

    @override
    def density(self, r_um: np.ndarray) -> np.ndarray:
        r = np.asarray(r_um, dtype=float)
        s2 = self.sigma_um ** 2
        return np.exp(-r * r / (2.0 * s2)) / (2.0 * math.pi * s2)

    @override
    def encircled_energy(self, r_um: np.ndarray) -> np.ndarray:
        r = np.asarray(r_um, dtype=float)
        return -np.expm1(-r * r / (2.0 * self.sigma_um ** 2))


class TabulatedPSF(PointSpreadFunction):
    """Radial profile given by samples, linearly interpolated and zero beyond the last radius.

    Normalisation integrates the piecewise-linear profile exactly, so the
    encircled energy reaches exactly 1 at the last sample.
    """

    def __init__(self, radii_um: Sequence[float], values: Sequence[float]) -> None:
        r = np.asarray(radii_um, dtype=float)
        v = np.asarray(values, dtype=float)
        if r.ndim != 1 or r.shape != v.shape or r.size < 2:
            raise ValueError("radii_um and values must be 1-D sequences of equal length >= 2")
        if r[0] != 0.0 or np.any(np.diff(r) <= 0):
            raise ValueError("radii_um must start at 0 and be strictly increasing")
        if np.any(v < 0):
            raise ValueError("tabulated PSF values must be non-negative")

        seg = _segment_moments(r[:-1], r[1:], v[:-1], v[1:])
        total = float(seg.sum())
        if total <= 0:
            raise ValueError("tabulated PSF has zero integral")
        self.radii_um = r
        self.values = v / total
        self._cumulative = np.concatenate(([0.0], np.cumsum(seg / total)))

    def __repr__(self) -> str:
        return f"TabulatedPSF(n_samples={self.radii_um.size}, r_max_um={self.radii_um[-1]:g})"

    @property
    @override
    def kind(self) -> str:
        return "tabulated"

    @override
    def density(self, r_um: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(r_um, dtype=float), self.radii_um, self.values, right=0.0)

    @override
    def encircled_energy(self, r_um: np.ndarray) -> np.ndarray:
        r = np.clip(np.asarray(r_um, dtype=float), 0.0, self.radii_um[-1])
        idx = np.clip(np.searchsorted(self.radii_um, r, side="right") - 1, 0, self.radii_um.size - 2)
        r0 = self.radii_um[idx]
        v0 = self.values[idx]
        v_at_r = np.interp(r, self.radii_um, self.values)
        partial = _segment_moments(r0, r, v0, v_at_r)
        return np.minimum(self._cumulative[idx] + partial, 1.0)


def _segment_moments(r0: np.ndarray, r1: np.ndarray, v0: np.ndarray, v1: np.ndarray) -> np.ndarray:
    """Exact ∫ 2πr·I(r) dr over [r0, r1] for I linear between (r0, v0) and (r1, v1)."""
    dr = r1 - r0
    safe = np.where(dr > 0, dr, 1.0)
    b = np.where(dr > 0, (v1 - v0) / safe, 0.0)
    a = v0 - b * r0
    return 2.0 * math.pi * (a * (r1 ** 2 - r0 ** 2) / 2.0 + b * (r1 ** 3 - r0 ** 3) / 3.0)


def _airy_pattern(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    safe = np.where(v == 0.0, 1.0, v)
    ratio = np.where(v == 0.0, 1.0, 2.0 * special.j1(safe) / safe)
    return ratio * ratio


def airy_first_null_radius_um(wavelength_m: float, numerical_aperture: float) -> float:
    tan_alpha = numerical_aperture / math.sqrt(1.0 - numerical_aperture ** 2)
    return 0.61 * wavelength_m * 1e6 / tan_alpha


def airy_radial_intensity(r_um, wavelength_m: float = 397e-9, numerical_aperture: float = 0.25):
    """Peak-normalised Airy pattern [2J1(x)/x]^2 at object-plane radius `r_um`."""
    r = np.asarray(r_um, dtype=float)
    if np.any(r < 0):
        raise ValueError("airy_radial_intensity requires r >= 0")
    scale = airy_first_null_radius_um(wavelength_m, numerical_aperture) / _J1_FIRST_ZERO
    out = _airy_pattern(r / scale)
    return float(out) if out.ndim == 0 else out


def encircled_energy(psf: PointSpreadFunction, r_um) -> float:
    return float(psf.encircled_energy(np.asarray(r_um, dtype=float)))


def aberrated_psf(
    core_sigma_um: float = 3.9,
    halo_sigma_um: float = 16.0,
    halo_weight: float = 0.425,
    r_max_um: float = 150.0,
    step_um: float = 0.25,
) -> TabulatedPSF:
    """Phenomenological stand-in for an objective working well below its diffraction limit.

    A Gaussian core plus a broad Gaussian halo. The defaults give about 4.0%
    of an ion's signal inside a 14 µm ROI centred on a neighbour 14 µm away,
    and about 0.9% for the next-nearest neighbour. On a 50x10 pixel grid at
    2.6 µm/pixel, the 100 brightest pixels of an ion hold about 87% of the
    signal that ion puts on the grid.
    """
    if not 0.0 <= halo_weight <= 1.0:
        raise ValueError(f"halo_weight must lie in [0, 1], got {halo_weight}")
    if core_sigma_um <= 0 or halo_sigma_um <= 0:
        raise ValueError("core and halo widths must be positive")
    r = np.arange(0.0, r_max_um + step_um / 2, step_um)
    core = np.exp(-r * r / (2.0 * core_sigma_um ** 2)) / (2.0 * math.pi * core_sigma_um ** 2)
    halo = np.exp(-r * r / (2.0 * halo_sigma_um ** 2)) / (2.0 * math.pi * halo_sigma_um ** 2)
    return TabulatedPSF(r, (1.0 - halo_weight) * core + halo_weight * halo)


def roi_diameter_for_pixels(n_pixels: int, pixel_pitch_um: float) -> float:
    """Diameter of a circular ROI holding `n_pixels` pixels."""
    return pixel_pitch_um * math.sqrt(4.0 * n_pixels / math.pi)


def linear_chain(
    n_ions: int,
    spacing_um: float,
    width_px: int,
    height_px: int,
    pixel_pitch_um: float,
) -> Tuple[Tuple[float, float], ...]:
    """Ions on a horizontal line through the grid centre; a single ion sits on a pixel centre."""
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    xc = (width_px // 2 + 0.5) * pixel_pitch_um
    yc = (height_px // 2 + 0.5) * pixel_pitch_um
    offsets = (np.arange(n_ions) - (n_ions - 1) / 2.0) * spacing_um
    return tuple((float(xc + o), float(yc)) for o in offsets)


@dataclass(frozen=True, eq=False)
class ImagingModel:
    """Maps ion brightness to expected photon rates on the camera pixel grid.

    Pixel (row, col) covers x in [col·pitch, (col+1)·pitch) and y in
    [row·pitch, (row+1)·pitch) of the object plane. `per_ion_bright_rate`
    is the photon rate per bright ion arriving at the sensor; the camera
    applies its quantum efficiency.
    """
    ion_positions_um: Tuple[Tuple[float, float], ...]
    psf: PointSpreadFunction
    width_px: int
    height_px: int
    per_ion_bright_rate: float
    pixel_pitch_um: float = 2.6
    subsamples: int = 4

    def __post_init__(self) -> None:
        if len(self.ion_positions_um) == 0:
            raise ValueError("ImagingModel needs at least one ion")
        if len(set(self.ion_positions_um)) != len(self.ion_positions_um):
            raise ValueError("ion positions must be distinct")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("grid must be at least 1x1 pixels")
        if self.pixel_pitch_um <= 0:
            raise ValueError("pixel_pitch_um must be positive")
        if self.per_ion_bright_rate < 0:
            raise ValueError("per_ion_bright_rate must be non-negative")
        if self.subsamples < 1:
            raise ValueError("subsamples must be >= 1")

    @property
    def n_ions(self) -> int:
        return len(self.ion_positions_um)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height_px, self.width_px)

    def ion_pixel_coordinates(self) -> np.ndarray:
        """Ion positions as fractional (row, col) pixel coordinates, pixel centres at k + 0.5."""
        pos = np.asarray(self.ion_positions_um, dtype=float) / self.pixel_pitch_um
        return pos[:, ::-1].copy()

    def _check_field_of_view(self) -> None:
        w = self.width_px * self.pixel_pitch_um
        h = self.height_px * self.pixel_pitch_um
        support = self.psf.support_radius_um
        for k, (x, y) in enumerate(self.ion_positions_um):
            dx = max(0.0, -x, x - w)
            dy = max(0.0, -y, y - h)
            if math.hypot(dx, dy) > support:
                raise OpticsError(
                    f"ion {k} at ({x:g}, {y:g}) um lies {math.hypot(dx, dy):.1f} um outside the "
                    f"{w:g}x{h:g} um field of view, beyond the PSF support of {support:.1f} um"
                )

    @cached_property
    def fraction_maps(self) -> np.ndarray:
        """Per-ion fraction of its signal landing on each pixel, shape (n_ions, H, W).

        Midpoint rule over `subsamples` x `subsamples` points per pixel.
        """
        self._check_field_of_view()
        s = self.subsamples
        p = self.pixel_pitch_um
        sub = (np.arange(s) + 0.5) / s
        xs = ((np.arange(self.width_px)[:, None] + sub[None, :]) * p).ravel()
        ys = ((np.arange(self.height_px)[:, None] + sub[None, :]) * p).ravel()
        maps = np.empty((self.n_ions, self.height_px, self.width_px))
        for k, (x0, y0) in enumerate(self.ion_positions_um):
            r = np.hypot(ys[:, None] - y0, xs[None, :] - x0)
            dens = self.psf.density(r).reshape(self.height_px, s, self.width_px, s)
            maps[k] = dens.mean(axis=(1, 3)) * p * p
        maps.setflags(write=False)
        return maps

    @cached_property
    def spill_fractions(self) -> np.ndarray:
        """Per-ion fraction of the signal falling outside the grid."""
        return 1.0 - self.fraction_maps.sum(axis=(1, 2))

    @cached_property
    def ion_rate_maps(self) -> np.ndarray:
        """Per-ion photon rate maps (photons/s per pixel) when that ion is bright."""
        maps = self.fraction_maps * self.per_ion_bright_rate
        maps.setflags(write=False)
        return maps


def pixel_rate_map(model: ImagingModel, bright_ions: Iterable[int]) -> np.ndarray:
    """Superposition of the bright ions' pixel rate maps; dark ions contribute nothing."""
    out = np.zeros(model.shape)
    for k in sorted(set(bright_ions)):
        if not 0 <= k < model.n_ions:
            raise ValueError(f"bright ion index {k} out of range for {model.n_ions} ions")
        out = out + model.ion_rate_maps[k]
    return out


def disc_fraction(psf: PointSpreadFunction, offset_um: float, radius_um: float) -> float:
    """Fraction of a PSF's energy inside a disc of `radius_um` whose centre is
    `offset_um` away from the PSF centre.

    Integrates the radial density against the arc length of each circle about
    the source that lies inside the disc.
    """
    d = abs(offset_um)
    a = radius_um
    if a <= 0:
        return 0.0
    if d == 0.0:
        return encircled_energy(psf, a)

    inner = encircled_energy(psf, a - d) if a > d else 0.0

    def integrand(r: float) -> float:
        c = (r * r + d * d - a * a) / (2.0 * r * d)
        theta = 2.0 * math.acos(min(1.0, max(-1.0, c)))
        return float(psf.density(np.asarray(r))) * r * theta

    outer, _ = integrate.quad(integrand, abs(a - d), a + d, limit=400, epsabs=1e-11, epsrel=1e-10)
    return inner + outer


def crosstalk_fraction(
    model: ImagingModel,
    roi_center_um: Tuple[float, float],
    roi_diameter_um: float,
    source_ion: int,
) -> float:
    """Fraction of `source_ion`'s total signal falling inside a circular ROI."""
    if roi_diameter_um <= 0:
        raise ValueError(f"roi_diameter_um must be positive, got {roi_diameter_um}")
    x0, y0 = model.ion_positions_um[source_ion]
    offset = math.hypot(roi_center_um[0] - x0, roi_center_um[1] - y0)
    return disc_fraction(model.psf, offset, roi_diameter_um / 2.0)
