from dataclasses import dataclass
from enum import Enum
import logging
from typing import List, Sequence, Tuple

import numpy as np

from .core import ModelValidityError

logger = logging.getLogger(__name__)


class ExcessNoiseMode(Enum):
    # Poisson counting at half the quantum efficiency; fast.
    EffectiveQE = "effective_qe"
    # Poisson electrons through a stochastic multiplication register.
    AnalogGain = "analog_gain"


@dataclass(frozen=True)
class CameraModel:
    """EM-CCD detection model in photon-equivalent count units.

    Background is clock-induced charge: Poisson electrons per pixel per readout.
    """
    quantum_efficiency: float = 0.48
    excess_noise_mode: ExcessNoiseMode = ExcessNoiseMode.EffectiveQE
    em_gain: float = 300.0
    cic_per_pixel: float = 0.02
    readout_dead_time_s: float = 6e-6
    frame_read_time_per_pixel_s: float = 1e-7
    # Optional additive Gaussian term in photon-equivalent units; off by default.
    read_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.quantum_efficiency <= 1.0:
            raise ModelValidityError(f"quantum_efficiency must lie in (0, 1], got {self.quantum_efficiency}")
        if self.cic_per_pixel < 0:
            raise ModelValidityError(f"cic_per_pixel must be >= 0, got {self.cic_per_pixel}")
        if self.excess_noise_mode is ExcessNoiseMode.AnalogGain and self.em_gain < 1.0:
            raise ModelValidityError(f"em_gain must be >= 1 in analog mode, got {self.em_gain}")
        if self.readout_dead_time_s < 0 or self.frame_read_time_per_pixel_s < 0:
            raise ModelValidityError("readout timings must be non-negative")
        if self.read_noise_sigma < 0:
            raise ModelValidityError(f"read_noise_sigma must be >= 0, got {self.read_noise_sigma}")

    @property
    def effective_qe(self) -> float:
        """Counting efficiency: QE halved by the excess noise in effective mode."""
        if self.excess_noise_mode is ExcessNoiseMode.EffectiveQE:
            return self.quantum_efficiency / 2.0
        return self.quantum_efficiency

    def frame_read_time(self, n_pixels: int) -> float:
        return n_pixels * self.frame_read_time_per_pixel_s


@dataclass(frozen=True, eq=False)
class Frame:
    """One exposure's photon-equivalent counts, shape (H, W)."""
    counts: np.ndarray
    exposure_time: float
    timestamp_index: int = 0
    start_time: float = 0.0

    def __post_init__(self) -> None:
        if self.counts.ndim != 2:
            raise ValueError(f"Frame counts must be 2-D, got shape {self.counts.shape}")
        if self.counts.size and self.counts.min() < 0:
            raise ValueError("Frame counts must be non-negative")
        if self.exposure_time < 0:
            raise ValueError("exposure_time must be non-negative")


def em_register_output(electrons: np.ndarray, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Analog EM-register output: Gamma(n, gain) per pixel, exactly 0 for n = 0."""
    n = np.asarray(electrons, dtype=np.int64)
    out = np.zeros(n.shape, dtype=float)
    mask = n > 0
    out[mask] = rng.gamma(shape=n[mask], scale=gain)
    return out


def expose_batch(camera: CameraModel, photons: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Integer counts for expected photon numbers arriving per pixel (any shape)."""
    photons = np.asarray(photons, dtype=float)
    if photons.size and photons.min() < 0:
        raise ValueError("expected photon numbers must be non-negative")

    if camera.excess_noise_mode is ExcessNoiseMode.EffectiveQE:
        counts = rng.poisson(photons * camera.effective_qe + camera.cic_per_pixel)
        if camera.read_noise_sigma > 0:
            noisy = counts + rng.normal(0.0, camera.read_noise_sigma, size=counts.shape)
            counts = np.maximum(np.rint(noisy), 0)
        return counts.astype(np.int32)

    electrons = rng.poisson(photons * camera.quantum_efficiency + camera.cic_per_pixel)
    analog = em_register_output(electrons, camera.em_gain, rng)
    if camera.read_noise_sigma > 0:
        analog = analog + rng.normal(0.0, camera.read_noise_sigma * camera.em_gain, size=analog.shape)
    # np.rint rounds half to even.
    return np.maximum(np.rint(analog / camera.em_gain), 0).astype(np.int32)


def expose(
    camera: CameraModel,
    rates: np.ndarray,
    t: float,
    rng: np.random.Generator,
    timestamp_index: int = 0,
    start_time: float = 0.0,
) -> Frame:
    """One exposure of duration `t` seconds under a constant rate map (photons/s per pixel)."""
    if t < 0:
        raise ValueError(f"exposure time must be >= 0, got {t}")
    rates = np.asarray(rates, dtype=float)
    if rates.ndim != 2:
        raise ValueError(f"rate map must be 2-D, got shape {rates.shape}")
    counts = expose_batch(camera, rates * t, rng)
    return Frame(counts=counts, exposure_time=t, timestamp_index=timestamp_index, start_time=start_time)


def expose_sequence(
    camera: CameraModel,
    schedule: Sequence[Tuple[np.ndarray, float]],
    rng: np.random.Generator,
) -> List[Frame]:
    """One frame per (rate map, duration) entry; the readout dead time after each
    exposure advances the clock without producing counts."""
    if len(schedule) == 0:
        raise ValueError("exposure schedule must be non-empty")
    frames: List[Frame] = []
    clock = 0.0
    for j, (rates, duration) in enumerate(schedule):
        frames.append(expose(camera, rates, duration, rng, timestamp_index=j, start_time=clock))
        clock += duration + camera.readout_dead_time_s
    return frames


def sequence_duration(camera: CameraModel, durations: Sequence[float]) -> float:
    """Wall time of an exposure sequence including the dead time after every exposure."""
    return float(sum(durations)) + len(durations) * camera.readout_dead_time_s


def readout_time(camera: CameraModel, exposure_s: float, n_pixels: int, n_exposures: float = 1.0) -> float:
    """Mean wall time of `n_exposures` exposures, each followed by dead time and a read of `n_pixels` pixels.

    `n_exposures` may be fractional: the mean number used by an adaptive readout.
    """
    if n_exposures < 0:
        raise ValueError(f"n_exposures must be >= 0, got {n_exposures}")
    return n_exposures * (sequence_duration(camera, [exposure_s]) + camera.frame_read_time(n_pixels))
