from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from .core import IonState, ModelValidityError, RegisterState, check_shape
from .emccd import CameraModel, Frame, expose_batch
from .harness.streams import stream_for
from .irf import TrialLabel
from .optics import ImagingModel

logger = logging.getLogger(__name__)

# Frame indices of the six-exposure register protocol.
CHECK_EXPOSURE = 0
PRE_EXPOSURES = (1, 2)
TEST_EXPOSURE = 3
POST_EXPOSURES = (4, 5)


@dataclass(frozen=True)
class DecayModel:
    """Spontaneous dark -> bright decay of the shelved level."""
    lifetime_s: float = 1.168

    def __post_init__(self) -> None:
        if not self.lifetime_s > 0:
            raise ModelValidityError(f"decay lifetime must be positive, got {self.lifetime_s}")

    def decay_probability(self, window_s: float) -> float:
        """Probability that a dark ion decays within `window_s`."""
        return -math.expm1(-window_s / self.lifetime_s)


class ProtocolKind(Enum):
    SingleExposure = "single_exposure"
    TimeResolved = "time_resolved"
    Qunybble = "qunybble"


@dataclass(frozen=True)
class TrialProtocol:
    """Exposure sequence and state preparation of one trial.

    SingleExposure and TimeResolved alternate bright and dark preparation by
    global trial index (even = bright). Qunybble shelves each ion at random
    after an all-bright check exposure, then takes pre, pre, test, post, post.
    """
    kind: ProtocolKind
    exposure_s: float = 400e-6
    n_exposures: int = 1
    shelve_probability: float = 0.46
    # Probability that an ion meant to be shelved is left bright.
    prep_error: float = 0.0

    def __post_init__(self) -> None:
        if self.exposure_s <= 0:
            raise ValueError(f"exposure_s must be positive, got {self.exposure_s}")
        if not 0.0 <= self.shelve_probability <= 1.0:
            raise ValueError(f"shelve_probability must lie in [0, 1], got {self.shelve_probability}")
        if not 0.0 <= self.prep_error <= 1.0:
            raise ValueError(f"prep_error must lie in [0, 1], got {self.prep_error}")
        expected = {ProtocolKind.SingleExposure: 1, ProtocolKind.Qunybble: 6}.get(self.kind)
        if expected is not None and self.n_exposures != expected:
            raise ValueError(f"{self.kind.value} protocol takes {expected} exposures, got {self.n_exposures}")
        if self.n_exposures < 1:
            raise ValueError("n_exposures must be >= 1")

    @staticmethod
    def single_exposure(exposure_s: float = 400e-6, prep_error: float = 0.0) -> "TrialProtocol":
        return TrialProtocol(ProtocolKind.SingleExposure, exposure_s, 1, prep_error=prep_error)

    @staticmethod
    def time_resolved(n_exposures: int = 18, exposure_s: float = 200e-6,
                      prep_error: float = 0.0) -> "TrialProtocol":
        return TrialProtocol(ProtocolKind.TimeResolved, exposure_s, n_exposures, prep_error=prep_error)

    @staticmethod
    def qunybble(exposure_s: float = 400e-6, shelve_probability: float = 0.46,
                 prep_error: float = 0.0) -> "TrialProtocol":
        return TrialProtocol(ProtocolKind.Qunybble, exposure_s, 6, shelve_probability, prep_error)

    @property
    def alternating(self) -> bool:
        return self.kind is not ProtocolKind.Qunybble

    def exposure_starts(self, camera: CameraModel) -> np.ndarray:
        """Start time of each exposure within the trial; dead time follows every exposure."""
        return np.arange(self.n_exposures) * (self.exposure_s + camera.readout_dead_time_s)

    def prepared_at(self, camera: CameraModel) -> float:
        """Time at which the prepared state takes effect (instantaneous shelving)."""
        if self.kind is ProtocolKind.Qunybble:
            return float(self.exposure_starts(camera)[PRE_EXPOSURES[0]])
        return 0.0

    def decay_window(self, camera: CameraModel) -> float:
        """Span from preparation to the end of the last exposure."""
        end = float(self.exposure_starts(camera)[-1]) + self.exposure_s
        return end - self.prepared_at(camera)


@dataclass(frozen=True)
class SimulationModels:
    imaging: ImagingModel
    camera: CameraModel
    decay: DecayModel = field(default_factory=DecayModel)


@dataclass(frozen=True, eq=False)
class TrialRecord:
    """Ground truth and frames of one trial. Decay times are seconds from trial start."""
    prepared_state: RegisterState
    decay_events: Tuple[Tuple[int, float], ...]
    frames: Tuple[Frame, ...]
    protocol: TrialProtocol

    def __post_init__(self) -> None:
        if len(self.frames) != self.protocol.n_exposures:
            raise ValueError(
                f"{self.protocol.kind.value} trial needs {self.protocol.n_exposures} frames, got {len(self.frames)}"
            )
        seen = set()
        for ion, _ in self.decay_events:
            if self.prepared_state.bits[ion] is not IonState.Dark:
                raise ValueError(f"decay event for ion {ion}, which was not prepared dark")
            if ion in seen:
                raise ValueError(f"more than one decay event for ion {ion}")
            seen.add(ion)

    @property
    def label(self) -> TrialLabel:
        return TrialLabel(self.prepared_state, self.decay_events)


@dataclass(frozen=True, eq=False)
class TrialBatch:
    """A contiguous block of simulated trials in array form.

    Attributes:
        intended_bright: (n_trials, n_ions) preparation the experimenter asked for
        prepared_bright: (n_trials, n_ions) state actually prepared (differs only by prep error)
        decay_times: (n_trials, n_ions) decay time from trial start, NaN when none
        counts: (n_trials, n_exposures, H, W) photon-equivalent counts
    """
    protocol: TrialProtocol
    first_trial: int
    intended_bright: np.ndarray
    prepared_bright: np.ndarray
    decay_times: np.ndarray
    counts: np.ndarray
    exposure_starts: np.ndarray

    @property
    def n_trials(self) -> int:
        return self.counts.shape[0]

    @property
    def n_ions(self) -> int:
        return self.prepared_bright.shape[1]

    @property
    def trial_ids(self) -> np.ndarray:
        return self.first_trial + np.arange(self.n_trials)

    def decayed_before(self, t: float) -> np.ndarray:
        """(n_trials, n_ions) mask of ions whose decay happened before time `t`."""
        return np.nan_to_num(self.decay_times, nan=np.inf) < t

    def _events(self, i: int) -> Tuple[Tuple[int, float], ...]:
        return tuple(
            (int(k), float(self.decay_times[i, k]))
            for k in range(self.n_ions)
            if not math.isnan(self.decay_times[i, k])
        )

    def record(self, i: int) -> TrialRecord:
        state = RegisterState.from_bright_mask(self.prepared_bright[i])
        events = self._events(i)
        frames = tuple(
            Frame(counts=self.counts[i, j], exposure_time=self.protocol.exposure_s,
                  timestamp_index=j, start_time=float(self.exposure_starts[j]))
            for j in range(self.protocol.n_exposures)
        )
        return TrialRecord(state, events, frames, self.protocol)

    def labels(self) -> List[TrialLabel]:
        return [
            TrialLabel(RegisterState.from_bright_mask(self.prepared_bright[i]), self._events(i))
            for i in range(self.n_trials)
        ]

    def steady_exposures(self) -> np.ndarray:
        """(n_trials, n_exposures) mask of exposures with no state change inside them."""
        t_s = self.protocol.exposure_s
        return np.stack([
            ~(self.decayed_before(float(s) + t_s) & ~self.decayed_before(float(s))).any(axis=-1)
            for s in self.exposure_starts
        ], axis=1)

    def exposure_states(self) -> np.ndarray:
        """(n_trials, n_exposures, n_ions) bright masks, one `state_during` per exposure."""
        return np.stack([state_during(self, j) for j in range(self.protocol.n_exposures)], axis=1)

    @staticmethod
    def from_labels(protocol: TrialProtocol, camera: CameraModel, counts: np.ndarray,
                    labels: Sequence[TrialLabel], first_trial: int = 0) -> "TrialBatch":
        """Rebuild a batch from stored frames (n, M, H, W) and their labels.

        Labels carry the prepared state only, so it stands in for the intended one.
        """
        if counts.ndim != 4 or counts.shape[:2] != (len(labels), protocol.n_exposures):
            raise ValueError(
                f"{protocol.kind.value} frames must be ({len(labels)}, {protocol.n_exposures}, H, W), "
                f"got {counts.shape}"
            )
        prepared = np.stack([lab.prepared_state.bright_mask for lab in labels])
        decay_times = np.full(prepared.shape, np.nan)
        for i, lab in enumerate(labels):
            for ion, t in lab.decay_events:
                decay_times[i, ion] = t
        return TrialBatch(
            protocol=protocol,
            first_trial=first_trial,
            intended_bright=prepared,
            prepared_bright=prepared,
            decay_times=decay_times,
            counts=counts,
            exposure_starts=protocol.exposure_starts(camera),
        )

    @staticmethod
    def concatenate(batches: Sequence["TrialBatch"]) -> "TrialBatch":
        if len(batches) == 0:
            raise ValueError("nothing to concatenate")
        first = batches[0]
        return TrialBatch(
            protocol=first.protocol,
            first_trial=first.first_trial,
            intended_bright=np.concatenate([b.intended_bright for b in batches]),
            prepared_bright=np.concatenate([b.prepared_bright for b in batches]),
            decay_times=np.concatenate([b.decay_times for b in batches]),
            counts=np.concatenate([b.counts for b in batches]),
            exposure_starts=first.exposure_starts,
        )


def prepare_random_state(n_ions: int, shelve_probability: float, rng: np.random.Generator) -> RegisterState:
    """Each ion independently dark with probability `shelve_probability`."""
    if not 0.0 <= shelve_probability <= 1.0:
        raise ValueError(f"shelve_probability must lie in [0, 1], got {shelve_probability}")
    return RegisterState.from_bright_mask(~_shelve(1, n_ions, shelve_probability, rng)[0])


def _shelve(n_trials: int, n_ions: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """(n_trials, n_ions) dark mask."""
    return rng.random((n_trials, n_ions)) < p


def _decay_offsets(prepared_bright: np.ndarray, window_s: float,
                   decay: DecayModel, rng: np.random.Generator) -> np.ndarray:
    """Decay time after preparation per ion, NaN when the ion stays put.

    One exponential draw per ion; bright ions draw too so the stream layout
    does not depend on the prepared state.
    """
    t = -decay.lifetime_s * np.log1p(-rng.random(prepared_bright.shape))
    return np.where(~prepared_bright & (t < window_s), t, np.nan)


def sample_decays(state: RegisterState, total_time: float, decay: DecayModel,
                  rng: np.random.Generator) -> Tuple[Tuple[int, float], ...]:
    """(ion, time) decay events within a window of `total_time` seconds after preparation."""
    if total_time < 0:
        raise ValueError(f"total_time must be >= 0, got {total_time}")
    offsets = _decay_offsets(state.bright_mask[None, :], total_time, decay, rng)[0]
    return tuple((k, float(t)) for k, t in enumerate(offsets) if not math.isnan(t))


def bright_durations(protocol: TrialProtocol, camera: CameraModel,
                     prepared_bright: np.ndarray, decay_times: np.ndarray) -> np.ndarray:
    """Time each ion spends fluorescing in each exposure, shape (n_trials, n_exposures, n_ions).

    An ion that decays at t_d inside an exposure [s, s + T) is bright for s + T - t_d.
    """
    starts = protocol.exposure_starts(camera)[None, :, None]
    t = protocol.exposure_s
    decay_at = np.nan_to_num(decay_times, nan=np.inf)[:, None, :]
    after_decay = np.clip(starts + t - decay_at, 0.0, t)
    out = np.where(prepared_bright[:, None, :], t, after_decay)
    if protocol.kind is ProtocolKind.Qunybble:
        out[:, CHECK_EXPOSURE, :] = t
    return out


def render_trials(
    protocol: TrialProtocol,
    models: SimulationModels,
    intended_bright: np.ndarray,
    prepared_bright: np.ndarray,
    decay_times: np.ndarray,
    rng: np.random.Generator,
    first_trial: int = 0,
) -> TrialBatch:
    """Expose the frames of trials whose state trajectories are already fixed."""
    n_ions = models.imaging.n_ions
    check_shape("prepared_bright", prepared_bright, (None, n_ions))
    check_shape("decay_times", decay_times, prepared_bright.shape)
    durations = bright_durations(protocol, models.camera, prepared_bright, decay_times)
    photons = np.einsum("njk,khw->njhw", durations, models.imaging.ion_rate_maps)
    counts = expose_batch(models.camera, photons, rng)
    return TrialBatch(
        protocol=protocol,
        first_trial=first_trial,
        intended_bright=intended_bright,
        prepared_bright=prepared_bright,
        decay_times=decay_times,
        counts=counts,
        exposure_starts=protocol.exposure_starts(models.camera),
    )


def simulate_block(protocol: TrialProtocol, models: SimulationModels, rng: np.random.Generator,
                   first_trial: int, n_trials: int) -> TrialBatch:
    """Draw states, decays and frames for `n_trials` trials from one stream."""
    n_ions = models.imaging.n_ions
    if protocol.alternating:
        even = (first_trial + np.arange(n_trials)) % 2 == 0
        intended = np.repeat(even[:, None], n_ions, axis=1)
    else:
        intended = ~_shelve(n_trials, n_ions, protocol.shelve_probability, rng)
    prepared = intended.copy()
    if protocol.prep_error > 0:
        prepared |= rng.random(intended.shape) < protocol.prep_error

    camera = models.camera
    offsets = _decay_offsets(prepared, protocol.decay_window(camera), models.decay, rng)
    decay_times = offsets + protocol.prepared_at(camera)
    return render_trials(protocol, models, intended, prepared, decay_times, rng, first_trial)


def run_trial(protocol: TrialProtocol, models: SimulationModels, rng: np.random.Generator) -> TrialRecord:
    return simulate_block(protocol, models, rng, first_trial=0, n_trials=1).record(0)


def run_trial_batch(protocol: TrialProtocol, models: SimulationModels, seed: int,
                    first_trial: int, n_trials: int, purpose_tag: str = "trials") -> TrialBatch:
    """Trials [first_trial, first_trial + n_trials) from their own counter-derived stream."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    window = protocol.decay_window(models.camera)
    if window > 0.01 * models.decay.lifetime_s:
        logger.warning(
            "Trial spans %.3g s, more than 1%% of the %.3g s decay lifetime", window, models.decay.lifetime_s
        )
    logger.debug("Simulating trials %d..%d", first_trial, first_trial + n_trials - 1)
    rng = stream_for(seed, first_trial, purpose_tag)
    return simulate_block(protocol, models, rng, first_trial, n_trials)


def single_ion_bright_frames(models: SimulationModels, ion: int, n_frames: int,
                             exposure_s: float, rng: np.random.Generator) -> np.ndarray:
    """Counts of `n_frames` exposures in which only `ion` fluoresces, shape (n_frames, H, W)."""
    if not 0 <= ion < models.imaging.n_ions:
        raise ValueError(f"ion index {ion} out of range for {models.imaging.n_ions} ions")
    photons = np.broadcast_to(models.imaging.ion_rate_maps[ion] * exposure_s,
                              (n_frames,) + models.imaging.shape)
    return expose_batch(models.camera, photons, rng)


def state_during(batch: TrialBatch, exposure: int) -> np.ndarray:
    """Bright mask at the end of exposure `exposure` (after any decay inside it)."""
    end = float(batch.exposure_starts[exposure]) + batch.protocol.exposure_s
    state = batch.prepared_bright | batch.decayed_before(end)
    if batch.protocol.kind is ProtocolKind.Qunybble and exposure == CHECK_EXPOSURE:
        state = np.ones_like(state)
    return state
