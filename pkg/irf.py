"""IRF1 frame files and the per-trial label sidecar.

IRF1 layout, all little-endian: magic ``IRF1``; u32 width, height, n_frames;
n_frames x u32 exposure time in nanoseconds; then each frame's width*height
u16 counts, row-major.
"""
from dataclasses import dataclass
import logging
import os
import struct
from typing import List, Sequence, Tuple, Union

import numpy as np

from .core import FrameFormatError, RegisterState
from .emccd import Frame

logger = logging.getLogger(__name__)

MAGIC = b"IRF1"
_HEADER = struct.Struct("<4sIII")
_U32_MAX = 0xFFFFFFFF
_U16_MAX = 0xFFFF

PathLike = Union[str, "os.PathLike[str]"]


def encode_irf(counts: np.ndarray, exposure_times_s: Sequence[float]) -> bytes:
    """Encode a stack of frames with shape (n_frames, H, W)."""
    counts = np.asarray(counts)
    if counts.ndim != 3:
        raise FrameFormatError(f"frame stack must be 3-D (n_frames, H, W), got shape {counts.shape}")
    n, h, w = counts.shape
    if len(exposure_times_s) != n:
        raise FrameFormatError(f"{len(exposure_times_s)} exposure times for {n} frames")
    if counts.size:
        lo, hi = int(counts.min()), int(counts.max())
        if lo < 0 or hi > _U16_MAX:
            raise FrameFormatError(f"counts must lie in [0, {_U16_MAX}], found range [{lo}, {hi}]")
    ns = np.rint(np.asarray(exposure_times_s, dtype=float) * 1e9)
    if ns.size and (ns.min() < 0 or ns.max() > _U32_MAX):
        raise FrameFormatError("exposure times must lie in [0, 4.29] s to fit u32 nanoseconds")
    return b"".join([
        _HEADER.pack(MAGIC, w, h, n),
        ns.astype("<u4").tobytes(),
        counts.astype("<u2").tobytes(order="C"),
    ])


def decode_irf(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of `encode_irf`: (counts with shape (n, H, W), exposure times in seconds)."""
    if len(data) < _HEADER.size:
        raise FrameFormatError(f"IRF1 data truncated: {len(data)} bytes, header needs {_HEADER.size}")
    magic, w, h, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * n + 2 * n * w * h
    if len(data) != expected:
        raise FrameFormatError(f"IRF1 size mismatch: {len(data)} bytes, header implies {expected}")
    off = _HEADER.size
    ns = np.frombuffer(data, dtype="<u4", count=n, offset=off)
    off += 4 * n
    counts = np.frombuffer(data, dtype="<u2", count=n * w * h, offset=off).reshape(n, h, w)
    return counts.astype(np.int32), ns.astype(float) * 1e-9


def write_irf(path: PathLike, frames: Sequence[Frame]) -> None:
    if len(frames) == 0:
        raise FrameFormatError("refusing to write an empty IRF1 file")
    stack = np.stack([f.counts for f in frames])
    write_irf_stack(path, stack, [f.exposure_time for f in frames])


def write_irf_stack(path: PathLike, counts: np.ndarray, exposure_times_s: Sequence[float]) -> None:
    data = encode_irf(counts, exposure_times_s)
    with open(path, "wb") as fh:
        fh.write(data)
    logger.debug("Wrote %d frames to %s", len(exposure_times_s), path)


def read_irf(path: PathLike) -> List[Frame]:
    with open(path, "rb") as fh:
        counts, times = decode_irf(fh.read())
    return [
        Frame(counts=counts[j], exposure_time=float(times[j]), timestamp_index=j)
        for j in range(counts.shape[0])
    ]


@dataclass(frozen=True)
class TrialLabel:
    """Ground truth of one trial: prepared state and (ion, time in seconds) decay events."""
    prepared_state: RegisterState
    decay_events: Tuple[Tuple[int, float], ...] = ()

    def to_line(self) -> str:
        events = " ".join(f"{ion}:{int(round(t * 1e9))}" for ion, t in self.decay_events)
        return f"{self.prepared_state.label} {events}".rstrip()

    @staticmethod
    def from_line(line: str, lineno: int = 0) -> "TrialLabel":
        parts = line.split()
        if not parts:
            raise FrameFormatError(f"label line {lineno}: empty")
        try:
            state = RegisterState.from_label(parts[0])
            events = []
            for tok in parts[1:]:
                ion, ns = tok.split(":")
                events.append((int(ion), int(ns) * 1e-9))
        except ValueError as e:
            raise FrameFormatError(f"label line {lineno}: {e}") from e
        for ion, _ in events:
            if not 0 <= ion < state.n_ions:
                raise FrameFormatError(f"label line {lineno}: decay ion {ion} out of range")
        return TrialLabel(state, tuple(events))


def write_labels(path: PathLike, protocol: str, labels: Sequence[TrialLabel]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# protocol={protocol} trials={len(labels)}\n")
        for lab in labels:
            fh.write(lab.to_line() + "\n")


def read_labels(path: PathLike) -> Tuple[str, List[TrialLabel]]:
    """Return (protocol name, labels) from a sidecar written by `write_labels`."""
    protocol = ""
    labels: List[TrialLabel] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for field in line[1:].split():
                    key, _, value = field.partition("=")
                    if key == "protocol":
                        protocol = value
                continue
            labels.append(TrialLabel.from_line(line, lineno))
    return protocol, labels
