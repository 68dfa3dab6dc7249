from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np


class IonState(Enum):
    # Fluorescing under the detection light (S1/2); bit "0".
    Bright = "bright"
    # Shelved in the metastable level (D5/2); bit "1".
    Dark = "dark"

    @property
    def bit(self) -> str:
        return "0" if self is IonState.Bright else "1"

    @staticmethod
    def from_bit(bit: str) -> "IonState":
        if bit == "0":
            return IonState.Bright
        if bit == "1":
            return IonState.Dark
        raise ValueError(f"State bit must be '0' (bright) or '1' (dark), got {bit!r}")


@dataclass(frozen=True)
class RegisterState:
    """Per-ion bright/dark labels of an ion register, ion 0 first.

    The label string follows the register notation `{0000}..{1111}` with
    `0` = bright and `1` = dark.
    """
    bits: Tuple[IonState, ...]

    def __post_init__(self) -> None:
        if len(self.bits) == 0:
            raise ValueError("RegisterState needs at least one ion")
        for b in self.bits:
            if not isinstance(b, IonState):
                raise TypeError(f"RegisterState bits must be IonState, got {type(b).__name__}")

    @property
    def n_ions(self) -> int:
        return len(self.bits)

    @property
    def label(self) -> str:
        return "".join(b.bit for b in self.bits)

    @property
    def bright_mask(self) -> np.ndarray:
        return np.array([b is IonState.Bright for b in self.bits], dtype=bool)

    @staticmethod
    def from_label(label: str) -> "RegisterState":
        return RegisterState(tuple(IonState.from_bit(c) for c in label.strip()))

    @staticmethod
    def from_bright_mask(mask: Iterable[bool]) -> "RegisterState":
        return RegisterState(tuple(IonState.Bright if m else IonState.Dark for m in mask))

    @staticmethod
    def all_bright(n_ions: int) -> "RegisterState":
        return RegisterState((IonState.Bright,) * n_ions)

    def __str__(self) -> str:
        return "{" + self.label + "}"


def state_code(bright: np.ndarray) -> np.ndarray:
    """Pack per-ion dark bits into an integer code, ion 0 as the most significant bit.

    `bright` has shape (..., n_ions); the code of `{0110}` is 0b0110.
    """
    dark = ~np.asarray(bright, dtype=bool)
    n = dark.shape[-1]
    weights = (1 << np.arange(n - 1, -1, -1)).astype(np.int64)
    return (dark.astype(np.int64) * weights).sum(axis=-1)


def code_to_bright(codes: np.ndarray, n_ions: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    shifts = np.arange(n_ions - 1, -1, -1)
    return ((codes[..., None] >> shifts) & 1) == 0


class ReadoutError(Exception):
    """Base of all errors raised by ionreadout."""


class ConfigError(ReadoutError):
    """Raised when a configuration key is missing, unknown or holds an invalid value."""

    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key
        self.message = message

    def __str__(self) -> str:
        return f"config key '{self.key}': {self.message}"


class OpticsError(ReadoutError):
    """Raised for invalid imaging geometry (e.g. an ion far outside the field of view)."""


class ModelValidityError(ReadoutError):
    """Raised when physical model parameters leave the range where the model holds."""


class CalibrationError(ReadoutError):
    """Raised when calibration data cannot support the requested distributions.

    Attributes:
        cell: Human-readable name of the offending cell (ion, state, neighbour state)
        samples: Number of samples found for the cell
        minimum: Number of samples required
    """

    def __init__(self, message: str, cell: Optional[str] = None,
                 samples: Optional[int] = None, minimum: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.cell = cell
        self.samples = samples
        self.minimum = minimum

    def __str__(self) -> str:
        if self.cell is None:
            return self.message
        return f"{self.message} (cell {self.cell}: {self.samples} samples, need {self.minimum})"


class FrameFormatError(ReadoutError):
    """Raised when encoding or decoding a frame, label or archive file fails."""


def check_shape(name: str, arr: np.ndarray, expected: Sequence[Optional[int]]) -> None:
    """Validate array rank and the dimensions given as ints (None = any)."""
    if arr.ndim != len(expected):
        raise ValueError(f"'{name}' must have {len(expected)} dimensions, got shape {arr.shape}")
    for got, want in zip(arr.shape, expected):
        if want is not None and got != want:
            raise ValueError(f"'{name}' has shape {arr.shape}, expected {tuple(expected)}")
