from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass, field
import logging
import math
import os
from typing import Any, Dict, Mapping, Optional, Set, Tuple, Type, Union

import numpy as np
from scipy import optimize, stats

from ..core import ConfigError, OpticsError
from ..emccd import CameraModel, ExcessNoiseMode
from ..optics import AiryPSF, GaussianPSF, ImagingModel, PointSpreadFunction, aberrated_psf, linear_chain
from ..register_sim import DecayModel, SimulationModels, TrialProtocol

logger = logging.getLogger(__name__)

AllowedKeyTypeUnion = Union[Type[str], Type[int], Type[float], Type[bool]]
AllowedKeyTypeTuple = (str, int, float, bool)

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}

EXPERIMENT_KINDS = {"single_exposure", "time_resolved", "qunybble", "crosstalk_study"}
METHODS = {"T", "M", "A", "MN", "MN3", "ST", "STA"}

# Summed-ROI discrimination target of the automatic bright signal.
AUTO_SIGNAL_ROI = 30
AUTO_SIGNAL_TARGET = 1e-5
# Field-of-view margin around the outer ions when the grid size is automatic.
AUTO_GRID_MARGIN_UM = 26.0


@dataclass(frozen=True)
class ConfigKey:
    """One declared configuration key.

    Declaration-time validation checks the type and the enum; `validate_value`
    enforces exact types (bools are not ints) and `coerce` parses INI text.
    """
    section: str
    name: str
    argtype: AllowedKeyTypeUnion
    desc: str = ""
    default: Any = None
    optional: bool = False
    enum: Optional[Set[str]] = None

    def __post_init__(self) -> None:
        if self.argtype not in AllowedKeyTypeTuple:
            raise ValueError(
                f"Key '{self.qualname}' has unsupported type {self.argtype!r}; "
                f"only {AllowedKeyTypeTuple} are allowed."
            )
        if self.enum is not None:
            if self.argtype is not str:
                raise ValueError(f"Key '{self.qualname}': enum constraint is only supported for str keys.")
            if not isinstance(self.enum, (set, frozenset)) or len(self.enum) == 0:
                raise ValueError(f"Key '{self.qualname}': enum must be a set of string literals.")
            if any(not isinstance(v, str) for v in self.enum):
                raise ValueError(f"Key '{self.qualname}': enum values must be strings.")
        if self.default is not None:
            self.validate_value(self.default)

    @property
    def qualname(self) -> str:
        return f"{self.section}.{self.name}"

    def validate_value(self, value: Any) -> None:
        if value is None:
            if self.optional:
                return
            raise ConfigError(self.qualname, "is required and cannot be empty")

        # bool is a subclass of int; enforce exact match semantics
        if self.argtype is bool:
            if type(value) is not bool:
                raise ConfigError(self.qualname, f"expects bool, got {type(value).__name__}")
            return
        if self.argtype in (int, float) and type(value) is bool:
            raise ConfigError(self.qualname, f"expects {self.argtype.__name__}, got bool")
        if self.argtype is float and type(value) is int:
            return
        if not isinstance(value, self.argtype):
            raise ConfigError(self.qualname, f"expects {self.argtype.__name__}, got {type(value).__name__}")
        if self.argtype is float and not math.isfinite(value):
            raise ConfigError(self.qualname, f"must be finite, got {value}")
        if self.argtype is str and self.enum is not None and value not in self.enum:
            allowed = ", ".join(sorted(self.enum))
            raise ConfigError(self.qualname, f"must be one of: {allowed}; got '{value}'")

    def coerce(self, raw: str) -> Any:
        text = raw.strip()
        if text == "":
            value = None
        elif self.argtype is bool:
            low = text.lower()
            if low in _TRUE:
                value = True
            elif low in _FALSE:
                value = False
            else:
                raise ConfigError(self.qualname, f"expects a boolean, got '{raw}'")
        elif self.argtype in (int, float):
            try:
                value = self.argtype(text)
            except ValueError:
                raise ConfigError(self.qualname, f"expects {self.argtype.__name__}, got '{raw}'") from None
        else:
            value = text
        self.validate_value(value)
        return value


CONFIG_KEYS: Tuple[ConfigKey, ...] = (
    ConfigKey("experiment", "kind", str, "experiment to run", "qunybble", enum=EXPERIMENT_KINDS),
    ConfigKey("experiment", "seed", int, "master seed; required, no wall-clock default"),
    ConfigKey("experiment", "trials", int, "test trials", 100000),
    ConfigKey("experiment", "calibration_trials", int, "separate calibration trials (0 = same as trials)", 0),
    ConfigKey("experiment", "threads", int, "worker threads", 1),
    ConfigKey("experiment", "block_size", int, "trials per counter-derived block", 1024),

    ConfigKey("ions", "count", int, "ions in the chain (0 = 1 for single-ion experiments, else 4)", 0),
    ConfigKey("ions", "spacing_um", float, "mean ion spacing", 14.0),

    ConfigKey("optics", "psf", str, "point-spread function", "aberrated", enum={"aberrated", "airy", "gaussian"}),
    ConfigKey("optics", "wavelength_nm", float, "fluorescence wavelength", 397.0),
    ConfigKey("optics", "numerical_aperture", float, "objective sin(alpha)", 0.25),
    ConfigKey("optics", "gaussian_sigma_um", float, "gaussian PSF width", 1.5),
    ConfigKey("optics", "core_sigma_um", float, "aberrated PSF core width", 3.9),
    ConfigKey("optics", "halo_sigma_um", float, "aberrated PSF halo width", 16.0),
    ConfigKey("optics", "halo_weight", float, "aberrated PSF halo energy fraction", 0.425),
    ConfigKey("optics", "pixel_pitch_um", float, "object-plane pixel pitch", 2.6),
    ConfigKey("optics", "grid_width_px", int, "camera grid width (0 = fit the chain)", 0),
    ConfigKey("optics", "grid_height_px", int, "camera grid height (0 = fit the chain)", 0),
    ConfigKey("optics", "subsamples", int, "midpoint sub-samples per pixel side", 4),

    ConfigKey("camera", "quantum_efficiency", float, "sensor quantum efficiency", 0.48),
    ConfigKey("camera", "noise_mode", str, "excess-noise model", "effective_qe", enum={m.value for m in ExcessNoiseMode}),
    ConfigKey("camera", "em_gain", float, "mean EM gain (analog mode)", 300.0),
    ConfigKey("camera", "cic_per_pixel", float, "clock-induced charge per pixel per readout", 0.02),
    ConfigKey("camera", "dead_time_us", float, "readout dead time between exposures", 6.0),
    ConfigKey("camera", "read_time_per_pixel_us", float, "frame read time per pixel", 0.1),
    ConfigKey("camera", "read_noise", float, "additive Gaussian read noise, photon-equivalent", 0.0),
    ConfigKey("camera", "bright_counts_per_400us", str, "detected counts per bright ion per 400 us, or auto", "auto"),

    ConfigKey("protocol", "exposure_us", float, "exposure duration (0 = 400, or 200 for time_resolved)", 0.0),
    ConfigKey("protocol", "n_exposures", int, "exposures per time-resolved trial", 18),
    ConfigKey("protocol", "shelve_probability", float, "per-ion shelving probability", 0.46),
    ConfigKey("protocol", "lifetime_ms", float, "metastable decay lifetime", 1168.0),
    ConfigKey("protocol", "prep_error", float, "probability a shelved ion is left bright", 0.0),

    ConfigKey("analysis", "roi_min", int, "smallest ROI size of the sweep", 1),
    ConfigKey("analysis", "roi_max", int, "largest ROI size of the sweep", 100),
    ConfigKey("analysis", "roi_step", int, "ROI sweep step", 1),
    ConfigKey("analysis", "methods", str, "comma-separated methods (empty = all for the experiment)", "", optional=True),
    ConfigKey("analysis", "r_stop", float, "adaptive stopping confidence (0 = tune from the grid)", 0.0),
    ConfigKey("analysis", "r_stop_grid", str, "candidate R_stop values", "1,2,3,4,5,6,7,8,10,12,13.8155"),
    ConfigKey("analysis", "smoothing_alpha", float, "add-alpha PMF smoothing", 0.5),
    ConfigKey("analysis", "min_samples", int, "minimum frames per calibration cell", 100),
    ConfigKey("analysis", "order_source", str, "pixel order for registers", "check", enum={"check", "single_ion"}),
    ConfigKey("analysis", "order_frames", int, "single-ion-bright frames per ion for pixel order", 2000),
    ConfigKey("analysis", "neighbour_arity", int, "neighbours conditioning MN", 2),
    # Smaller than a 10x10 box, which at 14 um spacing would reach past the neighbouring ions.
    ConfigKey("analysis", "postselect_width_px", int, "post-selection box width", 5),
    ConfigKey("analysis", "postselect_height_px", int, "post-selection box height", 5),
    ConfigKey("analysis", "retained_target", float, "post-selection retained fraction target", 0.95),
    ConfigKey("analysis", "subtract_prep_error", float, "known preparation error contribution to subtract", 0.0),

    ConfigKey("output", "dir", str, "output directory", "out"),
)

KEYS_BY_NAME: Dict[str, ConfigKey] = {k.qualname: k for k in CONFIG_KEYS}
assert len(KEYS_BY_NAME) == len(CONFIG_KEYS), "duplicate config key declaration"

_DEFAULT_METHODS = {
    "single_exposure": ("T", "M", "A"),
    "time_resolved": ("T", "ST", "STA"),
    "qunybble": ("T", "M", "MN", "MN3"),
    "crosstalk_study": (),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; `values` maps qualified key names to typed values."""
    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, qualname: str) -> Any:
        if qualname not in KEYS_BY_NAME:
            raise KeyError(qualname)
        return self.values[qualname]

    @property
    def kind(self) -> str:
        return self["experiment.kind"]

    @property
    def seed(self) -> int:
        return self["experiment.seed"]

    @property
    def trials(self) -> int:
        return self["experiment.trials"]

    @property
    def calibration_trials(self) -> int:
        return self["experiment.calibration_trials"] or self.trials

    @property
    def threads(self) -> int:
        return self["experiment.threads"]

    @property
    def block_size(self) -> int:
        return self["experiment.block_size"]

    @property
    def out_dir(self) -> str:
        return self["output.dir"]

    @property
    def n_ions(self) -> int:
        n = self["ions.count"]
        if n:
            return n
        return 1 if self.kind in ("single_exposure", "time_resolved") else 4

    @property
    def exposure_s(self) -> float:
        us = self["protocol.exposure_us"]
        if not us:
            us = 200.0 if self.kind == "time_resolved" else 400.0
        return us * 1e-6

    @property
    def roi_sizes(self) -> Tuple[int, ...]:
        return tuple(range(self["analysis.roi_min"], self["analysis.roi_max"] + 1, self["analysis.roi_step"]))

    @property
    def methods(self) -> Tuple[str, ...]:
        raw = self["analysis.methods"]
        if not raw:
            return _DEFAULT_METHODS[self.kind]
        return tuple(m.strip() for m in raw.split(",") if m.strip())

    @property
    def r_stop_grid(self) -> Tuple[float, ...]:
        return tuple(sorted(float(v) for v in self["analysis.r_stop_grid"].split(",") if v.strip()))

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        """Nested {section: {key: value}} echo for the manifest."""
        out: Dict[str, Dict[str, Any]] = {}
        for key in CONFIG_KEYS:
            out.setdefault(key.section, {})[key.name] = self.values[key.qualname]
        return out

    def camera_model(self) -> CameraModel:
        return CameraModel(
            quantum_efficiency=self["camera.quantum_efficiency"],
            excess_noise_mode=ExcessNoiseMode(self["camera.noise_mode"]),
            em_gain=self["camera.em_gain"],
            cic_per_pixel=self["camera.cic_per_pixel"],
            readout_dead_time_s=self["camera.dead_time_us"] * 1e-6,
            frame_read_time_per_pixel_s=self["camera.read_time_per_pixel_us"] * 1e-6,
            read_noise_sigma=self["camera.read_noise"],
        )

    def psf(self) -> PointSpreadFunction:
        kind = self["optics.psf"]
        if kind == "airy":
            return AiryPSF(self["optics.wavelength_nm"] * 1e-9, self["optics.numerical_aperture"])
        if kind == "gaussian":
            return GaussianPSF(self["optics.gaussian_sigma_um"])
        return aberrated_psf(self["optics.core_sigma_um"], self["optics.halo_sigma_um"], self["optics.halo_weight"])

    def grid_shape(self) -> Tuple[int, int]:
        """(width, height) in pixels."""
        pitch = self["optics.pixel_pitch_um"]
        width = self["optics.grid_width_px"] or int(math.ceil(
            ((self.n_ions - 1) * self["ions.spacing_um"] + 2 * AUTO_GRID_MARGIN_UM) / pitch))
        height = self["optics.grid_height_px"] or int(math.ceil(2 * AUTO_GRID_MARGIN_UM / pitch))
        return width, height

    def imaging_model(self, per_ion_bright_rate: float, n_ions: Optional[int] = None) -> ImagingModel:
        n = self.n_ions if n_ions is None else n_ions
        width, height = self.grid_shape()
        pitch = self["optics.pixel_pitch_um"]
        return ImagingModel(
            ion_positions_um=linear_chain(n, self["ions.spacing_um"], width, height, pitch),
            psf=self.psf(),
            width_px=width,
            height_px=height,
            per_ion_bright_rate=per_ion_bright_rate,
            pixel_pitch_um=pitch,
            subsamples=self["optics.subsamples"],
        )

    def protocol(self) -> TrialProtocol:
        kind = self.kind
        if kind == "time_resolved":
            return TrialProtocol.time_resolved(self["protocol.n_exposures"], self.exposure_s, self["protocol.prep_error"])
        if kind == "qunybble":
            return TrialProtocol.qunybble(self.exposure_s, self["protocol.shelve_probability"], self["protocol.prep_error"])
        return TrialProtocol.single_exposure(self.exposure_s, self["protocol.prep_error"])

    def bright_counts_per_400us(self) -> float:
        raw = self["camera.bright_counts_per_400us"]
        if raw.strip().lower() == "auto":
            return auto_bright_counts(self)
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError("camera.bright_counts_per_400us", f"expects a number or 'auto', got '{raw}'") from None
        if not value > 0:
            raise ConfigError("camera.bright_counts_per_400us", f"must be positive, got {value}")
        return value

    def build_models(self, bright_counts_per_400us: Optional[float] = None) -> Tuple[SimulationModels, TrialProtocol]:
        counts = self.bright_counts_per_400us() if bright_counts_per_400us is None else bright_counts_per_400us
        camera = self.camera_model()
        rate = counts / (400e-6 * camera.effective_qe)
        try:
            imaging = self.imaging_model(rate)
            _ = imaging.fraction_maps
        except OpticsError as e:
            raise ConfigError("optics.grid_width_px", str(e)) from e
        if self["analysis.roi_max"] > imaging.width_px * imaging.height_px:
            raise ConfigError("analysis.roi_max", f"exceeds the {imaging.width_px}x{imaging.height_px} pixel grid")
        models = SimulationModels(imaging, camera, DecayModel(self["protocol.lifetime_ms"] * 1e-3))
        return models, self.protocol()


def poisson_overlap_error(signal: float, background: float) -> float:
    """Best-threshold ½(P_B(n < θ) + P_D(n ≥ θ)) for Poisson(signal + background) vs Poisson(background)."""
    theta = np.arange(0, int(signal + background + 10 * math.sqrt(signal + background + 1)) + 2)
    miss_bright = stats.poisson.cdf(theta - 1, signal + background)
    false_bright = stats.poisson.sf(theta - 1, background)
    return float(np.min(0.5 * (miss_bright + false_bright)))


def auto_bright_counts(cfg: ExperimentConfig) -> float:
    """Smallest detected signal per 400 us for which the single-ion N=30 summed
    ROI separates bright from dark to better than 1e-5, ignoring decay."""
    camera = cfg.camera_model()
    single = cfg.imaging_model(1.0, n_ions=1)
    fractions = np.sort(single.fraction_maps[0].ravel())[::-1]
    n = min(AUTO_SIGNAL_ROI, fractions.size)
    captured = float(fractions[:n].sum())
    background = n * camera.cic_per_pixel

    def gap(total: float) -> float:
        return math.log(poisson_overlap_error(total * captured, background)) - math.log(AUTO_SIGNAL_TARGET)

    if gap(1.0) < 0:
        return 1.0
    value = optimize.brentq(gap, 1.0, 1000.0, xtol=1e-3)
    value = math.ceil(value * 100.0) / 100.0
    logger.info("Automatic bright signal: %.2f detected counts per 400 us (N=%d captures %.3f)",
                value, n, captured)
    return value


def _validate(values: Dict[str, Any]) -> None:
    def positive(name: str) -> None:
        if not values[name] > 0:
            raise ConfigError(name, f"must be positive, got {values[name]}")

    for name in ("experiment.trials", "experiment.threads", "experiment.block_size", "ions.spacing_um",
                 "optics.pixel_pitch_um", "optics.subsamples", "protocol.lifetime_ms", "analysis.roi_min",
                 "analysis.roi_step", "analysis.min_samples", "analysis.smoothing_alpha",
                 "analysis.postselect_width_px", "analysis.postselect_height_px", "analysis.order_frames",
                 "protocol.n_exposures"):
        positive(name)
    for name in ("experiment.calibration_trials", "ions.count", "optics.grid_width_px", "optics.grid_height_px",
                 "protocol.exposure_us", "analysis.r_stop"):
        if values[name] < 0:
            raise ConfigError(name, f"must be >= 0, got {values[name]}")
    if values["analysis.roi_max"] < values["analysis.roi_min"]:
        raise ConfigError("analysis.roi_max", "must be >= analysis.roi_min")
    for name in ("protocol.shelve_probability", "protocol.prep_error", "analysis.retained_target"):
        if not 0.0 <= values[name] <= 1.0:
            raise ConfigError(name, f"must lie in [0, 1], got {values[name]}")
    raw = values["analysis.methods"] or ""
    unknown = sorted({m.strip() for m in raw.split(",") if m.strip()} - METHODS)
    if unknown:
        raise ConfigError("analysis.methods", f"unknown methods {', '.join(unknown)}; allowed: {', '.join(sorted(METHODS))}")
    try:
        grid = [float(v) for v in values["analysis.r_stop_grid"].split(",") if v.strip()]
    except ValueError:
        raise ConfigError("analysis.r_stop_grid", "must be comma-separated numbers") from None
    if not grid or min(grid) <= 0:
        raise ConfigError("analysis.r_stop_grid", "needs at least one positive value")


def load_config(path: Optional[Union[str, "os.PathLike[str]"]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then the INI file, then typed `overrides` keyed by qualified name."""
    values: Dict[str, Any] = {k.qualname: k.default for k in CONFIG_KEYS}

    if path is not None:
        parser = ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except ConfigParserError as e:
            raise ConfigError(str(path), f"cannot parse: {e}") from e
        sections = {k.section for k in CONFIG_KEYS}
        unknown_sections = sorted(set(parser.sections()) - sections)
        if unknown_sections:
            raise ConfigError(unknown_sections[0], f"unknown section(s): {', '.join(unknown_sections)}")
        unknown = sorted(
            f"{s}.{name}" for s in parser.sections() for name in parser[s] if f"{s}.{name}" not in KEYS_BY_NAME
        )
        if unknown:
            raise ConfigError(unknown[0], f"unknown key(s): {', '.join(unknown)}")
        for s in parser.sections():
            for name, raw in parser[s].items():
                key = KEYS_BY_NAME[f"{s}.{name}"]
                values[key.qualname] = key.coerce(raw)

    for qualname, value in (overrides or {}).items():
        if value is None:
            continue
        key = KEYS_BY_NAME.get(qualname)
        if key is None:
            raise ConfigError(qualname, "unknown key")
        key.validate_value(value)
        values[qualname] = value

    missing = sorted(k.qualname for k in CONFIG_KEYS if values[k.qualname] is None and not k.optional)
    if missing:
        raise ConfigError(missing[0], f"missing required key(s): {', '.join(missing)}")
    _validate(values)

    cfg = ExperimentConfig(values)
    n_exp = cfg.protocol().n_exposures
    if n_exp * cfg.exposure_s >= cfg["protocol.lifetime_ms"] * 1e-3:
        raise ConfigError("protocol.n_exposures", "n_exposures x exposure must stay below the decay lifetime")
    return cfg


def config_from_mapping(mapping: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from typed values only (tests and programmatic use)."""
    return load_config(None, mapping)
