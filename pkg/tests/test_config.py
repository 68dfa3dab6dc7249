import os
import tempfile
import textwrap
import unittest

from ..core import ConfigError
from ..harness.config import (
    ConfigKey,
    auto_bright_counts,
    config_from_mapping,
    load_config,
    poisson_overlap_error,
)


def _write_ini(tmp: str, text: str) -> str:
    path = os.path.join(tmp, "experiment.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(textwrap.dedent(text))
    return path


class TestConfigKey(unittest.TestCase):
    def test_rejects_unsupported_type(self):
        """Declaring a key with a non-scalar type raises ValueError."""
        with self.assertRaisesRegex(ValueError, "unsupported type"):
            ConfigKey("analysis", "sizes", list)

    def test_enum_only_for_strings(self):
        """An enum constraint on an int key is a declaration error."""
        with self.assertRaises(ValueError):
            ConfigKey("analysis", "roi_max", int, enum={"1"})

    def test_bool_is_not_int(self):
        """validate_value refuses a bool for an int key and accepts an int for a float key."""
        with self.assertRaises(ConfigError):
            ConfigKey("experiment", "trials", int).validate_value(True)
        ConfigKey("ions", "spacing_um", float).validate_value(14)

    def test_coerce_parses_ini_text(self):
        """coerce parses booleans case-insensitively and rejects garbage with the key name."""
        flag = ConfigKey("analysis", "flag", bool)
        self.assertIs(flag.coerce(" Yes "), True)
        self.assertIs(flag.coerce("off"), False)
        with self.assertRaisesRegex(ConfigError, "analysis.flag"):
            flag.coerce("maybe")
        with self.assertRaisesRegex(ConfigError, "expects int"):
            ConfigKey("experiment", "trials", int).coerce("1e6")

    def test_enum_violation_lists_allowed_values(self):
        """A value outside the enum names the allowed values."""
        key = ConfigKey("optics", "psf", str, enum={"airy", "gaussian"})
        with self.assertRaisesRegex(ConfigError, "airy, gaussian"):
            key.validate_value("lorentzian")


class TestLoadConfig(unittest.TestCase):
    def test_seed_is_required(self):
        """There is no default seed."""
        with self.assertRaises(ConfigError) as cm:
            config_from_mapping({})
        self.assertEqual(cm.exception.key, "experiment.seed")

    def test_file_then_overrides(self):
        """INI values replace defaults and overrides replace INI values."""
        with tempfile.TemporaryDirectory() as tmp:
            path = _write_ini(tmp, """
                [experiment]
                kind = single_exposure
                seed = 3
                trials = 5000

                [analysis]
                roi_max = 40
            """)
            cfg = load_config(path, {"experiment.trials": 700})
        self.assertEqual((cfg.seed, cfg.trials, cfg["analysis.roi_max"]), (3, 700, 40))
        self.assertEqual(cfg.n_ions, 1)
        self.assertAlmostEqual(cfg.exposure_s, 400e-6)
        self.assertEqual(cfg.methods, ("T", "M", "A"))
        self.assertEqual(cfg.calibration_trials, 700)
        self.assertEqual(cfg.roi_sizes, tuple(range(1, 41)))

    def test_unknown_keys_and_sections(self):
        """Unknown keys and sections in the file raise ConfigError naming them."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError) as cm:
                load_config(_write_ini(tmp, "[experiment]\nseed = 1\nbogus = 2\n"))
            self.assertEqual(cm.exception.key, "experiment.bogus")
            with self.assertRaisesRegex(ConfigError, "unknown section"):
                load_config(_write_ini(tmp, "[experiment]\nseed = 1\n[plots]\ndpi = 100\n"))
        with self.assertRaises(ConfigError):
            config_from_mapping({"experiment.seed": 1, "nope.key": 2})

    def test_kind_dependent_defaults(self):
        """Time-resolved runs default to 200 us exposures; registers to four ions and the MN methods."""
        tr = config_from_mapping({"experiment.seed": 1, "experiment.kind": "time_resolved"})
        self.assertAlmostEqual(tr.exposure_s, 200e-6)
        self.assertEqual(tr.protocol().n_exposures, 18)
        self.assertEqual(tr.methods, ("T", "ST", "STA"))
        qb = config_from_mapping({"experiment.seed": 1})
        self.assertEqual(qb.kind, "qunybble")
        self.assertEqual(qb.n_ions, 4)
        self.assertEqual(qb.protocol().n_exposures, 6)
        self.assertIn("MN3", qb.methods)

    def test_exposures_must_stay_below_lifetime(self):
        """M times the exposure reaching the decay lifetime is a configuration error."""
        with self.assertRaises(ConfigError) as cm:
            config_from_mapping({
                "experiment.seed": 1, "experiment.kind": "time_resolved",
                "protocol.n_exposures": 10, "protocol.exposure_us": 200.0, "protocol.lifetime_ms": 1.0,
            })
        self.assertEqual(cm.exception.key, "protocol.n_exposures")

    def test_range_checks(self):
        """Inverted ROI ranges, unknown methods, bad R_stop grids and probabilities are rejected."""
        cases = (
            ({"analysis.roi_min": 10, "analysis.roi_max": 5}, "analysis.roi_max"),
            ({"analysis.methods": "M,XX"}, "analysis.methods"),
            ({"analysis.r_stop_grid": "1,a"}, "analysis.r_stop_grid"),
            ({"analysis.r_stop_grid": "0,2"}, "analysis.r_stop_grid"),
            ({"protocol.shelve_probability": 1.5}, "protocol.shelve_probability"),
            ({"experiment.threads": 0}, "experiment.threads"),
        )
        for overrides, key in cases:
            with self.subTest(key=key):
                with self.assertRaises(ConfigError) as cm:
                    config_from_mapping({"experiment.seed": 1, **overrides})
                self.assertEqual(cm.exception.key, key)

    def test_as_dict_echoes_every_section(self):
        """The manifest echo groups every key by section."""
        echo = config_from_mapping({"experiment.seed": 9}).as_dict()
        self.assertEqual(echo["experiment"]["seed"], 9)
        self.assertEqual(set(echo), {"experiment", "ions", "optics", "camera", "protocol", "analysis", "output"})


class TestBrightSignal(unittest.TestCase):
    def test_no_signal_is_a_coin_flip(self):
        """Without signal the best threshold errs half the time."""
        self.assertAlmostEqual(poisson_overlap_error(0.0, 0.6), 0.5)
        self.assertLess(poisson_overlap_error(20.0, 0.6), poisson_overlap_error(10.0, 0.6))

    def test_explicit_and_automatic_signal(self):
        """A numeric setting is used as is; 'auto' solves for the discrimination target."""
        base = {"experiment.seed": 1, "experiment.kind": "single_exposure", "optics.psf": "gaussian"}
        self.assertEqual(config_from_mapping({**base, "camera.bright_counts_per_400us": "20"}).bright_counts_per_400us(), 20.0)
        for bad in ("-1", "lots"):
            with self.assertRaises(ConfigError):
                config_from_mapping({**base, "camera.bright_counts_per_400us": bad}).bright_counts_per_400us()
        cfg = config_from_mapping(base)
        auto = cfg.bright_counts_per_400us()
        self.assertEqual(auto, auto_bright_counts(cfg))
        self.assertGreater(auto, 1.0)
        self.assertLess(auto, 1000.0)

    def test_roi_max_must_fit_the_grid(self):
        """An ROI sweep larger than the pixel grid is refused when the models are built."""
        cfg = config_from_mapping({
            "experiment.seed": 1, "experiment.kind": "single_exposure", "optics.psf": "gaussian",
            "optics.grid_width_px": 6, "optics.grid_height_px": 6, "analysis.roi_max": 40,
            "camera.bright_counts_per_400us": "20",
        })
        with self.assertRaises(ConfigError) as cm:
            cfg.build_models()
        self.assertEqual(cm.exception.key, "analysis.roi_max")


if __name__ == "__main__":
    unittest.main()
