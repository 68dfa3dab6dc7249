import unittest

import numpy as np

from ..core import ModelValidityError
from ..emccd import (
    CameraModel,
    ExcessNoiseMode,
    Frame,
    em_register_output,
    expose,
    expose_batch,
    expose_sequence,
    readout_time,
    sequence_duration,
)
from ..register_sim import DecayModel


class TestCameraModel(unittest.TestCase):
    def test_effective_qe_halves_in_effective_mode(self):
        """Effective mode counts at half the quantum efficiency; analog mode at the full QE."""
        self.assertAlmostEqual(CameraModel(quantum_efficiency=0.48).effective_qe, 0.24)
        analog = CameraModel(quantum_efficiency=0.48, excess_noise_mode=ExcessNoiseMode.AnalogGain)
        self.assertAlmostEqual(analog.effective_qe, 0.48)

    def test_rejects_invalid_parameters(self):
        """Out-of-range QE, negative CIC and sub-unity analog gain raise ModelValidityError."""
        with self.assertRaisesRegex(ModelValidityError, "quantum_efficiency"):
            CameraModel(quantum_efficiency=0.0)
        with self.assertRaisesRegex(ModelValidityError, "cic_per_pixel"):
            CameraModel(cic_per_pixel=-0.1)
        with self.assertRaisesRegex(ModelValidityError, "em_gain"):
            CameraModel(excess_noise_mode=ExcessNoiseMode.AnalogGain, em_gain=0.5)

    def test_frame_read_time(self):
        """Frame read time scales with the pixel count."""
        self.assertAlmostEqual(CameraModel().frame_read_time(400), 400 * 1e-7)

    def test_readout_time_scales_with_exposures_used(self):
        """Each exposure costs its duration, the dead time and a full-frame read; fractional means are allowed."""
        camera = CameraModel(readout_dead_time_s=6e-6, frame_read_time_per_pixel_s=1e-7)
        one = 200e-6 + 6e-6 + 500 * 1e-7
        self.assertAlmostEqual(readout_time(camera, 200e-6, 500), one, places=15)
        self.assertAlmostEqual(readout_time(camera, 200e-6, 500, 2.5), 2.5 * one, places=15)
        self.assertEqual(readout_time(camera, 200e-6, 500, 0), 0.0)
        with self.assertRaises(ValueError):
            readout_time(camera, 200e-6, 500, -1)


class TestNoiseStatistics(unittest.TestCase):
    def test_effective_mode_is_poissonian(self):
        """Effective-QE counts have a dispersion index of 1.00 +- 0.02."""
        camera = CameraModel(cic_per_pixel=0.02)
        counts = expose_batch(camera, np.full(200000, 10.0), np.random.default_rng(1))
        index = counts.var() / counts.mean()
        self.assertAlmostEqual(float(index), 1.0, delta=0.02)
        self.assertAlmostEqual(float(counts.mean()), 10.0 * 0.24 + 0.02, delta=0.02)

    def test_analog_excess_noise_factor(self):
        """The multiplication register inflates the variance by F^2 = 2.00 +- 0.05."""
        rng = np.random.default_rng(2)
        gain, lam = 300.0, 5.0
        electrons = rng.poisson(lam, size=200000)
        out = em_register_output(electrons, gain, rng)
        f2 = out.var() / (gain * gain * lam)
        self.assertAlmostEqual(float(f2), 2.0, delta=0.05)

    def test_register_output_zero_for_no_electrons(self):
        """No electrons in, exactly zero out."""
        out = em_register_output(np.zeros(10, dtype=np.int64), 300.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, np.zeros(10))

    def test_decay_probability_over_one_exposure(self):
        """A dark ion decays within 400 us with probability 1 - exp(-t/tau), about 3.42e-4."""
        p = DecayModel(1.168).decay_probability(400e-6)
        self.assertAlmostEqual(p, -np.expm1(-400e-6 / 1.168), places=15)
        self.assertAlmostEqual(p, 3.42e-4, delta=0.01e-4)

    def test_decay_model_rejects_non_positive_lifetime(self):
        """The decay lifetime must be positive."""
        with self.assertRaises(ModelValidityError):
            DecayModel(0.0)


class TestExpose(unittest.TestCase):
    def test_expose_and_batch_share_the_stream(self):
        """expose is the single-frame case of expose_batch and draws identical counts."""
        camera = CameraModel()
        rates = np.full((4, 5), 20000.0)
        frame = expose(camera, rates, 400e-6, np.random.default_rng(3))
        batch = expose_batch(camera, rates * 400e-6, np.random.default_rng(3))
        np.testing.assert_array_equal(frame.counts, batch)
        self.assertEqual(frame.exposure_time, 400e-6)

    def test_counts_are_non_negative_integers_with_read_noise(self):
        """Gaussian read noise is rounded and clipped at zero in both modes."""
        rates = np.zeros((50, 50))
        for mode in ExcessNoiseMode:
            camera = CameraModel(excess_noise_mode=mode, read_noise_sigma=0.5)
            counts = expose(camera, rates, 400e-6, np.random.default_rng(4)).counts
            self.assertGreaterEqual(int(counts.min()), 0)
            self.assertEqual(counts.dtype, np.int32)

    def test_rejects_bad_inputs(self):
        """Negative times and non-2-D rate maps raise ValueError."""
        camera = CameraModel()
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            expose(camera, np.zeros((3, 3)), -1.0, rng)
        with self.assertRaises(ValueError):
            expose(camera, np.zeros(9), 1e-4, rng)
        with self.assertRaises(ValueError):
            expose_batch(camera, -np.ones(3), rng)

    def test_sequence_clock_includes_dead_time(self):
        """Each exposure starts after the previous exposure and its readout dead time."""
        camera = CameraModel(readout_dead_time_s=6e-6)
        schedule = [(np.zeros((2, 2)), 200e-6)] * 3
        frames = expose_sequence(camera, schedule, np.random.default_rng(0))
        self.assertEqual([f.timestamp_index for f in frames], [0, 1, 2])
        np.testing.assert_allclose([f.start_time for f in frames], [0.0, 206e-6, 412e-6])
        self.assertAlmostEqual(sequence_duration(camera, [200e-6] * 3), 618e-6)
        with self.assertRaises(ValueError):
            expose_sequence(camera, [], np.random.default_rng(0))

    def test_frame_validation(self):
        """Frames must be 2-D and non-negative."""
        with self.assertRaises(ValueError):
            Frame(counts=np.zeros(4, dtype=np.int32), exposure_time=1e-4)
        with self.assertRaises(ValueError):
            Frame(counts=-np.ones((2, 2), dtype=np.int32), exposure_time=1e-4)


if __name__ == "__main__":
    unittest.main()
