import math
import unittest

import numpy as np
from scipy import integrate

from ..calibration import brightness_order, cumulative_signal
from ..core import OpticsError
from ..optics import (
    AiryPSF,
    GaussianPSF,
    ImagingModel,
    TabulatedPSF,
    aberrated_psf,
    airy_first_null_radius_um,
    airy_radial_intensity,
    crosstalk_fraction,
    disc_fraction,
    encircled_energy,
    linear_chain,
    pixel_rate_map,
    roi_diameter_for_pixels,
)


def _single_ion_model(psf=None, width: int = 40, height: int = 40, rate: float = 1000.0) -> ImagingModel:
    pitch = 2.6
    return ImagingModel(
        ion_positions_um=linear_chain(1, 14.0, width, height, pitch),
        psf=psf or GaussianPSF(1.5),
        width_px=width,
        height_px=height,
        per_ion_bright_rate=rate,
        pixel_pitch_um=pitch,
    )


class TestAiry(unittest.TestCase):
    def test_first_null_diameter_at_397nm(self):
        """First-null diameter at 397 nm and sin(alpha) = 0.25 is about 1.9 um."""
        diameter = 2.0 * airy_first_null_radius_um(397e-9, 0.25)
        self.assertAlmostEqual(diameter, 1.9, delta=0.05)

    def test_peak_normalised_and_zero_at_first_null(self):
        """airy_radial_intensity is 1 at the centre and vanishes at the first null."""
        null = airy_first_null_radius_um(397e-9, 0.25)
        self.assertEqual(airy_radial_intensity(0.0), 1.0)
        self.assertLess(airy_radial_intensity(null), 1e-12)

    def test_rejects_negative_radius(self):
        """Negative radii raise ValueError."""
        with self.assertRaises(ValueError):
            airy_radial_intensity(-1.0)

    def test_encircled_energy_at_first_null_matches_quadrature(self):
        """Closed-form encircled energy at the first null is 0.838 and agrees with radial quadrature."""
        psf = AiryPSF()
        null = psf.first_null_radius_um
        closed = encircled_energy(psf, null)
        quad, _ = integrate.quad(lambda r: 2.0 * math.pi * r * float(psf.density(np.asarray(r))), 0.0, null,
                                 epsabs=1e-12, epsrel=1e-12)
        self.assertAlmostEqual(closed, 0.838, delta=0.005)
        self.assertAlmostEqual(closed, quad, delta=1e-8)


class TestPSFs(unittest.TestCase):
    def test_gaussian_encircled_energy_at_sigma(self):
        """A Gaussian holds 1 - exp(-1/2) of its energy inside one sigma."""
        self.assertAlmostEqual(encircled_energy(GaussianPSF(1.5), 1.5), 1.0 - math.exp(-0.5), places=12)

    def test_tabulated_normalised_and_monotone(self):
        """Tabulated encircled energy is non-decreasing and reaches exactly 1 at the last radius."""
        psf = TabulatedPSF([0.0, 1.0, 2.0, 4.0], [3.0, 2.0, 1.0, 0.0])
        radii = np.linspace(0.0, 5.0, 101)
        ee = psf.encircled_energy(radii)
        self.assertTrue(np.all(np.diff(ee) >= -1e-15))
        self.assertAlmostEqual(float(psf.encircled_energy(np.asarray(4.0))), 1.0, places=12)
        self.assertEqual(float(psf.density(np.asarray(4.5))), 0.0)

    def test_tabulated_rejects_bad_radii(self):
        """Radii must start at 0 and increase strictly."""
        with self.assertRaisesRegex(ValueError, "start at 0"):
            TabulatedPSF([0.5, 1.0], [1.0, 0.0])
        with self.assertRaisesRegex(ValueError, "start at 0"):
            TabulatedPSF([0.0, 1.0, 1.0], [1.0, 0.5, 0.0])

    def test_aberrated_psf_neighbour_crosstalk(self):
        """Default aberrated PSF puts about 4% of a 14 um neighbour's signal in the ROI, about 0.9% at 28 um."""
        psf = aberrated_psf()
        nearest = disc_fraction(psf, 14.0, 7.0)
        next_nearest = disc_fraction(psf, 28.0, 7.0)
        self.assertGreater(nearest, 0.035)
        self.assertLess(nearest, 0.045)
        self.assertGreater(next_nearest, 0.007)
        self.assertLess(next_nearest, 0.011)

    def test_aberrated_psf_rank_curve(self):
        """On a 50x10 grid the target ion dominates its own ROI; neighbours stay small until ROIs reach them."""
        pitch, width, height = 2.6, 50, 10
        model = ImagingModel(
            ion_positions_um=linear_chain(4, 14.0, width, height, pitch),
            psf=aberrated_psf(),
            width_px=width,
            height_px=height,
            per_ion_bright_rate=1.0,
            pixel_pitch_um=pitch,
        )
        maps = model.fraction_maps
        curve = cumulative_signal(maps, brightness_order(maps), 1, width * height)
        self.assertTrue(np.all(np.diff(curve, axis=-1) >= -1e-15))
        np.testing.assert_allclose(curve[:, -1], 1.0, atol=1e-12)
        self.assertGreater(curve[1, 9], 0.3)
        self.assertLess(curve[1, 9], 0.5)
        self.assertGreater(curve[1, 99], 0.85)
        # an ROI one spacing across
        self.assertLess(curve[0, 24], 0.10)
        self.assertLess(curve[2, 24], 0.10)
        self.assertLess(curve[3, 99], 0.10)
        self.assertGreater(curve[1, 99], 10.0 * curve[3, 99])

    def test_support_radius_encloses_target_energy(self):
        """support_radius_um encloses 0.9999 of the energy."""
        psf = GaussianPSF(2.0)
        self.assertAlmostEqual(encircled_energy(psf, psf.support_radius_um), 0.9999, places=8)


class TestDiscFraction(unittest.TestCase):
    def _brute_force(self, psf, offset: float, radius: float) -> float:
        """2-D quadrature over the disc in polar coordinates about its centre."""
        def integrand(phi: float, rho: float) -> float:
            r = math.sqrt(rho * rho + offset * offset + 2.0 * rho * offset * math.cos(phi))
            return float(psf.density(np.asarray(r))) * rho

        value, _ = integrate.dblquad(integrand, 0.0, radius, 0.0, 2.0 * math.pi, epsabs=1e-9, epsrel=1e-9)
        return value

    def test_matches_brute_force_quadrature(self):
        """disc_fraction agrees with 2-D quadrature to 1e-4 over a grid of offsets and diameters."""
        psf = GaussianPSF(1.5)
        for offset in (0.0, 1.0, 3.0, 5.0, 8.0):
            for diameter in (1.0, 4.0, 8.0, 14.0):
                with self.subTest(offset=offset, diameter=diameter):
                    got = disc_fraction(psf, offset, diameter / 2.0)
                    self.assertAlmostEqual(got, self._brute_force(psf, offset, diameter / 2.0), delta=1e-4)

    def test_zero_radius(self):
        """An empty disc holds nothing."""
        self.assertEqual(disc_fraction(GaussianPSF(1.0), 2.0, 0.0), 0.0)

    def test_crosstalk_fraction_uses_source_position(self):
        """crosstalk_fraction of an ion onto its own centre equals its encircled energy."""
        model = _single_ion_model()
        centre = model.ion_positions_um[0]
        self.assertAlmostEqual(crosstalk_fraction(model, centre, 6.0, 0), encircled_energy(model.psf, 3.0), places=12)
        with self.assertRaises(ValueError):
            crosstalk_fraction(model, centre, 0.0, 0)


class TestImagingModel(unittest.TestCase):
    def test_fraction_maps_conserve_energy(self):
        """Pixel fractions plus the spill outside the grid sum to one."""
        model = _single_ion_model()
        total = model.fraction_maps.sum() + model.spill_fractions.sum()
        self.assertAlmostEqual(float(total), 1.0, places=12)
        self.assertLess(float(model.spill_fractions[0]), 1e-3)
        self.assertTrue(np.all(model.fraction_maps >= 0))

    def test_single_ion_centred_on_pixel(self):
        """A single ion sits on a pixel centre, which receives the most signal."""
        model = _single_ion_model(width=21, height=21)
        row, col = np.unravel_index(np.argmax(model.fraction_maps[0]), model.shape)
        self.assertEqual((row, col), (10, 10))
        np.testing.assert_allclose(model.ion_pixel_coordinates(), [[10.5, 10.5]])

    def test_pixel_rate_map_superposition(self):
        """Rate maps add over bright ions; dark ions contribute nothing."""
        pitch, width, height = 2.6, 40, 20
        model = ImagingModel(
            ion_positions_um=linear_chain(2, 14.0, width, height, pitch),
            psf=GaussianPSF(1.5),
            width_px=width,
            height_px=height,
            per_ion_bright_rate=500.0,
        )
        both = pixel_rate_map(model, [0, 1])
        np.testing.assert_allclose(both, model.ion_rate_maps[0] + model.ion_rate_maps[1])
        np.testing.assert_array_equal(pixel_rate_map(model, []), np.zeros(model.shape))
        with self.assertRaises(ValueError):
            pixel_rate_map(model, [2])

    def test_ion_outside_field_of_view(self):
        """An ion further outside the grid than the PSF support raises OpticsError."""
        model = ImagingModel(((500.0, 500.0),), GaussianPSF(1.5), 10, 10, 100.0)
        with self.assertRaises(OpticsError):
            _ = model.fraction_maps

    def test_rejects_duplicate_positions(self):
        """Two ions at one position are rejected."""
        with self.assertRaisesRegex(ValueError, "distinct"):
            ImagingModel(((1.0, 1.0), (1.0, 1.0)), GaussianPSF(1.0), 5, 5, 1.0)

    def test_roi_diameter_for_pixels(self):
        """A circular ROI of N pixels has diameter pitch * sqrt(4N/pi)."""
        self.assertAlmostEqual(roi_diameter_for_pixels(25, 2.6), 2.6 * math.sqrt(100.0 / math.pi), places=12)


if __name__ == "__main__":
    unittest.main()
