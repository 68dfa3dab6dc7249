import math
import os
import tempfile
import unittest

import numpy as np

from ..calibration import (
    HistogramAccumulator,
    PixelOrder,
    accumulate_per_exposure,
    brightness_order,
    cumulative_signal,
    fit_distributions,
    fit_per_exposure,
    neighbour_codes,
    neighbour_sets,
    read_archive,
    write_archive,
)
from ..core import CalibrationError, IonState

CHAIN_UM = ((0.0, 0.0), (14.0, 0.0), (28.0, 0.0), (42.0, 0.0))


def _blob_image(shape, centres, sigma: float = 1.2, peak: float = 10.0) -> np.ndarray:
    rows, cols = np.indices(shape)
    img = np.full(shape, 0.02)
    for r, c in centres:
        img += peak * np.exp(-((rows + 0.5 - r) ** 2 + (cols + 0.5 - c) ** 2) / (2 * sigma ** 2))
    return img


def _labelled_frames(n: int, seed: int = 0):
    """Two ions on a 1x6 strip: pixels 0-2 belong to ion 0, 3-5 to ion 1."""
    rng = np.random.default_rng(seed)
    bright = rng.random((n, 2)) < 0.5
    rates = np.array([[3.0, 1.0, 0.3, 0.05, 0.0, 0.0], [0.0, 0.0, 0.05, 0.3, 1.0, 3.0]])
    mean = 0.02 + bright.astype(float) @ rates
    counts = rng.poisson(mean).reshape(n, 1, 6)
    order = PixelOrder((np.array([0, 1, 2, 3, 4, 5]), np.array([5, 4, 3, 2, 1, 0])), (1, 6))
    return counts, bright, order


class TestBrightnessOrder(unittest.TestCase):
    def test_stack_orders_by_decreasing_mean(self):
        """With a single-ion stack each ion's pixels are ranked by its own image."""
        img = np.array([[[1.0, 5.0], [3.0, 0.0]]])
        order = brightness_order(img)
        np.testing.assert_array_equal(order.orders[0], [1, 2, 0, 3])

    def test_combined_image_starts_at_each_centre(self):
        """From an all-bright image, each ion's brightest pixel is the one under its centre."""
        centres = np.array([[5.5, 5.5], [5.5, 12.5]])
        img = _blob_image((11, 18), centres)
        order = brightness_order(img, centres)
        self.assertEqual(int(order.orders[0][0]), 5 * 18 + 5)
        self.assertEqual(int(order.orders[1][0]), 5 * 18 + 12)
        self.assertEqual(order.shape, (11, 18))

    def test_roi_may_extend_past_a_neighbour(self):
        """Every pixel gets a rank, so large ROIs cover the neighbouring ion too."""
        centres = np.array([[5.5, 5.5], [5.5, 12.5]])
        order = brightness_order(_blob_image((11, 18), centres), centres)
        self.assertIn(5 * 18 + 12, order.roi(0, 11 * 18).tolist())

    def test_flat_image_has_no_signal(self):
        """A featureless image raises CalibrationError naming the ion."""
        with self.assertRaisesRegex(CalibrationError, "ion 0"):
            brightness_order(np.ones((4, 4)), np.array([[2.0, 2.0]]))

    def test_needs_centres_for_combined_image(self):
        """A 2-D image without ion centres is rejected."""
        with self.assertRaises(ValueError):
            brightness_order(np.ones((4, 4)))

    def test_pixel_order_must_be_a_permutation(self):
        """PixelOrder rejects index lists that are not permutations of the grid."""
        with self.assertRaises(ValueError):
            PixelOrder((np.array([0, 0, 1, 2]),), (2, 2))


class TestNeighbours(unittest.TestCase):
    def test_arity_two_on_a_chain(self):
        """Inner ions condition on both neighbours; end ions on the two closest ions."""
        self.assertEqual(neighbour_sets(CHAIN_UM, 2), ((1, 2), (0, 2), (1, 3), (1, 2)))

    def test_arity_three_is_every_other_ion(self):
        """Arity three on four ions lists all other ions."""
        self.assertEqual(neighbour_sets(CHAIN_UM, 3), ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)))
        with self.assertRaises(ValueError):
            neighbour_sets(CHAIN_UM, 4)

    def test_codes_put_first_neighbour_high(self):
        """The first listed neighbour's dark bit is the most significant bit of the code."""
        bright = np.array([[True, False, True, True], [True, True, True, False], [True, False, True, False]])
        np.testing.assert_array_equal(neighbour_codes(bright, (1, 3)), [2, 1, 3])


class TestFitting(unittest.TestCase):
    def test_smoothed_pmf_of_constant_counts(self):
        """Add-alpha smoothing spreads mass over the observed range plus the margin."""
        order = PixelOrder((np.array([0]),), (1, 1))
        counts = np.full((200, 1, 1), 2)
        bright = np.repeat([[True], [False]], 100, axis=0)
        dists = fit_distributions(counts, bright, order, roi_size=1, alpha=0.5, min_samples=100)
        pmf = dists.distribution(0, IonState.Bright).pmf[0]
        self.assertEqual(pmf.size, 8)
        self.assertAlmostEqual(float(pmf[2]), 100.5 / 104.0, places=12)
        self.assertAlmostEqual(float(pmf.sum()), 1.0, places=12)
        self.assertEqual(dists.distribution(0, IonState.Dark).prob(0, 50), dists.floor)

    def test_starved_cell_names_the_cell(self):
        """Too few frames in a cell raise CalibrationError with the cell and counts."""
        counts, bright, order = _labelled_frames(150)
        with self.assertRaises(CalibrationError) as cm:
            fit_distributions(counts, bright, order, roi_size=3, min_samples=100)
        self.assertEqual(cm.exception.minimum, 100)
        self.assertLess(cm.exception.samples, 100)
        self.assertIn("ion", cm.exception.cell)

    def test_merge_matches_single_pass(self):
        """Accumulating two halves and merging equals accumulating everything at once."""
        counts, bright, order = _labelled_frames(1000)
        whole = HistogramAccumulator(2, 4)
        whole.add_frames(counts, bright, order)
        first, second = HistogramAccumulator(2, 4), HistogramAccumulator(2, 4)
        first.add_frames(counts[:300], bright[:300], order)
        second.add_frames(counts[300:], bright[300:], order)
        merged = first.merge(second)
        np.testing.assert_array_equal(merged.hist, whole.hist)

    def test_neighbour_aware_cells(self):
        """Neighbour-aware fitting keeps one table per neighbour condition."""
        counts, bright, order = _labelled_frames(4000)
        dists = fit_distributions(counts, bright, order, roi_size=4, neighbour_aware=True,
                                  neighbours=((1,), (0,)), min_samples=100)
        self.assertEqual(dists.arity, 1)
        self.assertEqual(dists.n_nu, 2)
        self.assertEqual(dists.distribution(0, IonState.Dark, 1).neighbour_condition, "1")
        with self.assertRaises(ValueError):
            fit_distributions(counts, bright, order, roi_size=4, neighbour_aware=True)

    def test_rank_log_probs_shape(self):
        """Per-rank log-probabilities come back as (frames, state, nu, rank)."""
        counts, bright, order = _labelled_frames(2000)
        dists = fit_distributions(counts, bright, order, roi_size=4)
        lp = dists.rank_log_probs(0, order.gather(counts, 0, 3))
        self.assertEqual(lp.shape, (2000, 2, 1, 3))
        self.assertTrue(np.all(lp <= 0.0))
        with self.assertRaises(ValueError):
            dists.rank_log_probs(0, order.gather(counts, 0, 5))

    def test_per_exposure_sets_use_only_usable_frames(self):
        """Each exposure index is fitted from its own frames with changed-state exposures masked out."""
        c0, b0, order = _labelled_frames(1500, seed=1)
        c1, b1, _ = _labelled_frames(1500, seed=2)
        counts, bright = np.stack([c0, c1], axis=1), np.stack([b0, b1], axis=1)
        usable = np.ones((1500, 2), dtype=bool)
        usable[:200, 1] = False
        sets = fit_per_exposure(counts, bright, usable, order, roi_size=3, min_samples=100)
        self.assertEqual(len(sets), 2)
        ref = fit_distributions(c1[200:], b1[200:], order, roi_size=3, min_samples=100)
        np.testing.assert_array_equal(sets[1].log_table, ref.log_table)
        np.testing.assert_array_equal(sets[0].log_table, fit_distributions(c0, b0, order, 3, min_samples=100).log_table)

    def test_per_exposure_accumulators_merge_across_blocks(self):
        """Per-exposure histograms of two trial blocks merge to those of the whole set."""
        c0, b0, order = _labelled_frames(800, seed=3)
        c1, b1, _ = _labelled_frames(800, seed=4)
        counts, bright = np.stack([c0, c1], axis=1), np.stack([b0, b1], axis=1)
        usable = np.random.default_rng(5).random((800, 2)) > 0.1
        whole = accumulate_per_exposure(counts, bright, usable, order, 3)
        head = accumulate_per_exposure(counts[:300], bright[:300], usable[:300], order, 3)
        tail = accumulate_per_exposure(counts[300:], bright[300:], usable[300:], order, 3)
        self.assertEqual(len(whole), 2)
        for j in range(2):
            np.testing.assert_array_equal(head[j].merge(tail[j]).hist, whole[j].hist)
        with self.assertRaises(ValueError):
            accumulate_per_exposure(counts, bright, usable[:, :1], order, 3)

    def test_archive_round_trip(self):
        """A written archive reads back to the same tables, orders and neighbours."""
        counts, bright, order = _labelled_frames(4000)
        dists = fit_distributions(counts, bright, order, roi_size=4, neighbour_aware=True,
                                  neighbours=((1,), (0,)), min_samples=100)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "calibration_nu1.csv")
            write_archive(path, dists)
            back = read_archive(path)
        self.assertEqual(back.order, dists.order)
        self.assertEqual(back.neighbours, dists.neighbours)
        self.assertEqual((back.roi_size, back.arity, back.alpha), (4, 1, dists.alpha))
        np.testing.assert_array_equal(back.supports, dists.supports)
        width = back.log_table.shape[-1]
        np.testing.assert_allclose(back.log_table, dists.log_table[..., :width], rtol=0, atol=1e-12)
        self.assertTrue(np.all(dists.log_table[..., width:] == math.log(dists.floor)))


class TestCumulativeSignal(unittest.TestCase):
    def test_fractions_rise_to_the_captured_share(self):
        """Cumulative fractions are non-decreasing and end at the share captured by the ranked pixels."""
        centres = np.array([[5.5, 5.5], [5.5, 12.5]])
        images = np.stack([_blob_image((11, 18), centres[:1]), _blob_image((11, 18), centres[1:])])
        order = brightness_order(images)
        frac = cumulative_signal(images, order, 0, 11 * 18)
        self.assertEqual(frac.shape, (2, 11 * 18))
        self.assertTrue(np.all(np.diff(frac, axis=-1) >= 0))
        np.testing.assert_allclose(frac[:, -1], 1.0)
        self.assertGreater(frac[0, 10], frac[1, 10])


if __name__ == "__main__":
    unittest.main()
