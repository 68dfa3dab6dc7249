import unittest

import numpy as np

from ..harness.streams import block_starts, stream_for


class TestStreams(unittest.TestCase):
    def test_same_key_same_numbers(self):
        """A stream is a pure function of (seed, index, tag)."""
        a = stream_for(7, 1024, "test").random(16)
        b = stream_for(7, 1024, "test").random(16)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        """Changing the seed, index or tag changes the draws."""
        base = stream_for(7, 0, "test").random(16)
        for other in (stream_for(8, 0, "test"), stream_for(7, 1, "test"), stream_for(7, 0, "calibration")):
            self.assertFalse(np.array_equal(base, other.random(16)))

    def test_neighbouring_streams_uncorrelated(self):
        """Adjacent block streams have |corr| below 4/sqrt(n)."""
        n = 100000
        a = stream_for(1, 0, "test").standard_normal(n)
        b = stream_for(1, 1, "test").standard_normal(n)
        self.assertLess(abs(float(np.corrcoef(a, b)[0, 1])), 4.0 / np.sqrt(n))

    def test_rejects_negative_keys(self):
        """Negative seeds and indices are rejected."""
        with self.assertRaises(ValueError):
            stream_for(-1, 0, "test")
        with self.assertRaises(ValueError):
            stream_for(0, -1, "test")

    def test_block_starts(self):
        """Blocks tile the trial range; the last block may be short."""
        self.assertEqual(block_starts(10, 4), [0, 4, 8])
        self.assertEqual(block_starts(0, 4), [])
        with self.assertRaises(ValueError):
            block_starts(10, 0)


if __name__ == "__main__":
    unittest.main()
