import os
import struct
import tempfile
import unittest

import numpy as np

from ..core import FrameFormatError, RegisterState
from ..emccd import Frame
from ..irf import TrialLabel, decode_irf, encode_irf, read_irf, read_labels, write_irf, write_labels


class TestIrfCodec(unittest.TestCase):
    def test_layout_is_little_endian(self):
        """Header, exposure times and counts follow the IRF1 layout byte for byte."""
        counts = np.arange(6, dtype=np.int32).reshape(1, 2, 3)
        data = encode_irf(counts, [400e-6])
        self.assertEqual(data[:4], b"IRF1")
        self.assertEqual(struct.unpack_from("<III", data, 4), (3, 2, 1))
        self.assertEqual(struct.unpack_from("<I", data, 16), (400000,))
        self.assertEqual(struct.unpack_from("<6H", data, 20), (0, 1, 2, 3, 4, 5))
        self.assertEqual(len(data), 16 + 4 + 12)

    def test_decode_inverts_encode(self):
        """Decoding returns the counts and exposure times that were encoded."""
        rng = np.random.default_rng(0)
        counts = rng.integers(0, 65536, size=(3, 4, 5))
        decoded, times = decode_irf(encode_irf(counts, [1e-4, 2e-4, 4e-4]))
        np.testing.assert_array_equal(decoded, counts)
        np.testing.assert_allclose(times, [1e-4, 2e-4, 4e-4])

    def test_rejects_counts_beyond_u16(self):
        """Counts above 65535 raise FrameFormatError."""
        with self.assertRaisesRegex(FrameFormatError, "65535"):
            encode_irf(np.full((1, 2, 2), 70000), [1e-4])

    def test_rejects_bad_magic_and_truncation(self):
        """Wrong magic and size mismatches raise FrameFormatError."""
        data = encode_irf(np.zeros((1, 2, 2), dtype=np.int32), [1e-4])
        with self.assertRaisesRegex(FrameFormatError, "magic"):
            decode_irf(b"XXXX" + data[4:])
        with self.assertRaisesRegex(FrameFormatError, "size mismatch"):
            decode_irf(data[:-1])
        with self.assertRaisesRegex(FrameFormatError, "truncated"):
            decode_irf(data[:8])

    def test_file_round_trip_keeps_frame_metadata(self):
        """write_irf/read_irf keep counts, exposure times and frame order."""
        frames = [Frame(np.full((2, 3), j, dtype=np.int32), 200e-6, timestamp_index=j) for j in range(3)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "frames.irf")
            write_irf(path, frames)
            back = read_irf(path)
        self.assertEqual(len(back), 3)
        for j, frame in enumerate(back):
            np.testing.assert_array_equal(frame.counts, frames[j].counts)
            self.assertAlmostEqual(frame.exposure_time, 200e-6)
            self.assertEqual(frame.timestamp_index, j)

    def test_refuses_empty_file(self):
        """An empty frame list is not written."""
        with self.assertRaises(FrameFormatError):
            write_irf("unused.irf", [])


class TestLabels(unittest.TestCase):
    def test_label_line_format(self):
        """A label line holds the state bits followed by ion:time_ns decay events."""
        label = TrialLabel(RegisterState.from_label("0110"), ((1, 123456e-9),))
        self.assertEqual(label.to_line(), "0110 1:123456")
        back = TrialLabel.from_line("0110 1:123456")
        self.assertEqual(back.prepared_state.label, "0110")
        self.assertEqual(back.decay_events[0][0], 1)
        self.assertAlmostEqual(back.decay_events[0][1], 123456e-9)

    def test_rejects_malformed_lines(self):
        """Bad bits, malformed events and out-of-range ions raise FrameFormatError."""
        for line in ("0120", "01 x", "01 5:100"):
            with self.subTest(line=line):
                with self.assertRaises(FrameFormatError):
                    TrialLabel.from_line(line, 3)

    def test_sidecar_keeps_protocol_and_order(self):
        """read_labels returns the protocol name and the labels in file order."""
        labels = [
            TrialLabel(RegisterState.from_label("0")),
            TrialLabel(RegisterState.from_label("1"), ((0, 2e-4),)),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "labels.txt")
            write_labels(path, "single_exposure", labels)
            protocol, back = read_labels(path)
        self.assertEqual(protocol, "single_exposure")
        self.assertEqual([lab.to_line() for lab in back], ["0", "1 0:200000"])


if __name__ == "__main__":
    unittest.main()
