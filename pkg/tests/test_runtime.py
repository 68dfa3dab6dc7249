import threading
import time
import unittest

from .. import runtime
from ..runtime import BatchRuntime, CancellationException, JobState


def _square_after(delay: float):
    def _fn(i: int) -> int:
        time.sleep(delay * (i % 3))
        return i * i
    return _fn


class TestBatchRuntime(unittest.TestCase):
    def test_map_ordered_keeps_submission_order(self):
        """Results come back in item order whatever order the workers finish in."""
        rt = BatchRuntime(threads=4)
        self.assertEqual(rt.map_ordered("sq", _square_after(0.01), range(10)), [i * i for i in range(10)])

    def test_work_is_spread_over_workers(self):
        """With several threads, more than one worker thread runs jobs."""
        seen = set()
        lock = threading.Lock()

        def _record(_: int) -> None:
            with lock:
                seen.add(threading.current_thread().name)
            time.sleep(0.02)

        BatchRuntime(threads=3).map_ordered("rec", _record, range(9))
        self.assertGreater(len(seen), 1)
        self.assertTrue(all(name.startswith("ionreadout-worker-") for name in seen))

    def test_failure_cancels_later_jobs(self):
        """After a failure, jobs that have not started are canceled and raise CancellationException."""
        rt = BatchRuntime(threads=1)

        def _boom() -> None:
            raise RuntimeError("block failed")

        jobs = [rt.submit("ok", lambda: 1), rt.submit("boom", _boom), rt.submit("later", lambda: 3)]
        with self.assertLogs(runtime.logger, level="ERROR") as logs:
            rt.run(jobs)
        self.assertEqual([j.state for j in jobs], [JobState.Success, JobState.Error, JobState.Canceled])
        self.assertEqual(jobs[0].result(), 1)
        with self.assertRaisesRegex(RuntimeError, "block failed"):
            jobs[1].result()
        with self.assertRaises(CancellationException):
            jobs[2].result()
        self.assertTrue(any("boom" in line for line in logs.output))

    def test_map_ordered_reraises_first_failure(self):
        """map_ordered raises the earliest failing item's exception."""
        def _fail_odd(i: int) -> int:
            if i % 2:
                raise ValueError(f"item {i}")
            return i

        with self.assertLogs(runtime.logger, level="ERROR"):
            with self.assertRaisesRegex(ValueError, "item 1"):
                BatchRuntime(threads=1).map_ordered("odd", _fail_odd, range(4))

    def test_job_raising_cancellation_is_canceled(self):
        """A job that raises CancellationException ends Canceled rather than Error."""
        rt = BatchRuntime(threads=1)

        def _cancel() -> None:
            raise CancellationException("stop")

        job = rt.submit("cancel", _cancel)
        rt.run([job])
        self.assertIs(job.state, JobState.Canceled)
        self.assertTrue(job.is_done)

    def test_rejects_invalid_thread_counts(self):
        """threads must be an int of at least one; bools and floats are refused."""
        for bad in (0, -2, 1.5, True, "2"):
            with self.subTest(threads=bad):
                with self.assertRaises(ValueError):
                    BatchRuntime(threads=bad)


if __name__ == "__main__":
    unittest.main()
