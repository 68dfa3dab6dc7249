from collections import deque
from enum import Enum
import logging
import multiprocessing as mp
from multiprocessing import Lock
import threading
import time
from typing import Any, Callable, Deque, Iterable, List, Optional, Sequence

from .core import ReadoutError

logger = logging.getLogger(__name__)


class CancellationException(ReadoutError):
    """Raised for a job that was canceled before it ran."""

    def __init__(self, message: str = "Job was canceled (no reason provided)"):
        super().__init__(message)


class JobState(Enum):
    Waiting = "Waiting"
    Running = "Running"
    Success = "Success"
    Error = "Error"
    Canceled = "Canceled"


TerminalJobStates = (JobState.Success, JobState.Error, JobState.Canceled)


class Job:
    def __init__(self, id: int, name: str, fn: Callable[..., Any], args: Sequence[Any]) -> None:
        self.id: int = id
        self.name: str = name
        self.fn = fn
        self.args = tuple(args)
        self.outputs: Optional[Any] = None
        self.exception: Optional[BaseException] = None
        self.state: JobState = JobState.Waiting
        self.done = mp.Event()
        self.started_at: Optional[float] = None
        self.ended_at: Optional[float] = None

    def __repr__(self) -> str:
        return f"<Job id={self.id} name={self.name} state={self.state.value}>"

    @property
    def is_done(self) -> bool:
        return self.done.is_set()

    def wait(self):
        return self.done.wait()

    def result(self):
        self.wait()
        if self.state in (JobState.Error, JobState.Canceled):
            assert self.exception
            raise self.exception
        return self.outputs


class BatchRuntime:
    """Runs independent block jobs on a fixed pool of worker threads.

    Results are collected in submission order, so any reduction over them is
    independent of the thread count. The first failing job cancels every job
    that has not started yet.
    """

    def __init__(self, threads: int = 1):
        if type(threads) is not int or threads < 1:
            raise ValueError(f"threads must be a positive int, got {threads!r}")
        self.threads = threads
        self._lock = Lock()
        self._next_job_id = 0
        self._pending: Deque[Job] = deque()
        self.cancel_event = threading.Event()

    def submit(self, name: str, fn: Callable[..., Any], *args: Any) -> Job:
        with self._lock:
            job = Job(self._next_job_id, name, fn, args)
            self._next_job_id += 1
            self._pending.append(job)
        return job

    def run(self, jobs: Sequence[Job]) -> None:
        """Execute queued jobs and block until every one of `jobs` is terminal."""
        workers = [
            threading.Thread(target=self._worker, name=f"ionreadout-worker-{i}", daemon=True)
            for i in range(min(self.threads, max(len(jobs), 1)))
        ]
        for w in workers:
            w.start()
        for job in jobs:
            job.wait()
        for w in workers:
            w.join()

    def map_ordered(self, name: str, fn: Callable[..., Any], items: Iterable[Any]) -> List[Any]:
        """`fn(item)` for every item, results in item order; re-raises the first failure in that order."""
        jobs = [self.submit(f"{name}[{i}]", fn, item) for i, item in enumerate(items)]
        self.run(jobs)
        for job in jobs:
            if job.state is JobState.Error:
                job.result()
        return [job.result() for job in jobs]

    def _next(self) -> Optional[Job]:
        with self._lock:
            return self._pending.popleft() if self._pending else None

    def _worker(self) -> None:
        while True:
            job = self._next()
            if job is None:
                return
            if self.cancel_event.is_set():
                self.post_cancel(job, CancellationException(f"job {job.id} ({job.name}) canceled after an earlier failure"))
                continue
            self.post_status_update(job, JobState.Running)
            try:
                outputs = job.fn(*job.args)
            except CancellationException as ex:
                self.post_cancel(job, ex)
            except Exception as ex:
                self.post_exception(job, ex)
            else:
                self.post_success(job, outputs)
            assert job.state in TerminalJobStates

    def post_status_update(self, job: Job, state: JobState) -> None:
        with self._lock:
            if state is JobState.Running and not job.started_at:
                job.started_at = time.time()
            job.state = state
        logger.debug("Job %d (%s) -> %s", job.id, job.name, state.value)

    def post_success(self, job: Job, outputs: Any) -> None:
        with self._lock:
            job.outputs = outputs
            job.state = JobState.Success
            if not job.ended_at:
                job.ended_at = time.time()
            job.done.set()

    def post_exception(self, job: Job, exception: Exception) -> None:
        with self._lock:
            job.exception = exception
            job.state = JobState.Error
            if not job.ended_at:
                job.ended_at = time.time()
            job.done.set()
        self.cancel_event.set()

        # Log immediately so there is trace of it even if nobody collects .result()
        logger.error(f"Job {job.id} ({job.name}) ended with exception: {exception}")

    def post_cancel(self, job: Job, exception: Optional[CancellationException] = None) -> None:
        with self._lock:
            job.exception = exception or CancellationException()
            job.state = JobState.Canceled
            if not job.ended_at:
                job.ended_at = time.time()
            job.done.set()
