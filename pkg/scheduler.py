"""
Worker-thread scheduler for per-slide jobs.
"""

import threading
import queue
import time
import logging
from typing import Any, Callable, Dict, List, Optional
from dataclasses import dataclass, field
from datetime import datetime

from run_history import RunHistory

logger = logging.getLogger(__name__)


@dataclass
class SlideJob:
    """One unit of work, identified by a sortable key (usually the slide id)."""
    key: str
    func: Callable[[], Any]
    kind: str = "slide"
    submitted_at: datetime = field(default_factory=datetime.now)


class SlideScheduler:
    """
    Runs jobs on a fixed pool of worker threads draining a FIFO queue.

    Results come back as result messages keyed by job key and sorted by
    key, so callers see the same order whatever the thread interleaving.
    """

    def __init__(self, threads: int = 1, history: Optional[RunHistory] = None):
        """
        Initialize the scheduler.

        Args:
            threads: Number of worker threads
            history: Optional run history that receives one record per job
        """
        self.threads = max(1, int(threads))
        self.history = history
        self.job_queue: "queue.Queue[Optional[SlideJob]]" = queue.Queue()
        self.lock = threading.Lock()
        self.results: Dict[str, Dict[str, Any]] = {}
        self.keys = set()
        self.job_count = 0
        self.completed_jobs = 0
        self.failed_jobs = 0

    def submit(self, key: str, func: Callable[[], Any], kind: str = "slide"):
        with self.lock:
            if key in self.keys:
                raise ValueError(f"duplicate job key {key}")
            self.keys.add(key)
            self.job_count += 1
        self.job_queue.put(SlideJob(key=key, func=func, kind=kind))
        logger.debug(f"Job {key} submitted (queue size: {self.job_queue.qsize()})")

    def run(self) -> List[Dict[str, Any]]:
        """
        Execute every submitted job and wait for completion.

        Returns:
            Result messages ``{"key", "result", "error"}`` sorted by key
        """
        pending = self.job_queue.qsize()
        workers = [threading.Thread(target=self._worker_loop, name=f"slide-worker-{i}", daemon=True)
                   for i in range(min(self.threads, max(1, pending)))]
        for _ in workers:
            self.job_queue.put(None)
        logger.info(f"Running {pending} jobs on {len(workers)} worker threads")
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()
        with self.lock:
            return [self.results[key] for key in sorted(self.results)]

    def _worker_loop(self):
        while True:
            job = self.job_queue.get()
            if job is None:
                self.job_queue.task_done()
                return
            start_time = time.time()
            try:
                result = job.func()
                message = {"key": job.key, "result": result, "error": None}
                status = "SUCCESS"
                logger.debug(f"Job {job.key} completed in {time.time() - start_time:.2f}s")
            except Exception as e:
                logger.error(f"Job {job.key} failed after {time.time() - start_time:.2f}s: {e}", exc_info=True)
                message = {"key": job.key, "result": None, "error": f"{type(e).__name__}: {e}"}
                status = "FAILED"
            execution_time = time.time() - start_time
            with self.lock:
                self.results[job.key] = message
                self.completed_jobs += 1
                if status == "FAILED":
                    self.failed_jobs += 1
            if self.history is not None:
                self.history.record(job.key, job.kind, status, error=message["error"],
                                    execution_time=execution_time)
            self.job_queue.task_done()

    def get_stats(self) -> Dict[str, Any]:
        with self.lock:
            return {
                "threads": self.threads,
                "queue_size": self.job_queue.qsize(),
                "total_jobs": self.job_count,
                "completed_jobs": self.completed_jobs,
                "failed_jobs": self.failed_jobs,
            }
