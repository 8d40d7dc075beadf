"""
Job history for run manifests.
"""

import threading
import logging
from collections import deque
from datetime import datetime
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)


class RunHistory:
    """
    Records the outcome of every job of a run.

    Timestamps and durations are kept for logs; ``get_statistics`` leaves
    them out unless asked, so manifests stay reproducible.
    """

    def __init__(self, max_history: int = 100000):
        self.history: deque = deque(maxlen=max_history)
        self.lock = threading.Lock()
        self.job_records: Dict[str, Dict] = {}

    def record(self, key: str, kind: str, status: str, error: Optional[str] = None,
               execution_time: Optional[float] = None):
        """
        Record one job.

        Args:
            key: Job key (slide id, method, ...)
            kind: Job type
            status: SUCCESS or FAILED
            error: Error message if the job failed
            execution_time: Seconds spent in the job
        """
        record = {
            "key": key,
            "kind": kind,
            "status": status,
            "timestamp": datetime.now().isoformat(),
            "execution_time": execution_time,
        }
        if error:
            record["error"] = error
        with self.lock:
            self.history.append(record)
            self.job_records[key] = record
        logger.debug(f"Recorded job {key}: {status}")

    def get_history(self, limit: int = 100, kind: Optional[str] = None) -> List[Dict]:
        with self.lock:
            history = list(self.history)
        if kind:
            history = [h for h in history if h["kind"] == kind]
        return history[-limit:]

    def get_job_info(self, key: str) -> Optional[Dict]:
        with self.lock:
            return self.job_records.get(key)

    def failures(self) -> List[Dict]:
        """Failed job records sorted by key."""
        with self.lock:
            return sorted((r for r in self.job_records.values() if r["status"] == "FAILED"), key=lambda r: r["key"])

    def get_statistics(self, include_timing: bool = False) -> Dict:
        with self.lock:
            records = list(self.job_records.values())
        total = len(records)
        successful = sum(1 for r in records if r["status"] == "SUCCESS")
        stats = {
            "total_jobs": total,
            "successful": successful,
            "failed": total - successful,
            "success_rate": successful / total if total else 0.0,
        }
        if include_timing:
            times = [r["execution_time"] for r in records if r["execution_time"] is not None]
            stats["average_execution_time"] = sum(times) / len(times) if times else 0.0
        return stats
