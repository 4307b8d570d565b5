"""Resource accounting for the coordinator process tree.

Samples the current process and its descendants at 1 Hz while a run is
active. CPU time includes reaped children, so work delegated to local
subprocesses is charged to the coordinator, while work running on the far
side of an SSH channel is not; that difference is exactly what the
local-vs-delegated comparison reports measure.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import psutil


@dataclass(slots=True)
class ResourceStats:
    cpu_time_s: float = 0.0
    cpu_peak_pct: float = 0.0
    ram_peak_mb: float = 0.0
    samples: int = 0

    def to_dict(self) -> dict:
        return {
            "cpu_time_s": round(self.cpu_time_s, 3),
            "cpu_peak_pct": round(self.cpu_peak_pct, 1),
            "ram_peak_mb": round(self.ram_peak_mb, 1),
            "samples": self.samples,
        }


def _tree_cpu_time(proc: psutil.Process) -> float:
    times = proc.cpu_times()
    total = times.user + times.system
    total += getattr(times, "children_user", 0.0)
    total += getattr(times, "children_system", 0.0)
    return total


class ControllerSampler:
    """1 Hz sampler; start before the run, stop after, read ``stats``."""

    def __init__(self, interval_s: float = 1.0):
        self.interval_s = interval_s
        self.stats = ResourceStats()
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._cpu_base = 0.0

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def start(self) -> None:
        self._cpu_base = _tree_cpu_time(self._proc)
        self._proc.cpu_percent(None)  # prime the percent window
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _sample_once(self) -> None:
        try:
            cpu = self._proc.cpu_percent(None)
            rss = self._proc.memory_info().rss
            for child in self._proc.children(recursive=True):
                try:
                    cpu += child.cpu_percent(None)
                    rss += child.memory_info().rss
                except (psutil.NoSuchProcess, psutil.ZombieProcess):
                    continue
        except psutil.Error:
            return
        self.stats.cpu_peak_pct = max(self.stats.cpu_peak_pct, cpu)
        self.stats.ram_peak_mb = max(self.stats.ram_peak_mb, rss / (1024 * 1024))
        self.stats.samples += 1

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            self._sample_once()

    def stop(self) -> ResourceStats:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._sample_once()
        self.stats.cpu_time_s = max(
            0.0, _tree_cpu_time(self._proc) - self._cpu_base
        )
        return self.stats
