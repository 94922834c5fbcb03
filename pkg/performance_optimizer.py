"""
Performance Optimization Module

Provides performance monitoring and parallel batch utilities for the affect
pipeline: operation timing with memory deltas, frame throughput bookkeeping
against the real-time budget, and an order-preserving parallel map for
per-clip work.
"""
import time
import functools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar
import os

logger = logging.getLogger(__name__)

# Try to import psutil, fall back to basic monitoring if not available
try:
    import psutil
    HAS_PSUTIL = True
except ImportError:
    HAS_PSUTIL = False
    logger.debug("psutil not available, using basic performance monitoring")

T = TypeVar("T")
R = TypeVar("R")

# frames per second the streaming stage must sustain single-threaded
REALTIME_BUDGET_FPS = 1000.0


def _rate(stats: Optional[Dict[str, float]]) -> float:
    if not stats or stats["seconds"] <= 0:
        return 0.0
    return stats["items"] / stats["seconds"]


class PerformanceMonitor:
    """Monitors durations, memory and throughput of pipeline operations."""

    def __init__(self) -> None:
        self.operation_stats: Dict[str, Dict[str, Any]] = {}
        self.throughput_stats: Dict[str, Dict[str, float]] = {}
        # per-clip workers record from several threads
        self._lock = threading.Lock()
        self.slow_operation_s = 600.0
        self.memory_warning_mb = 1024.0

    def track_operation(self, operation_name: str):
        """Decorator to track operation performance."""
        def decorator(func: Callable) -> Callable:
            @functools.wraps(func)
            def wrapper(*args, **kwargs):
                start_time = time.perf_counter()
                start_memory = self._get_memory_usage()
                success = False
                error: Optional[str] = None
                try:
                    result = func(*args, **kwargs)
                    success = True
                    return result
                except Exception as e:
                    error = str(e)
                    raise
                finally:
                    duration = time.perf_counter() - start_time
                    memory_delta = self._get_memory_usage() - start_memory
                    self._record_stats(operation_name, duration, memory_delta, success, error)

                    if duration > self.slow_operation_s:
                        logger.warning(f"Slow operation {operation_name}: {duration:.2f}s")
                    if memory_delta > self.memory_warning_mb:
                        logger.warning(f"High memory operation {operation_name}: +{memory_delta:.1f}MB")
            return wrapper
        return decorator

    def _get_memory_usage(self) -> float:
        """Get current memory usage in MB."""
        if HAS_PSUTIL:
            try:
                return psutil.Process(os.getpid()).memory_info().rss / 1024 / 1024
            except Exception:
                pass
        try:
            import resource
            return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024  # KB to MB on Linux
        except Exception:
            return 0.0

    def _record_stats(self, operation: str, duration: float, memory_delta: float,
                      success: bool, error: Optional[str]) -> None:
        with self._lock:
            stats = self.operation_stats.setdefault(operation, {
                "count": 0,
                "total_duration": 0.0,
                "total_memory_delta": 0.0,
                "success_count": 0,
                "avg_duration": 0.0,
                "last_error": None,
            })
            stats["count"] += 1
            stats["total_duration"] += duration
            stats["total_memory_delta"] += memory_delta
            if success:
                stats["success_count"] += 1
            else:
                stats["last_error"] = error
            stats["avg_duration"] = stats["total_duration"] / stats["count"]

    def record_throughput(self, operation: str, n_items: int, seconds: float) -> float:
        """Accumulate processed items for ``operation``; returns the running rate."""
        with self._lock:
            stats = self.throughput_stats.setdefault(operation, {"items": 0.0, "seconds": 0.0})
            stats["items"] += n_items
            stats["seconds"] += seconds
            return _rate(stats)

    def throughput(self, operation: str) -> float:
        """Items per second recorded for ``operation`` (0 when nothing recorded)."""
        with self._lock:
            return _rate(self.throughput_stats.get(operation))

    def get_performance_report(self) -> Dict[str, Any]:
        """Get a summary of timings, throughput and recommendations."""
        with self._lock:
            operations = {name: dict(stats) for name, stats in self.operation_stats.items()}
            rates = {name: _rate(stats) for name, stats in self.throughput_stats.items()}
        return {
            "current_memory_mb": self._get_memory_usage(),
            "operation_stats": operations,
            "throughput_fps": rates,
            "recommendations": self._get_recommendations(operations, rates),
        }

    def _get_recommendations(self, operations: Dict[str, Dict[str, Any]], rates: Dict[str, float]) -> List[str]:
        recommendations = []
        for name, rate in rates.items():
            if 0 < rate < REALTIME_BUDGET_FPS:
                recommendations.append(
                    f"Operation '{name}' runs at {rate:.0f} frames/s, below the {REALTIME_BUDGET_FPS:.0f} frames/s budget."
                )
        for operation, stats in operations.items():
            success_rate = stats["success_count"] / stats["count"] if stats["count"] else 0
            if success_rate < 0.95 and stats["count"] > 5:
                recommendations.append(f"Operation '{operation}' has low success rate ({success_rate:.1%}).")
        return recommendations

    def reset(self) -> None:
        with self._lock:
            self.operation_stats.clear()
            self.throughput_stats.clear()


class ClipBatchProcessor:
    """Runs per-clip work on a thread pool, returning results in input order."""

    def __init__(self, threads: int = 1, batch_size: int = 64) -> None:
        self.threads = max(1, int(threads))
        self.batch_size = max(1, int(batch_size))

    def map(self, func: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """Apply ``func`` to every item; output order always matches input order."""
        items = list(items)
        total = len(items)
        if self.threads == 1 or total <= 1:
            return [func(item) for item in items]

        logger.info(f"Processing {total} clips on {self.threads} threads in batches of {self.batch_size}")
        results: List[R] = []
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for start in range(0, total, self.batch_size):
                batch = items[start:start + self.batch_size]
                try:
                    results.extend(pool.map(func, batch))
                except Exception as e:
                    logger.error(f"Error processing clips {start + 1}-{start + len(batch)}: {e}")
                    raise
        return results


def timed(func: Callable[[], T]) -> Tuple[T, float]:
    """Run ``func`` and return its result with the elapsed wall time in seconds."""
    start = time.perf_counter()
    result = func()
    return result, time.perf_counter() - start


# Global instances
performance_monitor = PerformanceMonitor()
