"""Collects one PASS/FAIL line per acceptance criterion."""
import time
from contextlib import contextmanager

LINES: list[str] = []


@contextmanager
def criterion(number, title, time_limit_s):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        LINES.append(f"[{number}] FAIL {title} ({elapsed:.2f}s): {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    elapsed = time.perf_counter() - start
    if elapsed >= time_limit_s:
        LINES.append(f"[{number}] FAIL {title}: took {elapsed:.2f}s, limit {time_limit_s}s")
        raise AssertionError(f"criterion {number} exceeded its {time_limit_s}s budget ({elapsed:.2f}s)")
    LINES.append(f"[{number}] PASS {title} ({elapsed:.2f}s)")
