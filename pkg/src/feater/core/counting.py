"""Instrumented multiply-accumulate counter.

Only weight applications and activation matmuls are counted; softmax,
normalisation, activations, additions and biases are free.
"""
from __future__ import annotations

import contextvars

_ACTIVE_COUNTER: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar(
    "feater_mac_counter", default=None
)


class MacCounter:
    """Collects ``(label, macs, weight_params)`` events for one recorded pass."""

    def __init__(self):
        self.events: list[tuple[str, int, int]] = []
        self.enabled = False
        self._token = None

    def __enter__(self) -> "MacCounter":
        self.enabled = True
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_COUNTER.reset(self._token)
        self._token = None

    def add(self, label: str, macs: int, params: int = 0) -> None:
        self.events.append((label, int(macs), int(params)))

    @property
    def total(self) -> int:
        return sum(m for _, m, _ in self.events)


def counting() -> MacCounter:
    """``with counting() as c: ...`` enables MAC accounting for that block."""
    return MacCounter()


def record_macs(label: str | None, macs: int, params: int = 0) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(label or "unlabeled", macs, params)
