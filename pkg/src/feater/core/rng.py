"""Counter-based random streams with labelled, independent substreams."""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _philox_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed & _MASK64}|{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Philox stream keyed by ``(seed, label)``.

    The same pair always yields the same draw sequence, independent of
    platform and of any other stream. ``substream("init")`` derives a child
    keyed by ``label + "/init"`` without consuming draws from the parent.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & _MASK64
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_philox_key(self.seed, label)))

    def substream(self, purpose: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{purpose}")

    @property
    def counter(self) -> int:
        """Current Philox block counter (advances with every draw)."""
        words = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(v) << (64 * i) for i, v in enumerate(words)))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in the closed range ``[low, high]``."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def choice_without_replacement(self, n: int, m: int) -> np.ndarray:
        return self._gen.choice(n, size=m, replace=False)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"
