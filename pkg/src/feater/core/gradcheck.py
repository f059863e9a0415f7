"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from feater.core.autograd import Tape, Tensor
from feater.core.rng import RngStream
from feater.errors import NumericError, ParameterError

REL_ERROR_FLOOR = 1e-12
FULL_CHECK_LIMIT = 4096
SUBSAMPLE_SIZE = 64
# Central-difference step: large enough that float64 roundoff in f stays
# well under the tolerance, small enough that the eps**2 truncation term
# does too for attention/GELU blocks with O(1) activations.
DEFAULT_EPS = 2e-5


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    eps: float
    tolerance: float
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": dict(self.max_rel_error),
            "worst": self.worst,
            "eps": self.eps,
            "tolerance": self.tolerance,
            "checked_entries": dict(self.checked_entries),
            "passed": self.passed,
        }


def relative_error(analytic, numeric, floor: float = REL_ERROR_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = DEFAULT_EPS,
    tolerance: float = 1e-5,
    rng: RngStream | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its value from the current contents of ``params`` on
    every call. Groups larger than ``FULL_CHECK_LIMIT`` entries are checked on
    a seeded subsample of ``SUBSAMPLE_SIZE`` entries.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ParameterError(f"group {name!r} is {p.data.dtype}, double precision required")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    rng = rng or RngStream(0, "gradcheck")

    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient in group {name!r}")
        if p.size > FULL_CHECK_LIMIT:
            entries = np.sort(rng.substream(name).choice_without_replacement(p.size, SUBSAMPLE_SIZE))
        else:
            entries = np.arange(p.size)
        numeric = np.empty(entries.size)
        for j, flat_idx in enumerate(entries):
            # index in place; a flattened view would silently copy non-contiguous data
            idx = np.unravel_index(flat_idx, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = f().item()
            p.data[idx] = orig - eps
            down = f().item()
            p.data[idx] = orig
            numeric[j] = (up - down) / (2.0 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"non-finite numeric gradient in group {name!r}")
        rel = relative_error(analytic.reshape(-1)[entries], numeric)
        errors[name] = float(rel.max()) if rel.size else 0.0
        counts[name] = int(entries.size)
    return GradCheckReport(errors, eps, tolerance, counts)
