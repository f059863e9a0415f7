"""Feature-map masking and reconstruction.

Training zeroes ``m = round(ratio * n)`` whole channels, runs the FeatER stack
and scores the output against the unmasked stack over every channel.
Evaluation runs the stack on the untouched input.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from feater.blocks import BlockStackConfig, FeatERBlockParams, stack_forward
from feater.core import kernels as K
from feater.core.autograd import Tensor, as_tensor
from feater.core.rng import RngStream
from feater.errors import ConfigurationError, DimensionError, ParameterError

FILL_POLICIES = ("zeros", "learned")


def masked_count(n: int, ratio: float) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    return math.floor(ratio * n + 0.5)


@dataclass(frozen=True)
class MaskPlan:
    n: int
    ratio: float
    indices: tuple[int, ...]
    fill: str = "zeros"

    @property
    def m(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        return {"n": self.n, "ratio": self.ratio, "m": self.m, "indices": list(self.indices), "fill": self.fill}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "MaskPlan":
        plan = cls(int(data["n"]), float(data["ratio"]), tuple(sorted(int(i) for i in data["indices"])), data.get("fill", "zeros"))
        if "m" in data and int(data["m"]) != plan.m:
            raise ParameterError(f"m={data['m']} disagrees with {plan.m} indices")
        return plan


def make_mask_plan(n: int, ratio: float, rng: RngStream, fill: str = "zeros") -> MaskPlan:
    if n < 2:
        raise ParameterError(f"need at least 2 channels to mask, got {n}")
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"masking ratio must lie in [0, 1), got {ratio}")
    if fill not in FILL_POLICIES:
        raise ParameterError(f"unknown fill policy {fill!r}")
    m = masked_count(n, ratio)
    if m >= n:
        raise ParameterError(f"ratio {ratio} masks all {n} channels")
    idx = rng.choice_without_replacement(n, m) if m else []
    return MaskPlan(n, float(ratio), tuple(sorted(int(i) for i in idx)), fill)


def apply_mask(x, plan: MaskPlan) -> Tensor:
    x = as_tensor(x)
    if x.shape[0] != plan.n:
        raise DimensionError(f"plan is for {plan.n} channels, stack has {x.shape[0]}")
    if plan.fill == "learned":
        # needs a trainable mask token threaded through the stack params
        raise NotImplementedError("learned mask fill is not supported; use 'zeros'")
    if not plan.indices:
        return x
    return K.zero_channels(x, plan.indices)


def reconstruction_loss(recon, target) -> Tensor:
    return K.mse(recon, target)


def reconstruction_forward(
    x,
    cfg: BlockStackConfig,
    params: list[FeatERBlockParams],
    plan: MaskPlan | None = None,
    mode: str = "eval",
) -> tuple[Tensor, Tensor | None]:
    """Return ``(output, loss)``; ``loss`` is ``None`` in eval mode."""
    x = as_tensor(x)
    if mode == "eval":
        return stack_forward(x, cfg, params), None
    if mode != "train":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if plan is None:
        raise ConfigurationError("train mode needs a MaskPlan")
    out = stack_forward(apply_mask(x, plan), cfg, params)
    return out, reconstruction_loss(out, x)
