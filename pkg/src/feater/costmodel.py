"""Closed-form MAC/parameter counts and the instrumented counterpart.

Only weight applications and the two attention matmuls per stream are
charged; biases, softmax, normalisation and activations cost nothing.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

from feater.blocks import BlockParams, FeatERBlockParams
from feater.core.counting import MacCounter
from feater.errors import CountingStateError, ParameterError

BIAS_ROW = "biases_and_norms"


@dataclass
class CostReport:
    rows: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(r[1] for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def weight_params(self) -> int:
        return sum(r[2] for r in self.rows if r[0] != BIAS_ROW)

    def row(self, label: str) -> tuple[str, int, int]:
        for r in self.rows:
            if r[0] == label:
                return r
        raise KeyError(label)

    def scaled(self, factor: int) -> "CostReport":
        return CostReport([(label, m * factor, p * factor) for label, m, p in self.rows])

    def to_dict(self) -> dict:
        return {
            "rows": [list(r) for r in self.rows],
            "total_macs": self.total_macs,
            "total_params": self.total_params,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "CostReport":
        return cls([(str(l), int(m), int(p)) for l, m, p in data["rows"]])

    def to_text(self) -> str:
        header = ("layer", "MACs", "params")
        body = [(l, f"{m:,}", f"{p:,}") for l, m, p in self.rows]
        footer = ("total", f"{self.total_macs:,}", f"{self.total_params:,}")
        table = [header, *body, footer]
        widths = [max(len(r[i]) for r in table) for i in range(3)]
        lines = []
        for i, r in enumerate(table):
            lines.append(f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}")
            if i == 0 or i == len(table) - 2:
                lines.append("-" * (sum(widths) + 4))
        lines.append(f"total MACs: {giga(self.total_macs)}")
        return "\n".join(lines)


def giga(macs: int) -> str:
    """Decimal giga-MACs with two decimals, e.g. ``4.30G``."""
    return f"{macs / 1e9:.2f}G"


def _positive(**extents: int) -> None:
    for name, v in extents.items():
        if int(v) != v or v < 1:
            raise ParameterError(f"{name} must be a positive integer, got {v}")


def macs_vanilla_block(n: int, d: int) -> CostReport:
    """Per-layer counts of one vanilla block; totals ``8nd^2 + 2n^2d``."""
    _positive(n=n, d=d)
    return CostReport([
        ("qkv", 3 * n * d * d, 3 * d * d),
        ("attn_logits", n * n * d, 0),
        ("attn_weighted_sum", n * n * d, 0),
        ("projection", n * d * d, d * d),
        ("mlp_fc1", 2 * n * d * d, 2 * d * d),
        ("mlp_fc2", 2 * n * d * d, 2 * d * d),
    ])


def macs_feater_block(n: int, h: int, w: int) -> CostReport:
    """Per-layer counts of one FeatER block; totals ``3nhw(w+h) + 9n^2hw``."""
    _positive(n=n, h=h, w=w)
    nn_hw = n * n * h * w
    return CostReport([
        ("w_qkv", 3 * n * h * w * w, 3 * w * w),
        ("w_attn_logits", nn_hw, 0),
        ("w_attn_weighted_sum", nn_hw, 0),
        ("h_qkv", 3 * n * h * h * w, 3 * h * h),
        ("h_attn_logits", nn_hw, 0),
        ("h_attn_weighted_sum", nn_hw, 0),
        ("projection", nn_hw, n * n),
        ("ffn_conv1", 2 * nn_hw, 2 * n * n),
        ("ffn_conv2", 2 * nn_hw, 2 * n * n),
    ])


def count_params(p: BlockParams) -> CostReport:
    """Shape-based parameter count: one row per weight layer, then biases and norms."""
    tensors = p.tensors()
    rows = []
    used = set()
    for label, names in p._weight_layers.items():
        rows.append((label, 0, sum(tensors[name].size for name in names)))
        used.update(names)
    rows.append((BIAS_ROW, 0, sum(t.size for name, t in tensors.items() if name not in used)))
    return CostReport(rows)


def count_macs_instrumented(counter: MacCounter) -> CostReport:
    """Aggregate a counter's events by label, in first-seen order.

    Parameters per label are the weight entries reported by the kernels.
    """
    if counter is None or not counter.enabled:
        raise CountingStateError("this pass was not run with MAC counting enabled")
    agg: dict[str, list[int]] = {}
    for label, macs, params in counter.events:
        slot = agg.setdefault(label, [0, 0])
        slot[0] += macs
        slot[1] += params
    return CostReport([(label, m, p) for label, (m, p) in agg.items()])


def instrument(fn: Callable, *args, **kwargs):
    """Run ``fn`` with counting enabled; return ``(result, CostReport)``."""
    with MacCounter() as counter:
        result = fn(*args, **kwargs)
    return result, count_macs_instrumented(counter)


def stack_report(report: CostReport, depth: int) -> dict:
    _positive(depth=depth)
    return {
        "per_block": report.to_dict(),
        "depth": depth,
        "total_macs": report.total_macs * depth,
        "total_params": report.total_params * depth,
    }


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx, my = sum(lx) / len(lx), sum(ly) / len(ly)
    num = sum((a - mx) * (b - my) for a, b in zip(lx, ly))
    den = sum((a - mx) ** 2 for a in lx)
    return num / den


def scaling_exponents(n: int = 32, dims=(64, 256, 1024, 4096)) -> dict[str, float]:
    """Fitted MAC growth exponents vs ``d`` with ``h = w = sqrt(d)``."""
    sides = [math.isqrt(d) for d in dims]
    if any(s * s != d for s, d in zip(sides, dims)):
        raise ParameterError("every d must be a perfect square")
    feater = [macs_feater_block(n, s, s).total_macs for s in sides]
    vanilla = [macs_vanilla_block(n, d).total_macs for d in dims]
    return {"feater": fit_loglog_slope(dims, feater), "vanilla": fit_loglog_slope(dims, vanilla)}


def is_feater(p: BlockParams) -> bool:
    return isinstance(p, FeatERBlockParams)
