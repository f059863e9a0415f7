"""Vanilla transformer block over flattened tokens and the FeatER block over
intact ``[n, h, w]`` feature-map stacks.

Both blocks are pre-norm: ``u = x + attn(LN1(x))``, ``out = u + ffn(LN2(u))``.
In FeatER the two decomposed attention streams share ``LN1`` and their sum
goes through one 1x1 channel projection before the residual add.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import ClassVar, Iterator, Union

import numpy as np

from feater.core import kernels as K
from feater.core.autograd import Tensor, as_tensor
from feater.core.rng import RngStream
from feater.core.serial import read_tensor, write_tensor
from feater.errors import ConfigurationError, DimensionError

INIT_SCHEMES = ("uniform", "zeros")


def _weight(rng: RngStream | None, shape, fan_in: int, scheme: str) -> Tensor:
    if scheme == "zeros":
        data = np.zeros(shape)
    else:
        bound = 1.0 / math.sqrt(fan_in)
        data = rng.uniform(-bound, bound, shape)
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class _ParamsBase:
    """Shared helpers for the parameter dataclasses."""

    heads: int
    _weight_layers: ClassVar[dict[str, tuple[str, ...]]]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "heads"}

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors().values())

    def copy(self):
        kwargs = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors().items()}
        return type(self)(heads=self.heads, **kwargs)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], heads: int = 1):
        names = [f.name for f in fields(cls) if f.name != "heads"]
        missing = set(names) - set(arrays)
        if missing:
            raise ConfigurationError(f"missing parameter tensors: {sorted(missing)}")
        return cls(heads=heads, **{n: Tensor(np.array(arrays[n], dtype=np.float64), requires_grad=True) for n in names})


@dataclass
class VanillaBlockParams(_ParamsBase):
    """Weights act as ``x @ W`` (``W`` is ``[in, out]``).

    The key projection has no bias: a key bias only shifts every logit in a
    softmax row by the same amount and has an identically zero gradient.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_proj: Tensor
    b_proj: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int = 1

    _weight_layers: ClassVar = {
        "qkv": ("w_q", "w_k", "w_v"),
        "projection": ("w_proj",),
        "mlp_fc1": ("w_mlp1",),
        "mlp_fc2": ("w_mlp2",),
    }

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d: int, heads: int = 1, rng: RngStream | None = None, scheme: str = "uniform"):
        if scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init scheme {scheme!r}")
        if d < 1 or heads < 1 or d % heads:
            raise ConfigurationError(f"d={d} must be a positive multiple of heads={heads}")
        if scheme == "uniform" and rng is None:
            rng = RngStream(0, "vanilla-init")
        return cls(
            w_q=_weight(rng, (d, d), d, scheme),
            b_q=_zeros(d),
            w_k=_weight(rng, (d, d), d, scheme),
            w_v=_weight(rng, (d, d), d, scheme),
            b_v=_zeros(d),
            w_proj=_weight(rng, (d, d), d, scheme),
            b_proj=_zeros(d),
            w_mlp1=_weight(rng, (d, 2 * d), d, scheme),
            b_mlp1=_zeros(2 * d),
            w_mlp2=_weight(rng, (2 * d, d), 2 * d, scheme),
            b_mlp2=_zeros(d),
            ln1_gain=_ones(d),
            ln1_bias=_zeros(d),
            ln2_gain=_ones(d),
            ln2_bias=_zeros(d),
            heads=heads,
        )


@dataclass
class FeatERBlockParams(_ParamsBase):
    """Stream projections act as ``x @ W`` along the last axis; the channel
    convolutions use ``[n_out, n_in]`` weights. Layer-norm gains and biases
    are per channel (``[n]``). As in the vanilla block, key projections
    carry no bias.
    """

    w_qw: Tensor
    b_qw: Tensor
    w_kw: Tensor
    w_vw: Tensor
    b_vw: Tensor
    w_qh: Tensor
    b_qh: Tensor
    w_kh: Tensor
    w_vh: Tensor
    b_vh: Tensor
    w_proj: Tensor
    b_proj: Tensor
    w_ffn1: Tensor
    b_ffn1: Tensor
    w_ffn2: Tensor
    b_ffn2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int = 1

    _weight_layers: ClassVar = {
        "w_qkv": ("w_qw", "w_kw", "w_vw"),
        "h_qkv": ("w_qh", "w_kh", "w_vh"),
        "projection": ("w_proj",),
        "ffn_conv1": ("w_ffn1",),
        "ffn_conv2": ("w_ffn2",),
    }

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.w_proj.shape[0], self.w_qh.shape[0], self.w_qw.shape[0]

    @classmethod
    def init(cls, n: int, h: int, w: int, heads: int = 1, rng: RngStream | None = None, scheme: str = "uniform"):
        if scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init scheme {scheme!r}")
        if min(n, h, w) < 1 or heads < 1 or h % heads or w % heads:
            raise ConfigurationError(f"h={h} and w={w} must be positive multiples of heads={heads}")
        if scheme == "uniform" and rng is None:
            rng = RngStream(0, "feater-init")
        return cls(
            w_qw=_weight(rng, (w, w), w, scheme),
            b_qw=_zeros(w),
            w_kw=_weight(rng, (w, w), w, scheme),
            w_vw=_weight(rng, (w, w), w, scheme),
            b_vw=_zeros(w),
            w_qh=_weight(rng, (h, h), h, scheme),
            b_qh=_zeros(h),
            w_kh=_weight(rng, (h, h), h, scheme),
            w_vh=_weight(rng, (h, h), h, scheme),
            b_vh=_zeros(h),
            w_proj=_weight(rng, (n, n), n, scheme),
            b_proj=_zeros(n),
            w_ffn1=_weight(rng, (2 * n, n), n, scheme),
            b_ffn1=_zeros(2 * n),
            w_ffn2=_weight(rng, (n, 2 * n), 2 * n, scheme),
            b_ffn2=_zeros(n),
            ln1_gain=_ones(n),
            ln1_bias=_zeros(n),
            ln2_gain=_ones(n),
            ln2_bias=_zeros(n),
            heads=heads,
        )

    def mirrored(self) -> "FeatERBlockParams":
        """Parameters for the h<->w transposed problem (streams swapped)."""
        t = self.tensors()
        swap = {"w_qw": "w_qh", "b_qw": "b_qh", "w_kw": "w_kh", "w_vw": "w_vh", "b_vw": "b_vh"}
        swap.update({v: k for k, v in swap.items()})
        return type(self)(heads=self.heads, **{name: t[swap.get(name, name)] for name in t})


BlockParams = Union[VanillaBlockParams, FeatERBlockParams]


# flatten adapters --------------------------------------------------------------

def flatten_stack(x) -> Tensor:
    """``[n, h, w] -> [n, h*w]``; each token is its map in row-major order."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"expected a [n, h, w] stack, got {x.shape}")
    n, h, w = x.shape
    return K.reshape(x, (n, h * w))


def unflatten_tokens(t, h: int, w: int) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2 or t.shape[1] != h * w:
        raise DimensionError(f"token matrix {t.shape} cannot be viewed as [{t.shape[0]}, {h}, {w}]")
    return K.reshape(t, (t.shape[0], h, w))


# vanilla -------------------------------------------------------------------------

def vanilla_msa(x, p: VanillaBlockParams) -> Tensor:
    x = as_tensor(x)
    d = p.dim
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"token matrix {x.shape} does not match block dimension {d}")
    n = x.shape[0]
    H = p.heads
    dh = d // H
    q = K.linear(x, p.w_q, p.b_q, "qkv")
    k = K.linear(x, p.w_k, None, "qkv")
    v = K.linear(x, p.w_v, p.b_v, "qkv")
    # [n, d] -> [H, n, dh]
    q, k, v = (K.transpose(K.reshape(t, (n, H, dh)), (1, 0, 2)) for t in (q, k, v))
    logits = K.matmul(q, K.transpose(k, (0, 2, 1)), "attn_logits")
    attn = K.softmax_lastdim(K.mul(logits, 1.0 / math.sqrt(dh)))
    heads_out = K.matmul(attn, v, "attn_weighted_sum")
    merged = K.reshape(K.transpose(heads_out, (1, 0, 2)), (n, d))
    return K.linear(merged, p.w_proj, p.b_proj, "projection")


def vanilla_mlp(x, p: VanillaBlockParams) -> Tensor:
    hidden = K.gelu(K.linear(x, p.w_mlp1, p.b_mlp1, "mlp_fc1"))
    return K.linear(hidden, p.w_mlp2, p.b_mlp2, "mlp_fc2")


def vanilla_block_forward(x, p: VanillaBlockParams) -> Tensor:
    x = as_tensor(x)
    u = K.add(x, vanilla_msa(K.layer_norm(x, (-1,), p.ln1_gain, p.ln1_bias), p))
    return K.add(u, vanilla_mlp(K.layer_norm(u, (-1,), p.ln2_gain, p.ln2_bias), p))


# FeatER --------------------------------------------------------------------------

def _axis_attention(x: Tensor, wq, bq, wk, wv, bv, heads: int, prefix: str) -> tuple[Tensor, Tensor]:
    """Attention across the ``n`` channels, batched over the middle axis.

    ``x`` is ``[n, rows, f]``; every row is an independent attention problem
    whose tokens are the channels and whose features are the ``f`` values.
    """
    n, rows, f = x.shape
    fh = f // heads
    q = K.linear(x, wq, bq, f"{prefix}_qkv")
    k = K.linear(x, wk, None, f"{prefix}_qkv")
    v = K.linear(x, wv, bv, f"{prefix}_qkv")
    # [n, rows, f] -> [rows, heads, n, fh]
    q, k, v = (K.transpose(K.reshape(t, (n, rows, heads, fh)), (1, 2, 0, 3)) for t in (q, k, v))
    logits = K.matmul(q, K.transpose(k, (0, 1, 3, 2)), f"{prefix}_attn_logits")
    attn = K.softmax_lastdim(K.mul(logits, 1.0 / math.sqrt(fh)))
    out = K.matmul(attn, v, f"{prefix}_attn_weighted_sum")
    return K.reshape(K.transpose(out, (2, 0, 1, 3)), (n, rows, f)), attn


def _check_stack(x: Tensor, p: FeatERBlockParams) -> None:
    if x.ndim != 3 or x.shape != p.shape:
        raise DimensionError(f"feature-map stack {x.shape} does not match block shape {p.shape}")


def attention_w(x, p: FeatERBlockParams) -> Tensor:
    """w-stream: each of the ``h`` rows attends across channels with ``w``-length features."""
    x = as_tensor(x)
    _check_stack(x, p)
    return _axis_attention(x, p.w_qw, p.b_qw, p.w_kw, p.w_vw, p.b_vw, p.heads, "w")[0]


def attention_h(x, p: FeatERBlockParams) -> Tensor:
    """h-stream: the mirror of :func:`attention_w` on the ``[n, w, h]`` view."""
    x = as_tensor(x)
    _check_stack(x, p)
    xt = K.transpose(x, (0, 2, 1))
    out, _ = _axis_attention(xt, p.w_qh, p.b_qh, p.w_kh, p.w_vh, p.b_vh, p.heads, "h")
    return K.transpose(out, (0, 2, 1))


def stream_attention_weights(x, p: FeatERBlockParams, stream: str) -> np.ndarray:
    """Softmax weights of one stream, ``[rows, heads, n, n]`` (rows = h for "w", w for "h")."""
    x = as_tensor(x)
    _check_stack(x, p)
    if stream == "w":
        return _axis_attention(x, p.w_qw, p.b_qw, p.w_kw, p.w_vw, p.b_vw, p.heads, "w")[1].data
    if stream == "h":
        xt = K.transpose(x, (0, 2, 1))
        return _axis_attention(xt, p.w_qh, p.b_qh, p.w_kh, p.w_vh, p.b_vh, p.heads, "h")[1].data
    raise ValueError(f"stream must be 'w' or 'h', got {stream!r}")


def feater_ffn(x, p: FeatERBlockParams) -> Tensor:
    hidden = K.gelu(K.conv_channel_1x1(x, p.w_ffn1, p.b_ffn1, "ffn_conv1"))
    return K.conv_channel_1x1(hidden, p.w_ffn2, p.b_ffn2, "ffn_conv2")


def _channel_ln(x, gain, bias) -> Tensor:
    n = x.shape[0]
    return K.layer_norm(x, (1, 2), K.reshape(gain, (n, 1, 1)), K.reshape(bias, (n, 1, 1)))


def feater_block_forward(x, p: FeatERBlockParams) -> Tensor:
    x = as_tensor(x)
    _check_stack(x, p)
    xn = _channel_ln(x, p.ln1_gain, p.ln1_bias)
    a = K.add(attention_w(xn, p), attention_h(xn, p))
    a = K.conv_channel_1x1(a, p.w_proj, p.b_proj, "projection")
    u = K.add(a, x)
    return K.add(u, feater_ffn(_channel_ln(u, p.ln2_gain, p.ln2_bias), p))


# stacks ----------------------------------------------------------------------------

@dataclass
class BlockStackConfig:
    depth: int
    architecture: str  # "vanilla" | "feater"
    n: int
    h: int | None = None
    w: int | None = None
    d: int | None = None
    heads: int = 1
    init: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.architecture not in ("vanilla", "feater"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "feater" and (self.h is None or self.w is None):
            raise ConfigurationError("feater stacks need h and w")
        if self.architecture == "vanilla" and self.d is None:
            if self.h is None or self.w is None:
                raise ConfigurationError("vanilla stacks need d (or h and w)")
            self.d = self.h * self.w


def init_stack_params(cfg: BlockStackConfig, rng: RngStream | None = None) -> list[BlockParams]:
    """Seeded per-block parameters; block ``i`` draws from substream ``block{i}``."""
    rng = rng or RngStream(cfg.seed, "init")
    out: list[BlockParams] = []
    for i in range(cfg.depth):
        sub = rng.substream(f"block{i}")
        if cfg.architecture == "feater":
            out.append(FeatERBlockParams.init(cfg.n, cfg.h, cfg.w, cfg.heads, sub, cfg.init))
        else:
            out.append(VanillaBlockParams.init(cfg.d, cfg.heads, sub, cfg.init))
    return out


def block_forward(x, p: BlockParams) -> Tensor:
    if isinstance(p, FeatERBlockParams):
        return feater_block_forward(x, p)
    return vanilla_block_forward(x, p)


def stack_forward(x, cfg: BlockStackConfig, params: list[BlockParams]) -> Tensor:
    if len(params) != cfg.depth:
        raise ConfigurationError(f"config depth {cfg.depth} but {len(params)} parameter sets")
    want = FeatERBlockParams if cfg.architecture == "feater" else VanillaBlockParams
    out = as_tensor(x)
    for p in params:
        if not isinstance(p, want):
            raise ConfigurationError(f"{type(p).__name__} in a {cfg.architecture} stack")
        out = block_forward(out, p)
    return out


# checkpoints -------------------------------------------------------------------------

def save_checkpoint(directory: str | os.PathLike, params: list[BlockParams], extra: dict | None = None) -> Path:
    """Write ``block{i}.{name}.ftr`` files plus ``manifest.json``; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = []
    for i, p in enumerate(params):
        files = {}
        for name, t in p.tensors().items():
            fname = f"block{i}.{name}.ftr"
            write_tensor(directory / fname, t.data)
            files[name] = fname
        arch = "feater" if isinstance(p, FeatERBlockParams) else "vanilla"
        blocks.append({"index": i, "architecture": arch, "heads": p.heads, "tensors": files})
    manifest = {"format": "FTR1", "blocks": blocks}
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(manifest_path: str | os.PathLike) -> list[BlockParams]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    out: list[BlockParams] = []
    for entry in sorted(manifest["blocks"], key=lambda b: b["index"]):
        arrays = {name: read_tensor(manifest_path.parent / fname) for name, fname in entry["tensors"].items()}
        cls = FeatERBlockParams if entry["architecture"] == "feater" else VanillaBlockParams
        out.append(cls.from_arrays(arrays, heads=entry.get("heads", 1)))
    return out
