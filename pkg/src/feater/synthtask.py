"""Desk-scale heatmap refinement task.

A FeatER stack learns to map corrupted Gaussian joint heatmaps back to the
clean ones while a second FeatER stack reconstructs randomly masked copies
of the refined maps. The objective is ``heatmap_mse + w3 * recon_mse``.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from feater.blocks import BlockStackConfig, FeatERBlockParams, init_stack_params, stack_forward
from feater.core import kernels as K
from feater.core.autograd import Tape, Tensor, as_tensor
from feater.core.rng import RngStream
from feater.errors import ConfigurationError, DimensionError, ParameterError
from feater.reconstruct import make_mask_plan, reconstruction_forward

DEFAULT_ADAM_LR = 2e-4


@dataclass
class HeatmapSpec:
    joints: Sequence[tuple[float, float]]  # (x, y) = (column, row) in pixels
    sigma: float
    h: int
    w: int

    @property
    def K(self) -> int:
        return len(self.joints)

    def validate(self) -> None:
        if self.K < 1:
            raise ParameterError("a heatmap spec needs at least one joint")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        for x, y in self.joints:
            if not (0 <= x < self.w and 0 <= y < self.h):
                raise ParameterError(f"joint ({x}, {y}) outside the {self.h}x{self.w} grid")


@dataclass
class PoseEstimate:
    coords: np.ndarray  # [K, D]
    confidence: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.coords.shape[0]


def default_sigma(h: int, w: int) -> float:
    """2 px on a 64x48 heatmap, scaled with the grid's linear size."""
    return 2.0 * math.sqrt((h * w) / (64 * 48))


def gaussian_heatmap_render(spec: HeatmapSpec) -> np.ndarray:
    """Unnormalised Gaussians, one ``[h, w]`` map per joint, peak 1 on the joint."""
    spec.validate()
    rows = np.arange(spec.h, dtype=np.float64)[:, None]
    cols = np.arange(spec.w, dtype=np.float64)[None, :]
    out = np.empty((spec.K, spec.h, spec.w))
    denom = 2.0 * spec.sigma ** 2
    for k, (x, y) in enumerate(spec.joints):
        out[k] = np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / denom)
    return out


def _shift(m: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = m.shape
    out = np.zeros_like(m)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = m[src_r, src_c]
    return out


def corrupt_heatmaps(x, noise_sigma: float, jitter: int, rng: RngStream) -> np.ndarray:
    """Translate each map by a random integer offset in ``[-jitter, jitter]``
    (zero padded), then add white Gaussian noise."""
    if noise_sigma < 0 or jitter < 0:
        raise ParameterError("noise_sigma and jitter must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    if jitter:
        offsets = rng.integers(-jitter, jitter, size=(x.shape[0], 2))
        for k, (dy, dx) in enumerate(offsets):
            out[k] = _shift(x[k], int(dy), int(dx))
    if noise_sigma:
        out = out + rng.normal(x.shape, noise_sigma)
    return out


def heatmap_mse_loss(pred, gt) -> Tensor:
    return K.mse(pred, gt)


def l1_pose_loss(j, gt) -> Tensor:
    """Mean over joints of the per-joint L1 distance; works for 2D or 3D joints."""
    a = j.coords if isinstance(j, PoseEstimate) else j
    b = gt.coords if isinstance(gt, PoseEstimate) else gt
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"joint counts differ: {a.shape[0]} vs {b.shape[0]}")
    return K.l1_rows(a, b)


def decode_argmax_pose(x) -> PoseEstimate:
    """Per-map argmax; ties go to the smallest row-major index."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    k, h, w = x.shape
    flat = x.reshape(k, h * w)
    idx = flat.argmax(axis=1)
    coords = np.stack([idx % w, idx // w], axis=1).astype(np.float64)
    return PoseEstimate(coords, flat[np.arange(k), idx].copy())


def mean_decode_error(pred_maps, joints: np.ndarray) -> float:
    est = decode_argmax_pose(pred_maps)
    return float(np.linalg.norm(est.coords - joints, axis=1).mean())


# training ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    lr: float | None = None
    seed: int = 0
    mask_ratio: float = 0.3
    w1: float = 0.01
    w2: float = 0.01
    w3: float = 0.005
    depth: int = 2
    n: int = 4
    h: int = 16
    w: int = 16
    heads: int = 1
    recon_depth: int = 1
    batch_size: int = 4
    eval_size: int = 16
    sigma: float | None = None
    noise_sigma: float = 0.1
    jitter: int = 1
    optimizer: str = "sgd"
    regenerate: bool = True

    def __post_init__(self):
        if self.lr is None:
            self.lr = DEFAULT_ADAM_LR if self.optimizer == "adam" else 0.05

    def validate(self) -> None:
        problems = []
        if self.steps < 0:
            problems.append("steps must be >= 0")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            problems.append("mask_ratio must lie in [0, 1)")
        if min(self.depth, self.recon_depth, self.batch_size, self.eval_size) < 1:
            problems.append("depth, recon_depth, batch_size and eval_size must be >= 1")
        if self.n < 2 or self.h < 2 or self.w < 2:
            problems.append("need n >= 2 and h, w >= 2")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.sigma is not None and not self.sigma > 0:
            problems.append("sigma must be positive")
        if self.noise_sigma < 0 or self.jitter < 0:
            problems.append("noise_sigma and jitter must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def heatmap_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.h, self.w)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    clean: list[np.ndarray]
    coarse: list[np.ndarray]
    joints: list[np.ndarray]


def make_batch(cfg: TrainConfig, size: int, rng: RngStream) -> Batch:
    clean, coarse, joints = [], [], []
    for b in range(size):
        sub = rng.substream(f"sample{b}")
        xs = sub.integers(0, cfg.w - 1, size=cfg.n)
        ys = sub.integers(0, cfg.h - 1, size=cfg.n)
        spec = HeatmapSpec(list(zip(xs.tolist(), ys.tolist())), cfg.heatmap_sigma, cfg.h, cfg.w)
        maps = gaussian_heatmap_render(spec)
        clean.append(maps)
        coarse.append(corrupt_heatmaps(maps, cfg.noise_sigma, cfg.jitter, sub.substream("corrupt")))
        joints.append(np.stack([xs, ys], axis=1).astype(np.float64))
    return Batch(clean, coarse, joints)


@dataclass
class ToyModel:
    refine_cfg: BlockStackConfig
    refine: list[FeatERBlockParams]
    recon_cfg: BlockStackConfig
    recon: list[FeatERBlockParams]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for tag, blocks in (("refine", self.refine), ("recon", self.recon)):
            for i, p in enumerate(blocks):
                for name, t in p.tensors().items():
                    out[f"{tag}{i}.{name}"] = t
        return out


def build_model(cfg: TrainConfig) -> ToyModel:
    root = RngStream(cfg.seed, "toy")
    refine_cfg = BlockStackConfig(cfg.depth, "feater", cfg.n, cfg.h, cfg.w, heads=cfg.heads, seed=cfg.seed)
    recon_cfg = BlockStackConfig(cfg.recon_depth, "feater", cfg.n, cfg.h, cfg.w, heads=cfg.heads, seed=cfg.seed)
    return ToyModel(
        refine_cfg,
        init_stack_params(refine_cfg, root.substream("init-refine")),
        recon_cfg,
        init_stack_params(recon_cfg, root.substream("init-recon")),
    )


def objective(model: ToyModel, cfg: TrainConfig, batch: Batch, mask_rng: RngStream):
    """Batch-mean ``(total, heatmap, recon)`` losses and refined maps."""
    hm_terms, rec_terms, refined = [], [], []
    for b, (coarse, clean) in enumerate(zip(batch.coarse, batch.clean)):
        out = stack_forward(coarse, model.refine_cfg, model.refine)
        plan = make_mask_plan(cfg.n, cfg.mask_ratio, mask_rng.substream(f"sample{b}"))
        _, rec = reconstruction_forward(out, model.recon_cfg, model.recon, plan, mode="train")
        hm_terms.append(heatmap_mse_loss(out, clean))
        rec_terms.append(rec)
        refined.append(out)
    scale = 1.0 / len(hm_terms)
    hm = K.mul(_sum(hm_terms), scale)
    rec = K.mul(_sum(rec_terms), scale)
    total = K.add(hm, K.mul(rec, cfg.w3))
    return total, hm, rec, refined


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = K.add(acc, t)
    return acc


def evaluate(model: ToyModel, cfg: TrainConfig, batch: Batch, mask_rng: RngStream) -> dict:
    total, hm, rec, refined = objective(model, cfg, batch, mask_rng)
    errs = [mean_decode_error(r, j) for r, j in zip(refined, batch.joints)]
    return {
        "total_loss": total.item(),
        "heatmap_loss": hm.item(),
        "recon_loss": rec.item(),
        "decode_err_px": float(np.mean(errs)),
    }


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name, np.zeros_like(g)) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, np.zeros_like(g)) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainRecord:
    config: dict
    losses: list[dict] = field(default_factory=list)
    initial_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    model: ToyModel | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(row) + "\n" for row in self.losses)

    def summary(self) -> dict:
        return {"config": self.config, "initial": self.initial_metrics, "final": self.final_metrics}


def train_toy(cfg: TrainConfig) -> TrainRecord:
    """Plain SGD (or Adam) on the refinement + reconstruction objective.

    ``losses`` holds one entry per step, measured on that step's batch
    before its update, plus a trailing entry after the last update. Initial
    and final metrics use a fixed held-out batch and fixed masks.
    """
    cfg.validate()
    model = build_model(cfg)
    params = model.parameters()
    root = RngStream(cfg.seed, "toy")
    eval_batch = make_batch(cfg, cfg.eval_size, root.substream("eval-data"))
    eval_masks = root.substream("eval-mask")
    data_rng, mask_rng = root.substream("train-data"), root.substream("train-mask")
    fixed = None if cfg.regenerate else make_batch(cfg, cfg.batch_size, data_rng.substream("fixed"))
    adam = _Adam(cfg.lr) if cfg.optimizer == "adam" else None

    record = TrainRecord(config=cfg.to_dict(), model=model)
    record.initial_metrics = evaluate(model, cfg, eval_batch, eval_masks)
    for step in range(cfg.steps + 1):
        batch = fixed or make_batch(cfg, cfg.batch_size, data_rng.substream(f"step{step}"))
        step_masks = mask_rng.substream(f"step{step}")
        if step == cfg.steps:
            total, hm, rec, _ = objective(model, cfg, batch, step_masks)
        else:
            with Tape() as tape:
                total, hm, rec, _ = objective(model, cfg, batch, step_masks)
            tape.backward(total)
        record.losses.append(
            {"step": step, "total_loss": total.item(), "heatmap_loss": hm.item(), "recon_loss": rec.item()}
        )
        if step == cfg.steps:
            break
        if adam is not None:
            adam.step(params)
        else:
            for p in params.values():
                p.data -= cfg.lr * p.grad
    record.final_metrics = evaluate(model, cfg, eval_batch, eval_masks)
    return record


def _ablate_one(args):
    ratio, base = args
    cfg = TrainConfig.from_dict({**base, "mask_ratio": ratio})
    rec = train_toy(cfg)
    return ratio, rec.final_metrics["decode_err_px"], rec.final_metrics["recon_loss"]


def ablate_mask_ratio(ratios: Sequence[float], base: TrainConfig, jobs: int = 1) -> list[tuple[float, float, float]]:
    """One seeded ``train_toy`` run per ratio; rows sorted by ratio."""
    if not ratios:
        raise ParameterError("need at least one masking ratio")
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ParameterError(f"masking ratio {r} outside [0, 1)")
    work = [(float(r), base.to_dict()) for r in ratios]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablate_one, work))
    else:
        rows = [_ablate_one(w) for w in work]
    return sorted(rows, key=lambda row: row[0])


def ablation_csv(rows) -> str:
    lines = ["ratio,decode_err_px,recon_loss"]
    lines += [f"{r!r},{e!r},{l!r}" for r, e, l in rows]
    return "\n".join(lines) + "\n"


def default_jobs() -> int:
    return os.cpu_count() or 1
