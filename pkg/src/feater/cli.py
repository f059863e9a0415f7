"""``feater`` command line: cost | gradcheck | train | ablate | dump.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from feater import blocks, costmodel, synthtask
from feater.core import kernels as K
from feater.core.gradcheck import DEFAULT_EPS, grad_check
from feater.core.rng import RngStream
from feater.core.serial import read_tensor
from feater.errors import FeaterError

SEED_ENV = "FEATER_SEED"
GRADCHECK_TOLERANCE = 1e-5


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ratios(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratio list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="feater", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cost", help="analytical MAC/parameter report")
    p.add_argument("--arch", choices=("feater", "vanilla"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--pretty", action="store_true", help="append an aligned text table")
    p.add_argument("--time", action="store_true", help="also time one uninstrumented forward pass")

    p = sub.add_parser("gradcheck", help="finite-difference check of one block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=("feater", "vanilla"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--out")

    p = sub.add_parser("train", help="toy heatmap-refinement training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretty", action="store_true")

    p = sub.add_parser("ablate", help="masking-ratio sweep")
    p.add_argument("--ratios", type=_ratios, required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("dump", help="write each channel of an FTR1 stack to its own file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--out", required=True)
    return parser


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 10)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be a decimal integer, got {raw!r}")


def _load_config(path: str) -> synthtask.TrainConfig:
    data = json.loads(Path(path).read_text())
    seed = _env_seed()
    if seed is not None:
        data["seed"] = seed
    cfg = synthtask.TrainConfig.from_dict(data)
    cfg.validate()
    return cfg


def _write(path: str | Path, text: str) -> str:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


# subcommands ------------------------------------------------------------------

def _cmd_cost(args) -> CommandResult:
    if args.arch == "feater":
        if args.height is None or args.width is None:
            raise UsageError("cost --arch feater needs --height and --width")
        report = costmodel.macs_feater_block(args.n, args.height, args.width)
        shape = {"n": args.n, "h": args.height, "w": args.width}
    else:
        d = args.dim
        if d is None:
            if args.height is None or args.width is None:
                raise UsageError("cost --arch vanilla needs --dim (or --height and --width)")
            d = args.height * args.width
        report = costmodel.macs_vanilla_block(args.n, d)
        shape = {"n": args.n, "d": d}
    payload = {"arch": args.arch, "shape": shape, **costmodel.stack_report(report, args.depth)}
    payload["total_gmacs"] = costmodel.giga(payload["total_macs"])
    if args.time:
        payload["forward_seconds"] = _time_forward(args.arch, shape, args.depth)
    text = json.dumps(payload, indent=2)
    if args.pretty:
        text += "\n" + report.to_text()
    artifacts = [_write(args.out, json.dumps(payload, indent=2) + "\n")] if args.out else []
    return CommandResult(0, artifacts, text)


def _time_forward(arch: str, shape: dict, depth: int) -> float:
    cfg = blocks.BlockStackConfig(depth, arch, shape["n"], shape.get("h"), shape.get("w"), shape.get("d"))
    params = blocks.init_stack_params(cfg)
    rng = RngStream(0, "time-input")
    x = rng.normal((shape["n"], shape["h"], shape["w"]) if arch == "feater" else (shape["n"], shape["d"]))
    start = time.perf_counter()
    blocks.stack_forward(x, cfg, params)
    return time.perf_counter() - start


def gradcheck_block(arch: str, n: int, h: int, w: int, seed: int = 0, heads: int = 1, eps: float = DEFAULT_EPS):
    """Grad-check ``mse(block(x), target)`` over every parameter group and the input."""
    rng = RngStream(seed, "gradcheck")
    if arch == "feater":
        params = blocks.FeatERBlockParams.init(n, h, w, heads, rng.substream("init"))
        x = rng.substream("input").normal((n, h, w))
    else:
        params = blocks.VanillaBlockParams.init(h * w, heads, rng.substream("init"))
        x = rng.substream("input").normal((n, h * w))
    # perturb the zero-initialised biases and unit gains so every group is exercised
    noise = rng.substream("affine")
    for name, t in params.tensors().items():
        if not name.startswith("w_"):
            t.data += noise.normal(t.shape, 0.1)
    target = rng.substream("target").normal(x.shape)
    inp = blocks.Tensor(x, requires_grad=True)
    groups = {**params.tensors(), "input": inp}
    return grad_check(lambda: K.mse(blocks.block_forward(inp, params), target), groups, eps=eps,
                      tolerance=GRADCHECK_TOLERANCE, rng=rng.substream("subsample"))


def _cmd_gradcheck(args) -> CommandResult:
    report = gradcheck_block(args.arch, args.n, args.height, args.width, args.seed, args.heads, args.eps)
    text = json.dumps(report.to_dict(), indent=2)
    artifacts = [_write(args.out, text + "\n")] if args.out else []
    return CommandResult(0 if report.passed else 1, artifacts, text)


def _cmd_train(args) -> CommandResult:
    cfg = _load_config(args.config)
    record = synthtask.train_toy(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = [_write(out / "record.jsonl", record.to_jsonl())]
    ckpt = out / "checkpoint"
    recon_manifest = blocks.save_checkpoint(ckpt / "recon", record.model.recon, {"role": "reconstruction"})
    manifest = blocks.save_checkpoint(
        ckpt, record.model.refine, {"role": "refinement", "reconstruction_manifest": "recon/manifest.json"}
    )
    artifacts += [str(manifest), str(recon_manifest)]
    summary = record.summary()
    artifacts.append(_write(out / "summary.json", json.dumps(summary, indent=2) + "\n"))
    text = json.dumps(summary, indent=2)
    if args.pretty:
        i, f = record.initial_metrics, record.final_metrics
        text += "\n" + "\n".join(f"{k:<14} {i[k]:>12.6g} -> {f[k]:.6g}" for k in i)
    return CommandResult(0, artifacts, text)


def _cmd_ablate(args) -> CommandResult:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = _load_config(args.config)
    rows = synthtask.ablate_mask_ratio(args.ratios, cfg, jobs=args.jobs)
    csv = synthtask.ablation_csv(rows)
    return CommandResult(0, [_write(args.out, csv)], csv.rstrip("\n"))


def dump_channels(stack: np.ndarray, fmt: str, out_dir: str | Path) -> list[str]:
    if stack.ndim != 3:
        raise FeaterError(f"dump expects a [n, h, w] stack, got shape {stack.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ch in enumerate(stack):
        path = out_dir / f"channel{i:03d}.{fmt}"
        if fmt == "csv":
            path.write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in ch))
        else:
            lo, hi = float(ch.min()), float(ch.max())
            scaled = np.zeros(ch.shape) if hi == lo else (ch - lo) / (hi - lo) * 255.0
            pixels = np.rint(scaled).astype(np.uint8)
            h, w = ch.shape
            path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
        paths.append(str(path))
    return paths


def read_csv_channel(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _cmd_dump(args) -> CommandResult:
    paths = dump_channels(read_tensor(args.input), args.format, args.out)
    return CommandResult(0, paths, json.dumps({"files": paths}))


COMMANDS = {
    "cost": _cmd_cost,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "dump": _cmd_dump,
}


def run(argv: list[str] | None = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return CommandResult(2, [], str(exc))
    except (FeaterError, ValueError, TypeError) as exc:
        # bad values inside a config file or flag combination
        return CommandResult(2, [], f"feater: error: {exc}")
    except OSError as exc:
        return CommandResult(1, [], f"feater: I/O error: {exc}")


def main(argv: list[str] | None = None) -> int:
    result = run(argv)
    stream = sys.stdout if result.exit_code == 0 else sys.stderr
    if result.summary:
        print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
