"""Operator entry points: train, infer, eval, bench.

Run configuration is a flat key=value text file with section prefixes
(model.C=16). Unknown keys, duplicates, and bad values are rejected with the
offending line number. The MANA_SEED environment variable overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    cross_frame_one_hot_attention,
    full_nonlocal_one_hot,
    measure_correlation_buffers,
)
from .data import (
    Clip,
    DataError,
    SynthSpec,
    load_frames,
    load_png_sequence,
    png_names,
    psnr,
    save_png,
    ssim,
    synth_clip,
)
from .model import (
    CheckpointError,
    ManaModel,
    ModelConfig,
    init_model,
    load_checkpoint,
    mana_forward,
    save_checkpoint,
)
from .ops import bilinear_upsample, window_valid_mask
from .tensor import NumericsError, TapeError, Tensor
from .training import StageSpec, TrainSchedule, desk_schedule, paper_schedule, run_three_stage


class ConfigError(ValueError):
    """Unparseable or invalid run configuration."""


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise ValueError("must be > 0")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if not v > 0.0:
        raise ValueError("must be > 0")
    return v


def _choice(*options):
    def convert(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return convert


# key -> (converter, default); None default means "unset"
CONFIG_SCHEMA = {
    "seed": (_nonneg_int, 0),
    "out.dir": (str, "runs/out"),
    "model.C": (_pos_int, 16),
    "model.T": (_pos_int, 7),
    "model.N": (_pos_int, 32),
    "model.enc_blocks": (_pos_int, 2),
    "model.dec_blocks": (_pos_int, 4),
    "model.window": (_pos_int, 9),
    "model.temporal_reduce": (_choice("sum", "mean", "global_max"), "sum"),
    "model.memory_enabled": (_parse_bool, True),
    "model.memory_query": (_choice("shared", "own"), "shared"),
    "train.preset": (_choice("desk", "paper"), "desk"),
    "train.stage1_iters": (_nonneg_int, None),
    "train.stage2_iters": (_nonneg_int, None),
    "train.stage3_iters": (_nonneg_int, None),
    "train.stage1_lr": (_pos_float, None),
    "train.stage2_lr": (_pos_float, None),
    "train.stage3_lr": (_pos_float, None),
    "train.log_every": (_nonneg_int, 0),
    "data.source": (_choice("synth", "dir"), "synth"),
    "data.dir": (str, None),
    "data.hr_dir": (str, None),
    "data.pattern": (_choice("checker", "stripes", "noise", "dots"), "stripes"),
    "data.hr_size": (_pos_int, 64),
    "data.velocity_x": (float, 4.0),
    "data.velocity_y": (float, 2.0),
    "data.clips": (_pos_int, 1),
    "data.holdout": (_nonneg_int, 1),
}


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    seed: int
    out_dir: str
    data_source: str
    data_dir: str | None
    hr_dir: str | None
    pattern: str
    hr_size: int
    velocity: tuple[float, float]
    clips: int
    holdout: int
    log_every: int
    resolved: dict = field(default_factory=dict)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, object] = {}
    lines_seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines_seen:
            raise ConfigError(
                f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines_seen[key]})"
            )
        lines_seen[key] = lineno
        converter = CONFIG_SCHEMA[key][0]
        try:
            values[key] = converter(val)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}") from e

    resolved = {k: (values[k] if k in values else d) for k, (_, d) in CONFIG_SCHEMA.items()}

    seed = resolved["seed"]
    env_seed = os.environ.get("MANA_SEED")
    if env_seed:
        try:
            seed = _nonneg_int(env_seed)
        except ValueError as e:
            raise ConfigError(f"MANA_SEED: {e}") from e
        resolved["seed"] = seed

    try:
        model = ModelConfig(
            channels=resolved["model.C"],
            frames=resolved["model.T"],
            memory_entries=resolved["model.N"],
            enc_blocks=resolved["model.enc_blocks"],
            dec_blocks=resolved["model.dec_blocks"],
            window=resolved["model.window"],
            temporal_reduce=resolved["model.temporal_reduce"],
            memory_enabled=resolved["model.memory_enabled"],
            memory_query=resolved["model.memory_query"],
        )
    except ValueError as e:
        raise ConfigError(f"{source}: invalid model configuration: {e}") from e

    base = desk_schedule() if resolved["train.preset"] == "desk" else paper_schedule()
    stages = []
    for i, spec in enumerate(base.stages(), start=1):
        iters = resolved[f"train.stage{i}_iters"]
        lr = resolved[f"train.stage{i}_lr"]
        stages.append(
            StageSpec(
                iterations=spec.iterations if iters is None else iters,
                lr=spec.lr if lr is None else lr,
            )
        )
    schedule = TrainSchedule(*stages)

    if resolved["data.source"] == "dir" and not resolved["data.dir"]:
        raise ConfigError(f"{source}: data.source=dir requires data.dir")

    return RunConfig(
        model=model,
        schedule=schedule,
        seed=seed,
        out_dir=resolved["out.dir"],
        data_source=resolved["data.source"],
        data_dir=resolved["data.dir"],
        hr_dir=resolved["data.hr_dir"],
        pattern=resolved["data.pattern"],
        hr_size=resolved["data.hr_size"],
        velocity=(resolved["data.velocity_x"], resolved["data.velocity_y"]),
        clips=resolved["data.clips"],
        holdout=resolved["data.holdout"],
        log_every=resolved["train.log_every"],
        resolved=resolved,
    )


def parse_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=str(path))


# ---------------------------------------------------------------------------
# shared inference helpers


def infer_center(model: ManaModel, lr_frames: np.ndarray) -> np.ndarray:
    """Raw model output (3, 4H, 4W) for one window of T frames, no tape."""
    return mana_forward(model, lr_frames).data


def _clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit export grid, so metrics match what the PNGs hold."""
    return np.rint(_clamp(img) * 255.0) / 255.0


def _bilinear4(frame: np.ndarray) -> np.ndarray:
    return _quantize(bilinear_upsample(Tensor(np.asarray(frame, dtype=np.float32)), 4).data)


def _synth_training_clips(rc: RunConfig, base_seed: int, count: int) -> list[Clip]:
    size = (rc.hr_size, rc.hr_size)
    return [
        synth_clip(
            SynthSpec(
                pattern=rc.pattern,
                hr_size=size,
                frames=rc.model.frames,
                velocity=rc.velocity,
                seed=base_seed + i,
            )
        )
        for i in range(count)
    ]


def _load_training_clips(rc: RunConfig) -> list[Clip]:
    if rc.data_source == "synth":
        return _synth_training_clips(rc, rc.seed, rc.clips)
    if rc.hr_dir is None:
        raise ConfigError("training from data.dir requires data.hr_dir ground truth")
    return [load_png_sequence(rc.data_dir, rc.model.frames, rc.hr_dir)]


def _clip_metrics(model: ManaModel, clip: Clip) -> tuple[float, float, float, float]:
    """(model psnr, model ssim, bilinear psnr, bilinear ssim) on the center frame."""
    out = _quantize(infer_center(model, clip.lr_frames))
    center = (clip.frames - 1) // 2
    base = _bilinear4(clip.lr_frames[center])
    return (
        psnr(out, clip.hr_center),
        ssim(out, clip.hr_center),
        psnr(base, clip.hr_center),
        ssim(base, clip.hr_center),
    )


def _write_metrics_csv(path, rows: list[tuple[str, str, float, float]]) -> None:
    by_method: dict[str, list[tuple[float, float]]] = {}
    with open(path, "w", encoding="utf-8") as f:
        f.write("clip,method,psnr_db,ssim\n")
        for clip_id, method, p, s in rows:
            f.write(f"{clip_id},{method},{p:.9f},{s:.9f}\n")
            by_method.setdefault(method, []).append((p, s))
        for method in sorted(by_method):
            ps = by_method[method]
            p = sum(v for v, _ in ps) / len(ps)
            s = sum(v for _, v in ps) / len(ps)
            f.write(f"aggregate,{method},{p:.9f},{s:.9f}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(config_path, dry_run: bool = False) -> int:
    rc = parse_config(config_path)
    if dry_run:
        for key in sorted(rc.resolved):
            print(f"{key} = {rc.resolved[key]}")
        model = init_model(rc.model, rc.seed)
        print(f"parameters = {model.parameter_count()}")
        return 0

    os.makedirs(rc.out_dir, exist_ok=True)
    model = init_model(rc.model, rc.seed)
    clips = _load_training_clips(rc)
    pairs = [(c.lr_frames, c.hr_center) for c in clips]
    print(
        f"training on {len(clips)} clip(s), schedule "
        f"{[s.iterations for s in rc.schedule.stages()]}, seed {rc.seed}",
        flush=True,
    )
    history = run_three_stage(model, pairs, rc.schedule, rc.seed, rc.log_every)

    ckpt_path = os.path.join(rc.out_dir, "checkpoint.mana")
    save_checkpoint(model, ckpt_path)
    loss_path = os.path.join(rc.out_dir, "loss.csv")
    with open(loss_path, "w", encoding="utf-8") as f:
        f.write("iteration,stage,loss\n")
        for it, stage, loss in history:
            f.write(f"{it},{stage},{loss:.10g}\n")

    rows: list[tuple[str, str, float, float]] = []
    if rc.holdout and rc.data_source == "synth":
        held = _synth_training_clips(rc, rc.seed + 1000, rc.holdout)
        for clip in held:
            mp, ms, bp, bs = _clip_metrics(model, clip)
            rows.append((clip.identifier, "model", mp, ms))
            rows.append((clip.identifier, "bilinear", bp, bs))
        _write_metrics_csv(os.path.join(rc.out_dir, "metrics.csv"), rows)
        for clip_id, method, p, s in rows:
            print(f"holdout {clip_id} {method}: psnr {p:.3f} dB, ssim {s:.5f}")
    print(f"wrote {ckpt_path}")
    return 0


def cmd_infer(checkpoint, in_dir, out_dir, pad_ends: bool = False) -> int:
    model = load_checkpoint(checkpoint)
    t_len = model.config.frames
    frames = load_frames(in_dir)
    names = png_names(in_dir)
    n = frames.shape[0]
    if n < t_len:
        raise DataError(f"insufficient frames: have {n}, need {t_len}")
    half = (t_len - 1) // 2
    if pad_ends:
        centers = list(range(n))
    else:
        centers = list(range(half, n - half))
    os.makedirs(out_dir, exist_ok=True)
    for j in centers:
        idx = np.clip(np.arange(j - half, j + half + 1), 0, n - 1)
        out = _clamp(infer_center(model, frames[idx]))
        stem = os.path.splitext(names[j])[0]
        save_png(os.path.join(out_dir, f"{stem}.png"), out)
    print(f"wrote {len(centers)} frame(s) to {out_dir}")
    return 0


def _clip_dirs(lr_root, hr_root) -> list[tuple[str, str, str]]:
    """(clip id, lr dir, hr dir) pairs; subdirectories if present, else the
    roots themselves as a single clip."""
    subs = sorted(
        d for d in os.listdir(lr_root) if os.path.isdir(os.path.join(lr_root, d))
    )
    if not subs:
        return [(os.path.basename(os.path.normpath(lr_root)), lr_root, hr_root)]
    pairs = []
    for d in subs:
        hr = os.path.join(hr_root, d)
        if not os.path.isdir(hr):
            raise DataError(f"unpaired data: no HR directory for clip {d!r}")
        pairs.append((d, os.path.join(lr_root, d), hr))
    return pairs


def cmd_eval(checkpoint, lr_dir, hr_dir, out_csv) -> int:
    model = load_checkpoint(checkpoint)
    t_len = model.config.frames
    half = (t_len - 1) // 2
    rows: list[tuple[str, str, float, float]] = []
    for clip_id, lr_d, hr_d in _clip_dirs(lr_dir, hr_dir):
        lr = load_frames(lr_d)
        hr = load_frames(hr_d)
        if lr.shape[0] != hr.shape[0]:
            raise DataError(
                f"unpaired data for {clip_id!r}: {lr.shape[0]} LR vs {hr.shape[0]} HR frames"
            )
        n = lr.shape[0]
        if n < t_len:
            raise DataError(f"insufficient frames in {lr_d}: have {n}, need {t_len}")
        mp, ms, bp, bs = [], [], [], []
        for j in range(half, n - half):
            out = _quantize(infer_center(model, lr[j - half : j + half + 1]))
            gt = hr[j]
            base = _bilinear4(lr[j])
            mp.append(psnr(out, gt))
            ms.append(ssim(out, gt))
            bp.append(psnr(base, gt))
            bs.append(ssim(base, gt))
        k = len(mp)
        rows.append((clip_id, "model", sum(mp) / k, sum(ms) / k))
        rows.append((clip_id, "bilinear", sum(bp) / k, sum(bs) / k))
    _write_metrics_csv(out_csv, rows)
    for clip_id, method, p, s in rows:
        print(f"{clip_id} {method}: psnr {p:.3f} dB, ssim {s:.5f}")
    print(f"wrote {out_csv}")
    return 0


def bench_sizes(
    sizes,
    frames: int,
    seed: int = 0,
    window: int = 9,
    max_full_elements: int = 1 << 20,
    embed_channels: int = 8,
) -> list[dict]:
    """Measured correlation-buffer element counts for both attention variants.

    The windowed count must equal HW*window^2*T exactly; the full variant is
    measured only while (HW)^2*T stays under ``max_full_elements``, otherwise
    its closed-form count is reported as a projection.
    """
    if frames < 1 or frames % 2 == 0:
        raise ValueError(f"frames must be odd and >= 1, got {frames}")
    rng = np.random.default_rng(seed)
    kk = window * window
    results = []
    for size in sizes:
        if size < 1:
            raise ValueError(f"bad size {size}")
        h = w = int(size)
        hw = h * w
        q = rng.standard_normal((embed_channels, h, w)).astype(np.float32)
        k = rng.standard_normal((embed_channels, frames, h, w)).astype(np.float32)
        v = rng.standard_normal((embed_channels, frames, h, w)).astype(np.float32)
        mask = window_valid_mask(h, w, window)

        with measure_correlation_buffers() as meter:
            t0 = time.perf_counter()
            cross_frame_one_hot_attention(Tensor(q), Tensor(k), Tensor(v), mask, "sum")
            win_seconds = time.perf_counter() - t0
        win_elems = meter.total
        expect_win = hw * kk * frames
        if win_elems != expect_win:
            raise RuntimeError(
                f"windowed correlation count {win_elems} != {expect_win} at H=W={size}"
            )

        full_expect = hw * hw * frames
        if full_expect <= max_full_elements:
            with measure_correlation_buffers() as meter:
                t0 = time.perf_counter()
                full_nonlocal_one_hot(q, k, v, mask, "sum")
                full_seconds = time.perf_counter() - t0
            full_elems = meter.total
            if full_elems != full_expect:
                raise RuntimeError(
                    f"full correlation count {full_elems} != {full_expect} at H=W={size}"
                )
            status = "measured"
        else:
            full_elems = full_expect
            full_seconds = None
            status = "skipped (projected)"

        results.append(
            dict(
                size=size,
                frames=frames,
                windowed_elements=win_elems,
                full_elements=full_elems,
                ratio=full_elems / win_elems,
                windowed_seconds=win_seconds,
                full_seconds=full_seconds,
                full_status=status,
            )
        )
    return results


def cmd_bench(sizes, frames: int, out_csv, max_full_elements: int = 1 << 20) -> int:
    env_seed = os.environ.get("MANA_SEED")
    seed = int(env_seed) if env_seed else 0
    results = bench_sizes(sizes, frames, seed=seed, max_full_elements=max_full_elements)
    with open(out_csv, "w", encoding="utf-8") as f:
        f.write(
            "size,frames,windowed_elements,full_elements,ratio,"
            "windowed_ms,full_ms,full_status\n"
        )
        for r in results:
            full_ms = "" if r["full_seconds"] is None else f"{1e3 * r['full_seconds']:.3f}"
            f.write(
                f"{r['size']},{r['frames']},{r['windowed_elements']},"
                f"{r['full_elements']},{r['ratio']:.6f},"
                f"{1e3 * r['windowed_seconds']:.3f},{full_ms},{r['full_status']}\n"
            )
    print("| H=W | T | windowed | full | ratio | windowed ms | full ms | status |")
    print("|----:|--:|---------:|-----:|------:|------------:|--------:|:-------|")
    for r in results:
        full_ms = "-" if r["full_seconds"] is None else f"{1e3 * r['full_seconds']:.2f}"
        print(
            f"| {r['size']} | {r['frames']} | {r['windowed_elements']} "
            f"| {r['full_elements']} | {r['ratio']:.2f} "
            f"| {1e3 * r['windowed_seconds']:.2f} | {full_ms} | {r['full_status']} |"
        )
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="manasr",
        description="Video super-resolution with one-hot cross-frame and memory attention.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the three-stage training pipeline")
    t.add_argument("--config", required=True, help="key=value run configuration file")
    t.add_argument(
        "--dry-run",
        action="store_true",
        help="print the resolved config and parameter count, touch no files",
    )

    i = sub.add_parser("infer", help="super-resolve a PNG sequence")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--in", dest="in_dir", required=True, metavar="DIR")
    i.add_argument("--out", dest="out_dir", required=True, metavar="DIR")
    i.add_argument(
        "--pad-ends",
        action="store_true",
        help="replicate sequence ends so every input frame gets an output",
    )

    e = sub.add_parser("eval", help="PSNR/SSIM against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--lr", dest="lr_dir", required=True, metavar="DIR")
    e.add_argument("--hr", dest="hr_dir", required=True, metavar="DIR")
    e.add_argument("--out", dest="out_csv", required=True, metavar="CSV")

    b = sub.add_parser("bench", help="correlation-buffer memory benchmark")
    b.add_argument("--sizes", default="8,16,32", help="comma-separated H=W sizes")
    b.add_argument("--frames", type=int, default=7)
    b.add_argument("--out", dest="out_csv", required=True, metavar="CSV")
    b.add_argument(
        "--max-full-elements",
        type=int,
        default=1 << 20,
        help="feasibility cutoff for materializing the full correlation",
    )
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, dry_run=args.dry_run)
        if args.command == "infer":
            return cmd_infer(args.checkpoint, args.in_dir, args.out_dir, args.pad_ends)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.lr_dir, args.hr_dir, args.out_csv)
        if args.command == "bench":
            try:
                sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
            except ValueError as e:
                raise ConfigError(f"bad --sizes value {args.sizes!r}") from e
            return cmd_bench(sizes, args.frames, args.out_csv, args.max_full_elements)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, CheckpointError, NumericsError, TapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
