"""Command-line surface: synthesize, train, selfsim, eval.

Exit codes: 0 ok, 2 usage/shape/config errors, 3 missing artifact, 4 numeric
failure. All commands honor --seed; TXSP_THREADS (default 1) sets the number
of image-decode workers for training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_generator_weights, save_generator_weights
from .expansion import make_noise_maps
from .generator import (
    INPUT_DIVISOR,
    generator_forward,
    generator_forward_noise,
    synthesize_4x,
)
from .imageio import load_image, save_grayscale_png, save_image_png
from .losses import LossWeights
from .metrics import PyramidEmbedder, crop_eval, ssim
from .selfsim import selfsim_fast
from .tensor import NumericError, ShapeError, Tensor
from .training import (
    DatasetError,
    IntegrityError,
    TrainConfig,
    TrainState,
    checkpoint_load,
    load_dataset,
    train_loop,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Invalid run-config key or value."""


# ---------------------------------------------------------------------------
# run config file (key = value lines)
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "h": int, "w": int, "batch_size": int, "lr0": float, "lr_decay_every": int,
    "lr_decay_factor": float, "epochs": int, "seed": int, "base_width": int,
    "width_multiplier": float,
    "optimizer": str, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "checkpoint_every": int, "extractor_seed": int,
    "w_perceptual": float, "w_style": float, "w_gan": float,
}


def parse_config_file(path) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip().strip('"')
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {e}") from e
    return values


def build_train_config(values: dict) -> TrainConfig:
    weights = LossWeights(
        perceptual=values.pop("w_perceptual", LossWeights().perceptual),
        style=values.pop("w_style", LossWeights().style),
        gan=values.pop("w_gan", LossWeights().gan))
    cfg = TrainConfig(loss_weights=weights, **values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _snap_noise_size(h: int, t_req: int) -> tuple[int, int]:
    """(n5, achievable size) nearest to the requested noise-mode target."""
    n5 = max(1, round((t_req - h + 16) / 16))
    return n5, 16 * n5 + h - 16


def cmd_synthesize(args) -> int:
    weights_path = Path(args.weights)
    if not weights_path.exists():
        print(f"error: weights file not found: {weights_path}", file=sys.stderr)
        return EXIT_MISSING
    img = load_image(args.input)
    if img.h % INPUT_DIVISOR or img.w % INPUT_DIVISOR:
        print(f"error: input dims {img.h}x{img.w} must be multiples of "
              f"{INPUT_DIVISOR}", file=sys.stderr)
        return EXIT_USAGE
    weights = load_generator_weights(weights_path)

    if args.mode == "selfsim":
        if args.scale == 2.0:
            out = generator_forward(img, weights)
        elif args.scale == 4.0:
            out = synthesize_4x(img, weights)
        else:
            print("error: self-similarity mode supports --scale 2 or 4 only "
                  "(a single pass is bounded by the score-map size)", file=sys.stderr)
            return EXIT_USAGE
    else:
        rng = np.random.default_rng(args.seed)
        n5 = []
        for side, name in ((img.h, "height"), (img.w, "width")):
            t_req = args.scale * side
            if abs(t_req - round(t_req)) > 1e-9:
                t_req_i = None
            else:
                t_req_i = int(round(t_req))
            achievable = (t_req_i is not None and t_req_i >= side
                          and (t_req_i - side + 16) % 16 == 0)
            if not achievable and not args.snap:
                _, nearest = _snap_noise_size(side, int(round(t_req)))
                print(f"error: {name} target {t_req} is not achievable; sizes follow "
                      f"16*n5 + {side} - 16 (nearest: {nearest}); pass --snap to round",
                      file=sys.stderr)
                return EXIT_USAGE
            if achievable:
                n5.append((t_req_i - side + 16) // 16)
            else:
                n5.append(_snap_noise_size(side, int(round(t_req)))[0])
        maps = make_noise_maps((n5[0], n5[1]), rng)
        out = generator_forward_noise(img, weights, maps)

    out = Tensor(np.clip(out.data, 0.0, 1.0))
    save_image_png(args.out, out)
    print(f"wrote {args.out} ({out.h}x{out.w})")
    return EXIT_OK


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    for key in ("epochs", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = build_train_config(values)

    workers = int(os.environ.get("TXSP_THREADS", "1"))
    dataset = load_dataset(args.data, 2 * cfg.h, 2 * cfg.w, decode_workers=workers)

    if args.resume:
        state = checkpoint_load(args.resume)
    else:
        state = TrainState.fresh(cfg)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    log_fh = open(log_path, "a")

    def log_fn(epoch, report):
        rec = {"epoch": epoch, **report.to_dict()}
        log_fh.write(json.dumps(rec) + "\n")

    try:
        reports = train_loop(dataset, state, out_dir, log_fn=log_fn)
    finally:
        log_fh.close()
    save_generator_weights(out_dir / "generator.weights", state.gen)
    print(f"trained {len(reports)} steps over {state.epoch} epochs; "
          f"weights at {out_dir / 'generator.weights'}")
    return EXIT_OK


def cmd_selfsim(args) -> int:
    weights_path = Path(args.weights)
    if not weights_path.exists():
        print(f"error: weights file not found: {weights_path}", file=sys.stderr)
        return EXIT_MISSING
    img = load_image(args.input)
    weights = load_generator_weights(weights_path)
    from .generator import encoder_forward

    feats = encoder_forward(img, weights)
    m = selfsim_fast(feats[args.scale])
    save_grayscale_png(args.out, m.scores.data[0, 0])
    print(f"wrote {args.out} ({m.scores.h}x{m.scores.w})")
    return EXIT_OK


def cmd_eval(args) -> int:
    a = load_image(args.a)
    b = load_image(args.b)
    rng = np.random.default_rng(args.seed)
    embedder = PyramidEmbedder()
    if args.metric == "ssim":
        value = ssim(a, b)
        protocol = "full-image"
    else:
        crop_size = None
        if args.crop_size:
            crop_size = (args.crop_size, args.crop_size)
        protocol_name = "cfid" if args.metric == "cfid" else "clpips"
        value = crop_eval(a, b, embedder, protocol_name, rng, crop_size=crop_size)
        protocol = f"{protocol_name}-8crop"
    report = {"metric": args.metric, "value": value, "protocol": protocol,
              "seed": args.seed, "embedder-id": embedder.ident}
    if args.metric != "ssim":
        report["note"] = ("embedder is the shipped fixed random pyramid: scores are "
                          "internally comparable, not comparable to pretrained-network "
                          "LPIPS/FID values")
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texsyn",
                                description="texture synthesis by self-similarity-"
                                            "guided transposed convolution")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="expand a texture image")
    s.add_argument("--input", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=["selfsim", "noise"], default="selfsim")
    s.add_argument("--scale", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snap", action="store_true",
                   help="round a noise-mode target to the nearest achievable size")
    s.set_defaults(fn=cmd_synthesize)

    t = sub.add_parser("train", help="train on a directory of texture images")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("selfsim", help="write a similarity map as grayscale PNG")
    m.add_argument("--input", required=True)
    m.add_argument("--weights", required=True)
    m.add_argument("--scale", type=int, choices=[4, 8, 16], required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_selfsim)

    e = sub.add_parser("eval", help="compare two images")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--metric", choices=["ssim", "cfid", "clpips"], required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--crop-size", type=int, default=None)
    e.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ConfigError, DatasetError, IntegrityError, ArchiveError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
