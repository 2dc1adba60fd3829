"""Command-line interface: train, denoise, estimate, deblur, atoms, eval.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage
error.  All randomness derives from --seed, so identical invocations on
identical files produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .data import build_patch_dataset, list_images, load_image, psnr, save_image
from .deblur import DeblurProblem, hqs_deblur, load_kernel
from .linalg import Tensor, no_grad
from .model import (
    ModelConfig, WinnetModel, denoise, denoise_blind, load_model, save_model,
    visualize_atom,
)
from .nenet import estimate_noise_level
from .train import TrainConfig, train_nenet, train_winnet


def _read_config_file(path) -> dict:
    """Flat key=value lines mirroring TrainConfig fields; '#' comments."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key not in _CONFIG_TYPES:
        raise ValueError(f"unknown config key {key!r}")
    kind = _CONFIG_TYPES[key]
    if kind in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    overrides = {}
    if args.config:
        for key, raw in _read_config_file(args.config).items():
            overrides[key] = _coerce(key, raw)
    for key in ("sigma", "blind", "epochs", "batch", "seed", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    merged = {**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}, **overrides}
    return TrainConfig(**merged)


def _load_model_arg(path) -> WinnetModel:
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file not found: {path}")
    return load_model(path)


def _load_input(path) -> Tensor:
    if not os.path.exists(path):
        raise FileNotFoundError(f"input image not found: {path}")
    return load_image(path)


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = build_patch_dataset(args.data, patch=args.patch_size,
                                  stride=args.patch_stride, count=args.patches,
                                  seed=config.seed)
    model_config = None
    if args.small:
        model_config = ModelConfig(
            K=1, M=2, J=2, width=16, lista_atoms=32, blind=config.blind,
            sigma_ref=25.0 if config.blind else config.sigma)
    model, log = train_winnet(config, dataset, model_config=model_config,
                              checkpoint_dir=args.checkpoint_dir)
    save_model(model, args.out)
    _emit_lines(log, args.log)
    print(f"saved model to {args.out}")
    return 0


def cmd_train_nenet(args) -> int:
    config = _train_config(args)
    model = _load_model_arg(args.model)
    dataset = build_patch_dataset(args.data, patch=args.patch_size,
                                  stride=args.patch_stride, count=args.patches,
                                  seed=config.seed)
    senet, log = train_nenet(config, dataset, model_config=model.config)
    for dst, src in zip(model.nenet.convs, senet.convs):
        dst.data[:] = src.data
    model.nenet.head.data[:] = senet.head.data
    save_model(model, args.out)
    _emit_lines(log, args.log)
    print(f"saved model with trained estimator to {args.out}")
    return 0


def cmd_denoise(args) -> int:
    model = _load_model_arg(args.model)
    img = _load_input(args.input)
    with no_grad():
        if args.blind:
            out, sigma_hat = denoise_blind(img, model)
            print(f"estimated sigma {sigma_hat:.4f}")
        else:
            out = denoise(img, args.sigma, model)
    save_image(out, args.output)
    return 0


def cmd_estimate(args) -> int:
    img = _load_input(args.input)
    nenet = None
    if args.model:
        nenet = _load_model_arg(args.model).nenet
    sigma = estimate_noise_level(img, nenet)
    print(f"{sigma:.4f}")
    return 0


def cmd_deblur(args) -> int:
    model = _load_model_arg(args.model)
    img = _load_input(args.input)
    kernel = load_kernel(args.kernel)
    problem = DeblurProblem(img.data, kernel, lam=args.lam, max_iters=args.max_iters)
    out, trace = hqs_deblur(problem, model)
    save_image(out[None], args.output)
    for t in trace:
        print(f"iter={t.iteration}\tbeta={t.beta:.4f}\talpha={t.alpha:.6f}"
              f"\tforced={int(t.forced_decay)}")
    return 0


def cmd_atoms(args) -> int:
    model = _load_model_arg(args.model)
    raw, normalized = visualize_atom(model, args.level, args.channel,
                                     args.amplitude, size=args.size)
    # map [-1, 1] onto the 8-bit range for viewing
    save_image((normalized.data[0] + 1.0) * 127.5, args.output)
    if args.raw_output:
        np.save(args.raw_output, raw.data)
    return 0


def _emit_lines(lines: List[str], path: Optional[str]):
    if path:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)


def emit_report(results: List[Tuple[str, float]], path: Optional[str] = None) -> List[str]:
    """Tab-separated per-image PSNR rows plus a MEAN row, sorted by name."""
    if not results:
        raise ValueError("no image pairs to report")
    rows = [f"{name}\t{value:.2f}" for name, value in sorted(results)]
    mean = float(np.mean([value for _, value in results]))
    rows.append(f"MEAN\t{mean:.2f}")
    if path:
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
    return rows


def cmd_eval(args) -> int:
    clean_paths = {os.path.basename(p): p for p in list_images(args.clean)}
    noisy_paths = {os.path.basename(p): p for p in list_images(args.noisy)}
    common = sorted(set(clean_paths) & set(noisy_paths))
    if not common:
        raise ValueError(f"no matching image names between {args.clean} and {args.noisy}")
    results = []
    for name in common:
        a = load_image(clean_paths[name])
        b = load_image(noisy_paths[name])
        results.append((name, psnr(a, b)))
    for row in emit_report(results, args.report):
        print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="winnet",
        description="Invertible lifting-based image denoising and deblurring")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train_common(p):
        p.add_argument("--data", required=True, help="directory of grayscale images")
        p.add_argument("--out", required=True, help="output model path")
        p.add_argument("--config", help="key=value config file (flags override)")
        p.add_argument("--sigma", type=float, default=None)
        p.add_argument("--blind", action="store_const", const=True, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--patches", type=int, default=None, help="cap on patch count")
        p.add_argument("--patch-size", type=int, default=40)
        p.add_argument("--patch-stride", type=int, default=20)
        p.add_argument("--log", help="write the metrics log to this file")

    p = sub.add_parser("train", help="train a denoising model")
    add_train_common(p)
    p.add_argument("--small", action="store_true",
                   help="reduced architecture (M=2, J=2, width 16) for desk-scale runs")
    p.add_argument("--checkpoint-dir", help="write per-epoch checkpoints here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-nenet", help="train the noise estimator of a model")
    add_train_common(p)
    p.add_argument("--model", required=True, help="model whose estimator to train")
    p.set_defaults(func=cmd_train_nenet)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--sigma", type=float)
    group.add_argument("--blind", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("estimate", help="estimate the noise level of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--model", help="use this model's trained estimator")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("deblur", help="plug-and-play deblurring")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--kernel", required=True, help="text-matrix kernel file")
    p.add_argument("--output", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.23)
    p.add_argument("--max-iters", type=int, default=30)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("atoms", help="visualize one reconstruction atom")
    p.add_argument("--model", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--output", required=True)
    p.add_argument("--raw-output", help="also save the raw atom as .npy")
    p.set_defaults(func=cmd_atoms)

    p = sub.add_parser("eval", help="PSNR report over two directories")
    p.add_argument("--clean", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--report", help="write the report to this file")
    p.set_defaults(func=cmd_eval)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
