"""Command-line entry point: phantom generation, training, evaluation, prediction.

Config files are INI text with [model], [train], and [augment] sections of
`key = value` lines; unknown sections or keys are rejected by name. Every
command is reproducible: flags, config, and seed fully determine all output
bytes. Exit codes: 0 ok, 2 usage/config error, 3 training abort, 4 data
geometry mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import phantom
from .checkpoint import Checkpoint, load_checkpoint, restore_model
from .dataset import (
    CineClip,
    Manifest,
    MaskClip,
    load_clip,
    load_manifest,
    split_manifest,
    write_manifest,
)
from .metrics import ClipMetrics, MetricsReport, binarize, evaluate_clip, stratified_report, write_report
from .model import ModelConfig, build_model
from .preprocess import AugmentConfig
from .train import (
    MODES,
    TrainConfig,
    TrainingAborted,
    load_split_samples,
    preprocess_sample,
    train_loop,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAIN_ABORT = 3
EXIT_DATA_MISMATCH = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class DataGeometryError(CliError):
    def __init__(self, message: str):
        super().__init__(message, code=EXIT_DATA_MISMATCH)


# ---------------------------------------------------------------- config file

def _cast_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _cast_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


def _cast_float_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return (parts[0], parts[1])


def _cast_crop(text: str):
    if text.strip().lower() in ("", "none", "off"):
        return None
    parts = _cast_int_tuple(text)
    if len(parts) != 2:
        raise ValueError(f"expected `H,W` or `none`, got {text!r}")
    return parts


_CAST_OVERRIDES = {
    "encoder_channels": _cast_int_tuple,
    "contrast_range": _cast_float_pair,
    "brightness_range": _cast_float_pair,
    "crop_size": _cast_crop,
}


def _caster_for(cls, name: str):
    if name in _CAST_OVERRIDES:
        return _CAST_OVERRIDES[name]
    default = getattr(cls(), name)
    if isinstance(default, bool):
        return _cast_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _apply_section(cls, section: str, items, skip=()) -> dict:
    known = {f.name for f in fields(cls)} - set(skip)
    values = {}
    for key, raw in items:
        if key not in known:
            raise CliError(f"unknown config key [{section}] {key}")
        try:
            values[key] = _caster_for(cls, key)(raw)
        except ValueError as exc:
            raise CliError(f"bad value for [{section}] {key}: {exc}") from exc
    return values


def parse_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path, encoding="utf-8")
    for section in parser.sections():
        if section not in ("model", "train", "augment"):
            raise CliError(f"unknown config section [{section}]")

    model_values = _apply_section(
        ModelConfig, "model", parser.items("model") if parser.has_section("model") else []
    )
    train_values = _apply_section(
        TrainConfig,
        "train",
        parser.items("train") if parser.has_section("train") else [],
        skip=("augment", "augment_enabled"),
    )
    augment_items = list(parser.items("augment")) if parser.has_section("augment") else []
    augment_enabled = True
    filtered = []
    for key, raw in augment_items:
        if key == "enabled":
            augment_enabled = _cast_bool(raw)
        else:
            filtered.append((key, raw))
    augment_values = _apply_section(AugmentConfig, "augment", filtered)

    try:
        model_config = ModelConfig(**model_values)
        model_config.validate()
        train_config = TrainConfig(
            **train_values,
            augment_enabled=augment_enabled,
            augment=AugmentConfig(**augment_values),
        )
        train_config.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return model_config, train_config


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def write_config(path: str | Path, model_config: ModelConfig, train_config: TrainConfig) -> None:
    """Echo the effective (defaults-merged) config; re-running from this file
    reproduces the run."""
    lines = ["[model]"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {_format_value(getattr(model_config, f.name))}")
    lines.append("")
    lines.append("[train]")
    for f in fields(TrainConfig):
        if f.name in ("augment", "augment_enabled"):
            continue
        lines.append(f"{f.name} = {_format_value(getattr(train_config, f.name))}")
    lines.append("")
    lines.append("[augment]")
    lines.append(f"enabled = {_format_value(train_config.augment_enabled)}")
    for f in fields(AugmentConfig):
        lines.append(f"{f.name} = {_format_value(getattr(train_config.augment, f.name))}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ------------------------------------------------------------------ commands

def _load_data_manifest(data: str | Path) -> Manifest:
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    return load_manifest(path)


def cmd_phantom(args) -> int:
    slice_positions = tuple(args.slice_positions.split(","))
    for sp in slice_positions:
        if sp not in phantom.RADIUS_SCALES:
            raise CliError(f"unknown slice position {sp!r}")
    base = phantom.default_params_for_size(args.size, args.phases)
    if args.spec_file:
        specs = phantom.read_scan_specs(args.spec_file, base=base)
    else:
        views = {"sax": ("SAX",), "lax": ("LAX",), "both": ("SAX", "LAX")}[args.views]
        pairs = tuple((v, sp) for v in views for sp in slice_positions)
        jitter = phantom.default_jitter_for_size(args.size)
        specs = [
            phantom.ScanSpec(
                scan_id=f"scan{i:03d}",
                seed=phantom.derive_seed(args.seed, "scan", i),
                views=pairs,
                base=base,
                jitter=jitter,
            )
            for i in range(args.scans)
        ]
    manifest = phantom.generate_dataset(specs, args.out)
    if args.train_fraction is not None:
        manifest = split_manifest(manifest, args.train_fraction, args.seed)
        write_manifest(manifest, Path(args.out) / "manifest.tsv")
    print(f"wrote {len(manifest.entries)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_config, train_config = parse_config(args.config)
    if args.mode:
        from dataclasses import replace

        train_config = replace(train_config, mode=args.mode)
    manifest = _load_data_manifest(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.ini", model_config, train_config)
    model, partition = build_model(model_config, train_config.seed)
    try:
        train_loop(
            model,
            partition,
            manifest,
            train_config,
            out_dir=out_dir,
            verbose=not args.quiet,
        )
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN_ABORT
    print(f"final checkpoint: {out_dir / 'checkpoint_final.ckpt'}")
    return EXIT_OK


def run_evaluation(
    model,
    manifest: Manifest,
    split: str,
    train_config: TrainConfig,
    *,
    threshold: float = 0.5,
    oracle: bool = False,
) -> MetricsReport:
    """Forward passes without augmentation, binarize, per-clip metrics, stratify."""
    samples = load_split_samples(manifest, split, train_config)
    rows: list[ClipMetrics] = []
    prompt_mode = train_config.mode == "multi-prompt"
    if model is not None:
        model.eval()
    for image, mask, meta in samples:
        if oracle:
            pred = mask.astype(np.uint8)
        else:
            x = torch.from_numpy(image[None, None].astype(np.float32))
            view = meta.view if prompt_mode else None
            try:
                with torch.no_grad():
                    logits = model(x, view)
            except ValueError as exc:
                raise DataGeometryError(
                    f"clip {meta.scan_id}/{meta.view}/{meta.slice_position} with shape "
                    f"{image.shape} is incompatible with the checkpoint "
                    f"(stages={model.config.num_stages}, max_phases={model.config.max_phases}): {exc}"
                ) from exc
            probs = torch.sigmoid(logits)[0, 0].numpy()
            pred = binarize(probs, threshold)
        rows.append(evaluate_clip(pred, mask.astype(np.uint8), meta))
    return stratified_report(rows)


def cmd_eval(args) -> int:
    manifest = _load_data_manifest(args.data)
    if args.oracle:
        model = None
        train_config = TrainConfig()
    else:
        if not args.ckpt:
            raise CliError("--ckpt is required unless --oracle is given")
        if not Path(args.ckpt).exists():
            raise CliError(f"checkpoint not found: {args.ckpt}")
        ckpt = load_checkpoint(args.ckpt)
        model, _ = restore_model(ckpt)
        train_config = TrainConfig.from_dict(ckpt.train_config)
    report = run_evaluation(
        model, manifest, args.split, train_config, threshold=args.threshold, oracle=args.oracle
    )
    csv_path, json_path = write_report(report, args.report)
    for name, stats in report.groups.items():
        hd_text = "n/a" if stats.hd_mean is None else f"{stats.hd_mean:.3f}"
        print(f"{name}: n={stats.count} dice={stats.dice_mean:.4f} hd={hd_text}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.ckpt).exists():
        raise CliError(f"checkpoint not found: {args.ckpt}")
    ckpt = load_checkpoint(args.ckpt)
    model, _ = restore_model(ckpt)
    train_config = TrainConfig.from_dict(ckpt.train_config)
    clip, mask = load_clip(args.clip)
    image, gt, meta = preprocess_sample(clip.data, mask.data, clip.meta, train_config)

    warnings: list[str] = []
    prompt_mode = train_config.mode == "multi-prompt"
    view = None
    if prompt_mode:
        view = args.view or meta.view
    elif args.view:
        warnings.append(
            f"--view {args.view} ignored: checkpoint was trained in mode "
            f"{train_config.mode!r} without prompts"
        )
    model.eval()
    x = torch.from_numpy(image[None, None].astype(np.float32))
    try:
        with torch.no_grad():
            logits = model(x, view)
    except ValueError as exc:
        raise DataGeometryError(
            f"clip shape {image.shape} incompatible with checkpoint: {exc}"
        ) from exc
    pred = binarize(torch.sigmoid(logits)[0, 0].numpy(), args.threshold)

    out_meta = meta
    out_clip = CineClip(data=np.zeros_like(image, dtype=np.float32), meta=out_meta)
    from .dataset import save_clip

    save_clip(out_clip, MaskClip(data=pred), args.out)
    sidecar = {
        "checkpoint": str(args.ckpt),
        "source_clip": str(args.clip),
        "mode": train_config.mode,
        "prompt_requested": args.view,
        "prompt_used": view,
        "warnings": warnings,
    }
    Path(str(args.out) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cineseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cine dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scans", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", choices=("sax", "lax", "both"), default="sax")
    p.add_argument("--slice-positions", default="basal,mid,apical")
    p.add_argument("--size", type=int, default=64, help="square grid size")
    p.add_argument("--phases", type=int, default=12, help="raw phases per clip")
    p.add_argument("--spec-file", default=None, help="plain-text scan spec file")
    p.add_argument("--train-fraction", type=float, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--report", required=True, help="output path prefix for CSV/JSON")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", choices=("SAX", "LAX"), default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())
