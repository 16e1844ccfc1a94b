"""Command-line entry point.

Subcommands: gen-data, pretrain, adapt, eval, export-attention,
export-embeddings.  Settings come from a flat key=value config file plus
repeatable --set overrides (overrides win); every run that owns an output
directory locks it, echoes the effective config, and writes a manifest.
Exit codes: 0 success, 1 contract/numeric violation, 2 configuration
error.
"""

import argparse
import contextlib
import csv
import json
import os
import sys
import time

import numpy as np
import torch
from PIL import Image

from . import __version__
from .backbone import BlockSpec
from .checkpoint import load_checkpoint
from .data import (DomainSpec, ShiftRecipe, export_folder_dataset,
                   gen_domain_pair, load_folder_dataset, normalize)
from .errors import ConfigurationError, ContractViolationError, NumericError
from .losses import LossWeights
from .pipeline import TrainConfig, adapt, evaluate, pretrain_source

# key -> (type tag, default, help)
CONFIG_SCHEMA = {
    "epochs": ("int", 100, "training epochs"),
    "batch_size": ("int", 64, "mini-batch size"),
    "learning_rate": ("float", 0.01, "SGD learning rate"),
    "momentum": ("float", 0.9, "SGD momentum"),
    "weight_decay": ("float", 0.001, "L2 weight decay"),
    "alpha": ("float", 1.0, "weight on the pseudo-label distillation pair"),
    "beta": ("float", 0.5, "weight on the contrastive term"),
    "temperature": ("float", 0.07, "contrastive temperature"),
    "smoothing": ("float", 0.1, "centroid smoothing toward the previous epoch"),
    "crop_fraction": ("float", 0.5, "local-view center crop fraction"),
    "kd_include_final": ("bool", True, "include the last block in distillation"),
    "seed": ("int", 0, "RNG seed"),
    "channels": ("intlist", (16, 32, 64, 128), "per-block channel counts"),
    "downsample": ("intlist", (1, 2, 2, 2), "per-block spatial strides"),
    "latent_dim": ("int", 128, "embedding width"),
    "num_classes": ("int", 5, "class count"),
    "per_class": ("int", 100, "synthetic samples per class per domain"),
    "extent": ("int", 32, "image side in pixels"),
    "texture": ("int", 1, "target background texture: 0 none, 1 plaid, 2 checker, 3 ripple"),
    "hue_degrees": ("float", 40.0, "target hue rotation in degrees"),
    "blur_radius": ("float", 0.7, "target gaussian blur sigma in pixels"),
    "noise_sigma": ("float", 0.08, "target additive noise level"),
    "attention_indices": ("intlist", (0,), "sample ids for attention overlays"),
    "overlay_alpha": ("float", 0.6, "attention overlay blend strength"),
}


def _parse_value(key: str, raw: str):
    kind = CONFIG_SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "intlist":
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: {exc}") from exc
    raise ConfigurationError(f"config key {key!r} has unknown type {kind!r}")


def _check_key(key: str) -> None:
    if key not in CONFIG_SCHEMA:
        raise ConfigurationError(f"unknown config key {key!r}")


def read_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path!r}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(
                f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        _check_key(key)
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(args) -> dict:
    """defaults < config file < --set overrides < --seed flag."""
    config = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}
    if args.config:
        config.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        _check_key(key)
        config[key] = _parse_value(key, raw)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        epochs=config["epochs"], batch_size=config["batch_size"],
        learning_rate=config["learning_rate"], momentum=config["momentum"],
        weight_decay=config["weight_decay"],
        weights=LossWeights(alpha=config["alpha"], beta=config["beta"]),
        temperature=config["temperature"], smoothing=config["smoothing"],
        crop_fraction=config["crop_fraction"],
        kd_include_final=config["kd_include_final"], seed=config["seed"])


def _block_spec(config: dict) -> BlockSpec:
    return BlockSpec(channels=tuple(config["channels"]),
                     downsample=tuple(config["downsample"]),
                     latent_dim=config["latent_dim"],
                     num_classes=config["num_classes"])


def _domain_spec(config: dict) -> DomainSpec:
    recipe = ShiftRecipe(texture=config["texture"],
                         hue_degrees=config["hue_degrees"],
                         blur_radius=config["blur_radius"],
                         noise_sigma=config["noise_sigma"])
    return DomainSpec(num_classes=config["num_classes"],
                      per_class=config["per_class"], extent=config["extent"],
                      recipe=recipe, seed=config["seed"])


@contextlib.contextmanager
def run_directory(out_dir, command: str, config: dict):
    """Lock `out_dir`, echo the config, and write a manifest on the way out."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"output directory {out_dir!r} is locked by another run "
            f"(remove {lock_path} if that run is dead)") from None
    os.close(fd)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    status = "failed"
    try:
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            for key in sorted(config):
                fh.write(f"{key} = {_format_value(config[key])}\n")
        yield
        status = "completed"
    finally:
        manifest = {
            "command": command,
            "version": __version__,
            "seed": config["seed"],
            "config": {key: _format_value(config[key]) for key in sorted(config)},
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "status": status,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        os.remove(lock_path)


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_"), None) is None:
            raise ConfigurationError(
                f"command {args.command!r} requires --{name}")


def cmd_gen_data(args, config) -> int:
    _require(args, "out")
    spec = _domain_spec(config)
    with run_directory(args.out, "gen-data", config):
        source, target = gen_domain_pair(spec)
        export_folder_dataset(source, os.path.join(args.out, "source"))
        export_folder_dataset(target, os.path.join(args.out, "target"))
    print(f"wrote {len(source)} source and {len(target)} target images "
          f"({spec.num_classes} classes) under {args.out}")
    return 0


def cmd_pretrain(args, config) -> int:
    _require(args, "data", "out")
    dataset = load_folder_dataset(args.data, extent=config["extent"])
    with run_directory(args.out, "pretrain", config):
        result = pretrain_source(dataset, _train_config(config),
                                 block_spec=_block_spec(config),
                                 out_dir=args.out)
        metrics = evaluate(result.model, dataset)
    print(f"pretrained {config['epochs']} epochs on {len(dataset)} images; "
          f"train accuracy {metrics.accuracy:.4f}")
    return 0


def cmd_adapt(args, config) -> int:
    _require(args, "checkpoint", "data", "out")
    dataset = load_folder_dataset(args.data, extent=config["extent"])
    with run_directory(args.out, "adapt", config):
        result = adapt(args.checkpoint, dataset, _train_config(config),
                       out_dir=args.out)
        metrics = evaluate(result.model, dataset) if dataset.labels is not None else None
    if metrics is not None:
        print(f"adapted {config['epochs']} epochs on {len(dataset)} images; "
              f"target accuracy {metrics.accuracy:.4f}")
    else:
        print(f"adapted {config['epochs']} epochs on {len(dataset)} images")
    return 0


def cmd_eval(args, config) -> int:
    _require(args, "checkpoint", "data")
    model = load_checkpoint(args.checkpoint)
    dataset = load_folder_dataset(args.data, extent=config["extent"])
    metrics = evaluate(model, dataset)
    print(f"accuracy {repr(metrics.accuracy)}")
    print(f"per_class_mean {repr(metrics.per_class_mean)}")
    for c, acc in enumerate(metrics.per_class):
        print(f"class_{c} {repr(acc)}")
    if args.out:
        with run_directory(args.out, "eval", config):
            with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["metric", "value"])
                writer.writerow(["accuracy", repr(metrics.accuracy)])
                writer.writerow(["per_class_mean", repr(metrics.per_class_mean)])
                for c, acc in enumerate(metrics.per_class):
                    writer.writerow([f"class_{c}", repr(acc)])
    return 0


def _overlay(image: torch.Tensor, saliency: torch.Tensor, alpha: float) -> np.ndarray:
    """Blend a per-pixel weight map over an image, highlighting in red."""
    h, w = image.shape[1], image.shape[2]
    sal = saliency.mean(dim=0, keepdim=True)[None]          # (1, 1, h', w')
    sal = torch.nn.functional.interpolate(sal, size=(h, w), mode="bilinear",
                                          align_corners=False)[0, 0]
    lo, hi = float(sal.min()), float(sal.max())
    sal = (sal - lo) / (hi - lo) if hi > lo else torch.zeros_like(sal)
    weight = alpha * sal[None]
    highlight = torch.tensor([1.0, 0.1, 0.1])[:, None, None].expand_as(image)
    blended = (1 - weight) * image + weight * highlight
    return np.round(blended.clamp(0, 1).numpy() * 255).astype(np.uint8).transpose(1, 2, 0)


def cmd_export_attention(args, config) -> int:
    _require(args, "checkpoint", "data", "out")
    model = load_checkpoint(args.checkpoint)
    dataset = load_folder_dataset(args.data, extent=config["extent"])
    indices = config["attention_indices"]
    for i in indices:
        if not 0 <= i < len(dataset):
            raise ConfigurationError(
                f"attention_indices entry {i} out of range for {len(dataset)} samples")
    with run_directory(args.out, "export-attention", config):
        model.eval()
        with torch.no_grad():
            for i in indices:
                image = dataset.images[i]
                trace = model(normalize(image[None]))
                for block, sal in enumerate(trace.saliency, start=1):
                    pixels = _overlay(image, sal[0], config["overlay_alpha"])
                    name = f"attention_{i:05d}_block{block}.png"
                    Image.fromarray(pixels, mode="RGB").save(
                        os.path.join(args.out, name))
    print(f"wrote {len(indices) * len(model.blocks)} overlays to {args.out}")
    return 0


def cmd_export_embeddings(args, config) -> int:
    _require(args, "checkpoint", "data", "out")
    model = load_checkpoint(args.checkpoint)
    dataset = load_folder_dataset(args.data, extent=config["extent"])
    with run_directory(args.out, "export-embeddings", config):
        model.eval()
        zs = []
        with torch.no_grad():
            for start in range(0, len(dataset), 256):
                trace = model(normalize(dataset.images[start:start + 256]))
                zs.append(trace.z)
        z = torch.cat(zs)
        path = os.path.join(args.out, "embeddings.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            dim = z.shape[1]
            writer.writerow(["id", "label"] + [f"z{j}" for j in range(dim)])
            for i in range(len(dataset)):
                label = int(dataset.labels[i]) if dataset.labels is not None else ""
                writer.writerow([int(dataset.ids[i]), label]
                                + [repr(float(v)) for v in z[i]])
    print(f"wrote {len(dataset)} embedding rows of width {z.shape[1]} to {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "export-attention": cmd_export_attention,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnadapt",
        description="Attention-fusion source-free domain adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed (wins over config)")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--data", help="dataset root directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolationError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
