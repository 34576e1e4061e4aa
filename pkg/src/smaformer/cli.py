"""Command-line entry point: ``smaformer {synth,gradcheck,train,eval,predict}``.

Every command reads one run configuration (defaults, then ``--config`` JSON, then
``--key=value`` overrides) and echoes the effective configuration to
``run.json`` in its output directory. Feeding that file back through
``--config`` repeats the run exactly.

Exit codes: 0 ok, 1 verification failure, 2 usage or IO error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import smt
from .data import (CLASS_NAMES, DEFAULT_SPLIT, FOREGROUND, canonical_json, make_dataset,
                   read_dataset, select, write_dataset)
from .functional import ConfigError
from .model import ModelConfig, init_params
from .training import (CheckpointError, NonFiniteGradient, TrainConfig, TrainingDiverged,
                       evaluate, load_checkpoint, predict, save_checkpoint, train_loop)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "gradcheck", "train", "eval", "predict")


class UsageError(Exception):
    pass


def default_config() -> dict:
    """The full run configuration tree; every accepted key appears here."""
    return {
        "seed": 0,
        "out": None,
        "data": {"count": 8, "height": 64, "width": 64, "seed": None,
                 "split_ratios": list(DEFAULT_SPLIT), "dir": None},
        "model": ModelConfig(base_channels=16, blocks_per_stage=(1, 1, 1, 1), heads=4,
                             patch_size=(4, 2, 1, 1)).to_dict(),
        "train": {**TrainConfig(total_steps=400).to_dict(), "seed": None,
                  "train_split": "all", "val_split": "val"},
        "gradcheck": {"op_threshold": 1e-6, "model_threshold": 1e-4,
                      "seeds": [0, 1, 2, 3, 4], "params_per_tensor": 2},
        "eval": {"checkpoint": None, "split": "all"},
        "predict": {"checkpoint": None, "image": None},
    }


# --- configuration ------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _leaf_paths(tree: dict, prefix: str = "") -> List[str]:
    out = []
    for k, v in tree.items():
        path = f"{prefix}{k}"
        out.extend(_leaf_paths(v, path + ".") if isinstance(v, dict) else [path])
    return out


def resolve_key(cfg: dict, key: str, command: Optional[str] = None) -> List[str]:
    """Full dotted path for ``key``; a bare leaf name is accepted when unambiguous.

    Ambiguous bare names prefer the current command's section, then the top level.
    """
    leaves = _leaf_paths(cfg)
    if key in leaves:
        return key.split(".")
    matches = [p for p in leaves if p.rsplit(".", 1)[-1] == key]
    section = {"synth": "data", "train": "train"}.get(command or "", command or "")
    preferred = [p for p in matches if p.split(".")[0] == section]
    if len(matches) == 1:
        return matches[0].split(".")
    if len(preferred) == 1:
        return preferred[0].split(".")
    if matches:
        raise UsageError(f"ambiguous key {key!r}: use one of {', '.join(sorted(matches))}")
    raise UsageError(f"unknown config key {key!r}")


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where + k!r} must be an object")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def build_config(command: str, config_path: Optional[str], overrides: List[str],
                 out: Optional[str], seed: Optional[int]) -> dict:
    cfg = default_config()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        loaded.pop("command", None)
        _merge(cfg, loaded)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"expected --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        *parents, leaf = resolve_key(cfg, key, command)
        node = cfg
        for p in parents:
            node = node[p]
        node[leaf] = _parse_value(value)
    if out is not None:
        cfg["out"] = out
    if seed is not None:
        cfg["seed"] = seed
    # Section seeds left unset follow the run seed.
    for section in ("data", "train"):
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = cfg["seed"]
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in ("train_split", "val_split")}
    return TrainConfig.from_dict(t)


# --- output directories -------------------------------------------------------------


def prepare_out(cfg: dict, overwrite: bool, required: bool = True) -> Optional[Path]:
    """Create the output directory, refusing to clobber earlier results."""
    if cfg["out"] is None:
        if required:
            raise UsageError("--out=DIR is required")
        return None
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"{out} is not empty; pass --overwrite to replace it")
        if not (out / "run.json").exists():
            raise UsageError(f"{out} was not written by this tool (no run.json); not removing it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out: Optional[Path], command: str, cfg: dict) -> None:
    if out is not None:
        (out / "run.json").write_text(canonical_json({"command": command, **cfg}))


def write_pgm(path, labels: np.ndarray, num_classes: int) -> None:
    """Binary P5 graymap; class ids spread evenly over 0..255."""
    scale = 255 // max(num_classes - 1, 1)
    pixels = (np.asarray(labels) * scale).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5" or fields[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def _load_dataset(cfg: dict):
    if not cfg["data"]["dir"]:
        raise UsageError("a dataset directory is required (--data.dir=DIR)")
    path = Path(cfg["data"]["dir"])
    if not (path / "manifest.json").exists():
        raise UsageError(f"no dataset at {path} (manifest.json missing)")
    return read_dataset(path)


def _split(manifest, samples, name: str):
    if name == "all":
        return list(samples)
    if name not in manifest.splits:
        raise UsageError(f"unknown split {name!r}; have {sorted(manifest.splits)} or 'all'")
    return select(samples, manifest.splits[name])


def _load_checkpoint(path):
    if not path:
        raise UsageError("a checkpoint directory is required (--checkpoint=DIR)")
    if not Path(path).is_dir():
        raise UsageError(f"no checkpoint at {path}")
    return load_checkpoint(path)


# --- commands -----------------------------------------------------------------------


def cmd_synth(cfg: dict, overwrite: bool) -> int:
    d = cfg["data"]
    try:
        manifest, samples = make_dataset(int(d["count"]), int(d["seed"]), int(d["height"]),
                                         int(d["width"]), tuple(d["split_ratios"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = prepare_out(cfg, overwrite)
    write_dataset(out, manifest, samples)
    echo_config(out, "synth", cfg)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    fractions = np.mean([np.bincount(s.mask.ravel(), minlength=3) / s.mask.size for s in samples], axis=0)
    print(f"wrote {manifest.count} samples ({manifest.height}x{manifest.width}) to {out}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    print("mean class fractions: " + ", ".join(f"{CLASS_NAMES[c]}={f:.3f}" for c, f in enumerate(fractions)))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, overwrite: bool) -> int:
    from .verify import format_report, timed_suite

    g = cfg["gradcheck"]
    out = prepare_out(cfg, overwrite, required=False)
    lines, seconds = timed_suite(seeds=tuple(g["seeds"]), op_threshold=float(g["op_threshold"]),
                                 model_threshold=float(g["model_threshold"]),
                                 params_per_tensor=int(g["params_per_tensor"]))
    report = format_report(lines)
    print(report)
    failed = [ln.name for ln in lines if not ln.passed]
    print(f"{len(lines)} checks in {seconds:.1f}s; " + (f"FAILED: {', '.join(failed)}" if failed else "all passed"))
    if out is not None:
        (out / "gradcheck.txt").write_text(report + "\n")
        echo_config(out, "gradcheck", cfg)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_train(cfg: dict, overwrite: bool) -> int:
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    manifest, samples = _load_dataset(cfg)
    if manifest.num_classes != mcfg.num_classes:
        raise UsageError(f"dataset has {manifest.num_classes} classes, model {mcfg.num_classes}")
    if (manifest.height, manifest.width) != tuple(mcfg.image_size):
        raise UsageError(f"dataset images are {manifest.height}x{manifest.width}, model expects "
                         f"{mcfg.image_size[0]}x{mcfg.image_size[1]} (set model.image_size)")
    train = _split(manifest, samples, cfg["train"]["train_split"])
    val = _split(manifest, samples, cfg["train"]["val_split"])
    if not train:
        raise UsageError("training split is empty")
    out = prepare_out(cfg, overwrite)
    echo_config(out, "train", cfg)
    params = init_params(mcfg, tcfg.seed)

    def progress(row):
        if row["val_dsc"] is not None:
            print(f"step {row['step'] + 1:>6}  lr {row['lr']:.3e}  loss {row['loss']:.5f}  "
                  f"val dsc {row['val_dsc']:.4f}  val miou {row['val_miou']:.4f}", flush=True)

    try:
        result = train_loop(params, mcfg, train, tcfg, val_samples=val or None,
                            checkpoint_dir=out / "checkpoints", history_csv=out / "history.csv",
                            on_step=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteGradient as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(out / "final", params, mcfg, result.state, tcfg)
    h = result.history
    print(f"trained {len(h)} steps: loss {h[0]['loss']:.5f} -> {h[-1]['loss']:.5f}")
    print(f"final checkpoint: {out / 'final'}")
    return EXIT_OK


def cmd_eval(cfg: dict, overwrite: bool) -> int:
    params, mcfg, _, _ = _load_checkpoint(cfg["eval"]["checkpoint"])
    manifest, samples = _load_dataset(cfg)
    if manifest.num_classes != mcfg.num_classes:
        raise UsageError(f"dataset has {manifest.num_classes} classes, model predicts {mcfg.num_classes}")
    subset = _split(manifest, samples, cfg["eval"]["split"])
    if not subset:
        raise UsageError(f"split {cfg['eval']['split']!r} is empty")
    names = FOREGROUND if mcfg.num_classes == 3 else None
    report = evaluate(params, mcfg, subset, class_names=names)
    print(report.format_table())
    out = prepare_out(cfg, overwrite, required=False)
    if out is not None:
        (out / "metrics.csv").write_text(report.to_csv())
        echo_config(out, "eval", cfg)
    return EXIT_OK


def cmd_predict(cfg: dict, overwrite: bool) -> int:
    params, mcfg, _, _ = _load_checkpoint(cfg["predict"]["checkpoint"])
    image_path = cfg["predict"]["image"]
    if not image_path:
        raise UsageError("an input image is required (--image=PATH.smt)")
    image = smt.load(image_path)
    if image.shape != (mcfg.in_channels,) + tuple(mcfg.image_size):
        raise UsageError(f"image shape {image.shape} does not match model input "
                         f"{(mcfg.in_channels,) + tuple(mcfg.image_size)}")
    out = prepare_out(cfg, overwrite)
    labels = predict(params, mcfg, image)
    smt.save(out / "mask.smt", labels.astype(np.float32))
    write_pgm(out / "mask.pgm", labels, mcfg.num_classes)
    echo_config(out, "predict", cfg)
    counts = np.bincount(labels.ravel(), minlength=mcfg.num_classes)
    print(f"wrote {out / 'mask.smt'} and {out / 'mask.pgm'}; pixels per class: {counts.tolist()}")
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict}


def _thread_limit():
    value = os.environ.get("SMAFORMER_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"SMAFORMER_THREADS must be a positive integer, got {value!r}")
    if n < 1:
        raise UsageError(f"SMAFORMER_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smaformer", description=__doc__.split("\n")[0], allow_abbrev=False,
        epilog="Any config key may be overridden with --key=value (dotted paths such as "
               "--model.base_channels=8, or a bare unambiguous name such as --count=100).")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="JSON run configuration")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--seed", type=int, metavar="N", help="run seed")
    parser.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    parser.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory (eval, predict)")
    parser.add_argument("--data", metavar="DIR", help="dataset directory (train, eval)")
    parser.add_argument("--image", metavar="PATH", help="SMT1 image to segment (predict)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = build_config(args.command, args.config, extra, args.out, args.seed)
        if args.data:
            cfg["data"]["dir"] = args.data
        for section in ("eval", "predict"):
            if args.checkpoint:
                cfg[section]["checkpoint"] = args.checkpoint
        if args.image:
            cfg["predict"]["image"] = args.image
        with _thread_limit():
            return HANDLERS[args.command](copy.deepcopy(cfg), args.overwrite)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, smt.FormatError, OSError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
