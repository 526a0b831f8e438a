"""Command-line entry point: ``xview <command> [options]``.

Commands
--------
gen-data   write a dataset directory (PPM images, RLE masks, manifest.json)
train      train one model and write a checkpoint
eval       score a checkpoint in dual, visual_only or memory mode
ablate     train and score every cell of a grid, write a CSV table
infer      write predicted masks for a split as RLE JSON
render     write a PPM overlay for one validation pair

All commands read an optional JSON config (``--config``).  Every key has a
default and unknown keys are rejected.  The resolved config is embedded in
(or written beside) every artifact.  Exit status: 0 success, 1 usage or
config error, 2 runtime failure.

Overlay layout: query view on the left, target view on the right (so a
64x64 pair gives a 128x64 image).  On the target side the prediction is
blended at 50% with cyan and the ground-truth boundary is drawn in red on
top.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, XViewError
from .masks import BinaryMask, boundary, save_rle
from .model import load_checkpoint, save_checkpoint
from .synthgen import (DIRECTIONS, Dataset, GeneratorConfig, PairSample, build_dataset, load_dataset,
                       make_dataset, write_ppm)
from .training import (EVAL_MODES, TrainConfig, ablation_csv, evaluate, run_ablation, train)

log = logging.getLogger("xview")

GT_COLOR = np.array([255, 0, 0], dtype=np.uint16)
PRED_COLOR = np.array([0, 255, 255], dtype=np.uint16)

DEFAULTS = {
    "seed": 42,
    "direction": "ego2exo",
    "n_train": 2000,
    "n_val": 500,
    "data_dir": None,
    "theta_vis": 1,
    "generator": GeneratorConfig().to_dict(),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "direction")},
    "grid": {"cells": [
        {"run_id": "base", "mcfuse": False, "xobjalign": False},
        {"run_id": "mcfuse", "mcfuse": True, "xobjalign": False},
        {"run_id": "xobjalign", "mcfuse": False, "xobjalign": True},
        {"run_id": "full", "mcfuse": True, "xobjalign": True},
    ]},
}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "grid":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def resolve_config(raw: dict | None = None, seed: int | None = None) -> dict:
    """Apply defaults, validate, and return the fully resolved config tree."""
    cfg = _merge(DEFAULTS, raw or {})
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["direction"] not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    try:
        GeneratorConfig.from_dict(cfg["generator"])
        train_config(cfg)
    except TypeError as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc
    return cfg


def load_config(path: str | None, seed: int | None = None) -> dict:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(raw, seed)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], "direction": cfg["direction"]})


def dataset_for(cfg: dict, data_dir: str | None = None) -> Dataset:
    path = data_dir or cfg["data_dir"]
    if path:
        return load_dataset(path)
    return make_dataset(cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["direction"],
                        GeneratorConfig.from_dict(cfg["generator"]))


# ---------------------------------------------------------------------------
# atomic output
# ---------------------------------------------------------------------------

def write_atomic(path: str | os.PathLike, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def overlay_pixels(sample: PairSample, predicted: BinaryMask) -> np.ndarray:
    target = sample.target_pixels
    if predicted.shape != target.shape[:2]:
        raise ConfigError(f"prediction is {predicted.shape}, target image is {target.shape[:2]}")
    right = target.astype(np.uint16)
    fill = predicted.bits
    right[fill] = (right[fill] + PRED_COLOR) // 2
    right[boundary(sample.target_mask)] = GT_COLOR
    return np.concatenate([sample.query_pixels, right.astype(np.uint8)], axis=1)


def render_overlay(sample: PairSample, predicted: BinaryMask, out_path: str | os.PathLike) -> np.ndarray:
    """Write the side-by-side overlay as a binary PPM and return its pixels."""
    pixels = overlay_pixels(sample, predicted)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{out_path.name}.", dir=out_path.parent)
    os.close(fd)
    try:
        write_ppm(tmp, pixels)
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return pixels


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> None:
    build_dataset(args.out, cfg["seed"], cfg["n_train"], cfg["n_val"], cfg["direction"],
                  GeneratorConfig.from_dict(cfg["generator"]), extra={"resolved_config": cfg})


def cmd_train(args, cfg) -> None:
    tcfg = train_config(cfg)
    ds = dataset_for(cfg, args.data)
    model, losses, _ = train(tcfg, ds.samples("train"))
    extra = {"resolved_config": cfg,
             "losses": {k: {"l_mask": v.l_mask, "l_xobj": v.l_xobj, "total": v.total}
                        for k, v in losses.items()}}
    save_checkpoint(args.out, model, extra)


def _checkpoint_config(args) -> tuple:
    model, obj = load_checkpoint(args.checkpoint)
    cfg = obj.get("resolved_config") or resolve_config()
    if args.seed is not None:
        cfg = resolve_config(cfg, args.seed)
    return model, cfg


def cmd_eval(args, cfg) -> None:
    model, cfg = _checkpoint_config(args)
    ds = dataset_for(cfg, args.data)
    report = evaluate(model, ds.val, args.mode, cfg["direction"], cfg["theta_vis"])
    out = report.to_dict()
    out["checkpoint"] = os.path.basename(args.checkpoint)
    out["resolved_config"] = cfg
    write_atomic(args.out, _dump(out))


def cmd_ablate(args, cfg) -> None:
    ds = dataset_for(cfg, args.data)
    rows, reports = run_ablation(cfg["grid"], train_config(cfg), ds)
    table = ablation_csv(rows)
    write_atomic(Path(args.out).with_suffix(".json"),
                 _dump({"resolved_config": cfg, "rows": rows, "reports": reports}))
    write_atomic(args.out, table)
    failed = [r["run_id"] for r in rows if r.get("error")]
    if failed:
        log.warning("cells failed: %s", ", ".join(failed))


def cmd_infer(args, cfg) -> None:
    model, cfg = _checkpoint_config(args)
    ds = dataset_for(cfg, args.data)
    items = []
    for s in ds.samples(args.split):
        if not s.visible_query:
            continue
        pred = model.predict_mask(s.query_image, s.query_mask, s.text_category, s.target_image,
                                  mode=args.mode)
        items.append({"sequence_id": s.sequence_id, "frame_id": s.frame_id,
                      "mask": json.loads(save_rle(pred))})
    write_atomic(args.out, _dump({"resolved_config": cfg, "mode": args.mode, "split": args.split,
                                  "predictions": items}))


def cmd_render(args, cfg) -> None:
    model, cfg = _checkpoint_config(args)
    ds = dataset_for(cfg, args.data)
    samples = [s for s in ds.samples(args.split) if s.visible_query]
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index must lie in [0, {len(samples)})")
    s = samples[args.index]
    pred = model.predict_mask(s.query_image, s.query_mask, s.text_category, s.target_image, mode=args.mode)
    render_overlay(s, pred, args.out)
    write_atomic(str(args.out) + ".json", _dump({
        "resolved_config": cfg, "split": args.split, "index": args.index, "mode": args.mode,
        "sequence_id": s.sequence_id, "frame_id": s.frame_id,
        "layout": "query | target; prediction cyan at 50%; ground-truth boundary red"}))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "infer": cmd_infer, "render": cmd_render}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xview", description="Cross-view object correspondence at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text, out_help, checkpoint=False, mode=False, split=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override the config seed")
        if name != "gen-data":
            p.add_argument("--data", help="dataset directory (default: config data_dir, else regenerate)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        if mode:
            p.add_argument("--mode", choices=EVAL_MODES, default="dual")
        if split:
            p.add_argument("--split", choices=("train", "val"), default="val")
        return p

    add("gen-data", "generate a synthetic ego/exo dataset", "output directory")
    add("train", "train a model", "checkpoint path")
    add("eval", "evaluate a checkpoint", "report JSON path", checkpoint=True, mode=True)
    add("ablate", "run an ablation grid", "CSV table path (a .json sidecar is written too)")
    p = add("infer", "predict masks for a split", "predictions JSON path", checkpoint=True,
            split=True)
    p.add_argument("--mode", choices=("dual", "visual_only"), default="dual")
    p = add("render", "render an overlay for one pair", "PPM path", checkpoint=True, split=True)
    p.add_argument("--mode", choices=("dual", "visual_only"), default="dual")
    p.add_argument("--index", type=int, default=0, help="pair index among visible-query pairs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (XViewError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
