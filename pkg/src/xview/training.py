"""Two-stage training, evaluation modes, and the ablation runner.

Stage 1 updates only the fusion parameters on the first ceil(s1_fraction * n)
training pairs with the mask loss.  Stage 2 updates everything except the
patch encoder (when frozen) with mask loss + weighted alignment loss.
Learning rates follow a per-stage cosine decay; AdamW state is reset at the
start of each stage.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError, XViewError
from .masks import BinaryMask, MetricsReport, summarize
from .model import AlignConfig, FusionConfig, ModelConfig, ObjectRelator
from .synthgen import DIRECTIONS, Dataset, PairSample

log = logging.getLogger(__name__)

EVAL_MODES = ("dual", "visual_only", "memory")
ABLATION_COLUMNS = ("run_id", "direction", "fusion", "align_metric", "lambda", "mcfuse",
                    "xobjalign", "iou", "le", "ca", "va", "n_samples")


@dataclass
class TrainConfig:
    direction: str = "ego2exo"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    lr_s1: float = 2e-3
    lr_s2: float = 2e-3
    epochs_s1: int = 4
    epochs_s2: int = 4
    s1_fraction: float = 1 / 20
    batch_size: int = 12
    weight_decay: float = 0.01
    freeze_encoder_s2: bool = True
    xobjalign_enabled: bool = True
    mcfuse_enabled: bool = True

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if isinstance(self.align, dict):
            self.align = AlignConfig(**self.align)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")
        if not 0.0 < self.s1_fraction <= 1.0:
            raise ConfigError("s1_fraction must lie in (0, 1]")
        if self.epochs_s1 < 0 or self.epochs_s2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_s1 < 0 or self.lr_s2 < 0:
            raise ConfigError("learning rates must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def build_model(self) -> ObjectRelator:
        return ObjectRelator(self.model, self.fusion, self.align, self.mcfuse_enabled,
                             self.xobjalign_enabled, seed=self.seed)


@dataclass
class EpochLosses:
    l_mask: list[float] = field(default_factory=list)
    l_xobj: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)


@dataclass
class RunReport:
    config: dict
    losses: dict[str, EpochLosses] = field(default_factory=dict)
    metrics: dict[str, MetricsReport] = field(default_factory=dict)
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "losses": {k: dataclasses.asdict(v) for k, v in self.losses.items()},
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "wall_clock": self.wall_clock,
            **self.extra,
        }


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def oriented_pairs(samples: Sequence[PairSample], direction: str) -> list[PairSample]:
    """Training/eval pairs for ``direction``; pairs with an invisible query are dropped.

    ``joint`` yields each sample twice, ego2exo then exo2ego, adjacent.
    """
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    dirs = ("ego2exo", "exo2ego") if direction == "joint" else (direction,)
    out = []
    for s in samples:
        for d in dirs:
            o = s.oriented(d)
            if o.visible_query:
                out.append(o)
    return out


def _batches(pairs: list[PairSample], batch_size: int, rng: np.random.Generator,
             joint: bool) -> list[list[PairSample]]:
    if joint:
        # keep the two orientations of one sample together so batches mix them 1:1
        groups: dict[tuple, list[PairSample]] = {}
        for p in pairs:
            groups.setdefault((p.sequence_id, p.frame_id), []).append(p)
        units = list(groups.values())
        order = rng.permutation(len(units))
        flat = [p for i in order for p in units[i]]
    else:
        flat = [pairs[i] for i in rng.permutation(len(pairs))]
    return [flat[i:i + batch_size] for i in range(0, len(flat), batch_size)]


def _train_loop(model: ObjectRelator, pairs: list[PairSample], names: list[str], lr: float,
                epochs: int, cfg: TrainConfig, rng: np.random.Generator,
                alignment: bool) -> EpochLosses:
    params = model.params
    params.set_trainable(names)
    params.reset_optimizer()
    hist = EpochLosses()
    joint = cfg.direction == "joint"
    n_batches = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = n_batches * epochs
    step = 0
    try:
        for _ in range(epochs):
            sums = np.zeros(3)
            n_x = 0
            for batch in _batches(pairs, cfg.batch_size, rng, joint):
                params.zero_grad()
                w = 1.0 / len(batch)
                for s in batch:
                    align_here = alignment and s.visible_target
                    out = model.forward(s.query_image, s.query_mask, s.text_category,
                                        s.target_image, s.target_mask, with_alignment=align_here)
                    out.loss.backward(w)
                    sums[0] += out.l_mask.item()
                    sums[2] += out.loss.item()
                    if out.l_xobj is not None:
                        sums[1] += out.l_xobj.item()
                        n_x += 1
                for n in names:
                    if params[n].grad is None:
                        params[n].grad = np.zeros(params[n].shape)
                T.adamw_step(params, T.cosine_lr(lr, step, total_steps),
                             weight_decay=cfg.weight_decay, names=names)
                step += 1
            hist.l_mask.append(float(sums[0] / len(pairs)))
            hist.l_xobj.append(float(sums[1] / n_x) if n_x else 0.0)
            hist.total.append(float(sums[2] / len(pairs)))
            log.info("epoch loss mask=%.4f xobj=%.4f total=%.4f",
                     hist.l_mask[-1], hist.l_xobj[-1], hist.total[-1])
    finally:
        params.zero_grad()
        params.set_trainable(params.names())
    return hist


def stage1_pairs(samples: Sequence[PairSample], cfg: TrainConfig) -> list[PairSample]:
    n = math.ceil(cfg.s1_fraction * len(samples))
    return oriented_pairs(list(samples)[:n], cfg.direction)


def train_stage1(cfg: TrainConfig, samples: Sequence[PairSample], model: ObjectRelator,
                 rng: np.random.Generator) -> EpochLosses:
    """Fusion-only warm-up on the leading s1_fraction of the training samples."""
    if not cfg.mcfuse_enabled:
        raise ConfigError("stage 1 requires the fusion module")
    pairs = stage1_pairs(samples, cfg)
    if not pairs:
        raise ConfigError("stage-1 subset is empty")
    names = model.trainable_names("s1")
    if not names:
        return EpochLosses()
    return _train_loop(model, pairs, names, cfg.lr_s1, cfg.epochs_s1, cfg, rng, alignment=False)


def train_stage2(cfg: TrainConfig, samples: Sequence[PairSample], model: ObjectRelator,
                 rng: np.random.Generator) -> EpochLosses:
    if model.cfg != cfg.model:
        raise ConfigError("model shape does not match the training configuration")
    pairs = oriented_pairs(samples, cfg.direction)
    if not pairs:
        raise ConfigError("no usable training pairs")
    names = model.trainable_names("s2", cfg.freeze_encoder_s2)
    alignment = cfg.xobjalign_enabled and cfg.align.lambda_xobj > 0
    return _train_loop(model, pairs, names, cfg.lr_s2, cfg.epochs_s2, cfg, rng, alignment)


STAGE_IDS = {"s1": 1, "s2": 2}


def training_rng(seed: int, stage: str = "s2") -> np.random.Generator:
    """Batch-order stream for one stage.

    Each stage has its own stream, so runs with and without stage 1 see the
    same stage-2 batch order for a given seed.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), 11, STAGE_IDS[stage]]))


def train(cfg: TrainConfig, samples: Sequence[PairSample],
          model: ObjectRelator | None = None) -> tuple[ObjectRelator, dict[str, EpochLosses], np.random.Generator]:
    """Both stages; stage 1 runs only when the fusion module is enabled."""
    model = model or cfg.build_model()
    losses = {}
    if cfg.mcfuse_enabled and cfg.epochs_s1 > 0:
        losses["s1"] = train_stage1(cfg, samples, model, training_rng(cfg.seed, "s1"))
    rng = training_rng(cfg.seed, "s2")
    losses["s2"] = train_stage2(cfg, samples, model, rng)
    return model, losses, rng


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, samples: Sequence[PairSample] | Sequence[Sequence[PairSample]],
             mode: str = "dual", direction: str = "ego2exo", theta_vis: int = 1) -> MetricsReport:
    """Score a model (anything with ``predict_mask``) on validation pairs.

    ``samples`` may be flat or grouped into sequences; memory mode needs the
    grouping.  Pairs whose query is invisible are not scored in any mode.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    seqs = _as_sequences(samples)
    preds, gts, vis = [], [], []
    dirs = ("ego2exo", "exo2ego") if direction == "joint" else (direction,)
    for d in dirs:
        for seq in seqs:
            frames = [s.oriented(d) for s in seq]
            if mode == "memory":
                out = _memory_predictions(model, frames)
            else:
                out = [(s, model.predict_mask(s.query_image, s.query_mask, s.text_category,
                                              s.target_image, mode=mode))
                       for s in frames if s.visible_query]
            for s, pred in out:
                preds.append(pred)
                gts.append(s.target_mask)
                vis.append(s.visible_target)
    if not preds:
        raise StateError("no scorable pairs")
    report = summarize(preds, gts, vis, theta_vis=theta_vis)
    report.extra["mode"] = mode
    return report


def _as_sequences(samples) -> list[list[PairSample]]:
    samples = list(samples)
    if samples and isinstance(samples[0], PairSample):
        return [[s] for s in samples]
    return [list(seq) for seq in samples]


def _memory_predictions(model, frames: list[PairSample]) -> list[tuple[PairSample, BinaryMask]]:
    """First-frame query, then each prediction becomes the next frame's prompt.

    An empty prediction falls back to the last nonempty one, else to the
    first query.  The text condition stays that of the first query.
    """
    out = []
    prompt = first = last_good = None
    text = None
    for s in frames:
        if prompt is None:
            if not s.visible_query:
                continue
            prompt = first = (s.query_image, s.query_mask)
            text = s.text_category
        pred = model.predict_mask(prompt[0], prompt[1], text, s.target_image, mode="dual")
        if s.visible_query:
            out.append((s, pred))
        if pred.area() > 0:
            prompt = last_good = (s.target_image, pred)
        else:
            prompt = last_good or first
    return out


def alignment_distance(model: ObjectRelator, samples: Sequence[PairSample], direction: str = "ego2exo") -> float:
    """Mean Euclidean row distance between query-view and target-view prompt embeddings."""
    from .model import AlignConfig as _AC, xobjalign_loss
    total, n = 0.0, 0
    with T.no_grad():
        for s in oriented_pairs(samples, direction):
            if not s.visible_target:
                continue
            out = model.forward(s.query_image, s.query_mask, s.text_category, s.target_image,
                                s.target_mask, with_alignment=True)
            total += xobjalign_loss(out.emb.e_vis_query, out.emb.e_vis_target, _AC("euclidean")).item()
            n += 1
    if n == 0:
        raise StateError("no pairs visible in both views")
    return total / n


# ---------------------------------------------------------------------------
# full runs and ablations
# ---------------------------------------------------------------------------

def run(cfg: TrainConfig, dataset: Dataset, modes: Iterable[str] = ("dual",),
        measure_alignment: bool = False) -> tuple[ObjectRelator, RunReport]:
    t0 = time.perf_counter()
    model, losses, _ = train(cfg, dataset.samples("train"))
    report = RunReport(cfg.to_dict(), losses)
    for mode in modes:
        report.metrics[mode] = evaluate(model, dataset.val, mode, cfg.direction)
    if measure_alignment:
        report.extra["alignment_distance"] = alignment_distance(model, dataset.samples("val"), cfg.direction
                                                                if cfg.direction != "joint" else "ego2exo")
    report.wall_clock = time.perf_counter() - t0
    return model, report


CELL_KEYS = {"mcfuse": "mcfuse_enabled", "xobjalign": "xobjalign_enabled", "direction": "direction",
             "fusion": None, "fixed_k": None, "align_metric": None, "lambda": None, "seed": "seed",
             "run_id": None, "epochs_s1": "epochs_s1", "epochs_s2": "epochs_s2",
             "lr_s1": "lr_s1", "lr_s2": "lr_s2"}


def expand_grid(grid: dict) -> list[dict]:
    """Cells from {"cells": [...]} and/or {"axes": {key: [values]}} (cartesian product)."""
    cells = [dict(c) for c in grid.get("cells", [])]
    axes = grid.get("axes")
    if axes:
        keys = list(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            cells.append(dict(zip(keys, combo)))
    unknown = set(grid) - {"cells", "axes"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    if not cells:
        raise ConfigError("ablation grid is empty")
    for c in cells:
        bad = set(c) - set(CELL_KEYS)
        if bad:
            raise ConfigError(f"unknown cell keys: {sorted(bad)}")
    return cells


def cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    d = base.to_dict()
    for key, value in cell.items():
        target = CELL_KEYS[key]
        if target:
            d[target] = value
    if "fusion" in cell:
        d["fusion"] = {"variant": cell["fusion"], "fixed_k_value": cell.get("fixed_k", d["fusion"]["fixed_k_value"])}
    elif "fixed_k" in cell:
        d["fusion"] = {"variant": "fixed_k", "fixed_k_value": cell["fixed_k"]}
    if "align_metric" in cell:
        d["align"]["metric"] = cell["align_metric"]
    if "lambda" in cell:
        d["align"]["lambda_xobj"] = cell["lambda"]
    return TrainConfig.from_dict(d)


def _fusion_label(cfg: TrainConfig) -> str:
    if not cfg.mcfuse_enabled:
        return "none"
    if cfg.fusion.variant == "fixed_k":
        return f"fixed_k({cfg.fusion.fixed_k_value:g})"
    return cfg.fusion.variant


def _run_cell(args):
    idx, cell, base, dataset = args
    run_id = cell.get("run_id", f"cell{idx:03d}")
    row = {"run_id": run_id}
    try:
        cfg = cell_config(base, cell)
        row.update(direction=cfg.direction, fusion=_fusion_label(cfg), align_metric=cfg.align.metric,
                   **{"lambda": cfg.align.lambda_xobj}, mcfuse=cfg.mcfuse_enabled,
                   xobjalign=cfg.xobjalign_enabled)
        _, report = run(cfg, dataset)
        m = report.metrics["dual"]
        row.update(iou=m.iou, le=m.le, ca=m.ca, va=m.va, n_samples=m.n_samples, error="")
        return row, report.to_dict()
    except (XViewError, ValueError, ArithmeticError) as exc:
        log.exception("ablation cell %s failed", run_id)
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row, None


_WORKER_DATASET = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_cell_worker(args):
    idx, cell, base = args
    return _run_cell((idx, cell, base, _WORKER_DATASET))


def max_workers() -> int:
    env = os.environ.get("XVIEW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_ablation(grid: dict | list[dict], base: TrainConfig, dataset: Dataset,
                 workers: int | None = None) -> tuple[list[dict], list[dict | None]]:
    """Train and evaluate one run per grid cell.

    Returns (rows, reports) in grid order.  A failing cell yields a row with
    an ``error`` entry and no metrics; the other cells still run.
    """
    cells = expand_grid(grid) if isinstance(grid, dict) else [dict(c) for c in grid]
    if not cells:
        raise ConfigError("ablation grid is empty")
    workers = min(workers or max_workers(), len(cells))
    if workers <= 1:
        results = [_run_cell((i, c, base, dataset)) for i, c in enumerate(cells)]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(dataset,)) as ex:
            results = list(ex.map(_run_cell_worker, [(i, c, base) for i, c in enumerate(cells)]))
    return [r[0] for r in results], [r[1] for r in results]


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS + ("error",))
    for r in rows:
        writer.writerow(["" if r.get(c) is None else r.get(c) for c in ABLATION_COLUMNS + ("error",)])
    return buf.getvalue()
