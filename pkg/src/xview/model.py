"""The toy cross-view correspondence network.

Data flow for one query/target pair::

    target image --encode--> f_patches (64xD), f_pixels (4096xD)
    query image + query mask --encode, pool--> visual prompt tokens (NxD)
    [f_patches; t_ins; t_txt; t_vis; t_mask] --context block--> e_txt, e_vis, e_mask
    (e_txt, e_vis) --fusion--> e_cond
    (f_pixels, e_cond, e_mask) --mask head--> per-pixel logits

During training a second context pass with tokens pooled from the target
view under its ground-truth mask yields e_vis_target; the alignment loss
pulls e_vis towards it.  Inference never runs that pass.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, StateError
from .masks import BinaryMask
from .tensor import ParamStore, Tensor

FUSION_VARIANTS = ("learnable_residual", "add", "ca_no_params", "ca_plain", "fixed_k")
ALIGN_METRICS = ("euclidean", "cosine")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    dim: int = 32
    n_tokens: int = 4
    n_categories: int = 5
    image: int = 64
    patch: int = 8
    ff_mult: int = 2
    init_k: float = 0.8
    pixel_window: int = 1
    bce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        if self.image % self.patch:
            raise ConfigError("image size must be a multiple of the patch size")
        side = math.isqrt(self.n_tokens)
        if side * side != self.n_tokens or self.grid % side:
            raise ConfigError("n_tokens must be a square grid dividing the patch grid")
        if not 0.0 < self.init_k < 1.0:
            raise ConfigError("init_k must lie strictly between 0 and 1")
        if self.pixel_window < 1 or self.pixel_window % 2 == 0:
            raise ConfigError("pixel_window must be a positive odd number")

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class FusionConfig:
    variant: str = "learnable_residual"
    fixed_k_value: float = 0.8

    def __post_init__(self):
        if self.variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}")
        if not 0.0 <= self.fixed_k_value <= 1.0:
            raise ConfigError("fixed_k_value must lie in [0, 1]")


@dataclass
class AlignConfig:
    metric: str = "euclidean"
    lambda_xobj: float = 1.0

    def __post_init__(self):
        if self.metric not in ALIGN_METRICS:
            raise ConfigError(f"unknown alignment metric {self.metric!r}")
        if self.lambda_xobj < 0:
            raise ConfigError("lambda_xobj must be nonnegative")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

COLOR_FLOOR = 0.02
# Context output rows are rescaled to this norm.  It fixes the size of the
# alignment distance relative to the mask loss.
EMBED_NORM = 0.3
# Init scale of the attention query/key maps (relative to 1/sqrt(D)).
ATTN_INIT = 2.5
ENCODER_PARAMS = ("enc.w", "enc.b")
MCFUSE_PARAMS = ("mcf.wq", "mcf.wk", "mcf.wv", "mcf.alpha")
TEXT_PARAMS = ("txt.table",)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    d, k = cfg.dim, cfg.n_categories
    pdim = cfg.patch * cfg.patch * 3
    h = cfg.ff_mult * d

    def normal(shape, std):
        return rng.normal(0.0, std, shape)

    ps = ParamStore()
    ps.add("enc.w", normal((pdim, d), 2.0 / math.sqrt(pdim)))
    ps.add("enc.b", np.zeros((1, d)))
    ps.add("proj.w", normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("proj.b", np.zeros((1, d)))
    ps.add("vp.w", normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("vp.rgb", normal((3, d), 1.0))
    ps.add("vp.b", np.zeros((1, d)))
    ps.add("dec.w", normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("dec.rgb", normal((3 * cfg.pixel_window ** 2, d), 2.0 / cfg.pixel_window))
    ps.add("dec.b", normal((1, d), 0.5))
    for name in ("ctx.wq", "ctx.wk"):
        ps.add(name, normal((d, d), ATTN_INIT / math.sqrt(d)))
    ps.add("ctx.wv", normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("ctx.wo", normal((d, d), 0.5 / math.sqrt(d)))
    ps.add("ctx.w1", normal((d, h), 1.0 / math.sqrt(d)))
    ps.add("ctx.b1", np.zeros((1, h)))
    ps.add("ctx.w2", normal((h, d), 0.5 / math.sqrt(h)))
    ps.add("ctx.b2", np.zeros((1, d)))
    ps.add("tok.ins", normal((1, d), 0.5))
    ps.add("tok.vis", normal((1, d), 0.5))
    ps.add("tok.mask", normal((1, d), 0.5))
    ps.add("txt.table", normal((k, d), 0.5))
    for name in ("mcf.wq", "mcf.wk", "mcf.wv"):
        ps.add(name, normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("mcf.alpha", np.array([[logit(cfg.init_k)]]))
    ps.add("head.w", normal((d, d), 1.0 / math.sqrt(d)))
    ps.add("head.b", np.zeros((1, d)))
    ps.add("head.scale", np.array([[1.0]]))
    ps.add("head.bias", np.array([[-1.0]]))
    return ps


def k_lea(params: ParamStore) -> float:
    a = params["mcf.alpha"].item()
    return 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))


# ---------------------------------------------------------------------------
# encoder and visual prompts
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, patch: int = 8) -> np.ndarray:
    """HxWx3 image -> (H/p * W/p) x (p*p*3) rows, patches in row-major order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] % patch or image.shape[1] % patch:
        raise ShapeError(f"expected an HxWx3 image with sides divisible by {patch}, got {image.shape}")
    h, w, _ = image.shape
    gh, gw = h // patch, w // patch
    blocks = image.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch * patch * 3)


def encode_patches(image: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tensor:
    if np.shape(image) != (cfg.image, cfg.image, 3):
        raise ShapeError(f"expected a {cfg.image}x{cfg.image}x3 image, got {np.shape(image)}")
    rows = Tensor(patchify(np.asarray(image) - 0.5, cfg.patch))
    return rows @ params["enc.w"] + params["enc.b"]


def project_patches(f_patches: Tensor, params: ParamStore) -> Tensor:
    """Map frozen patch features into the context block's token space."""
    return f_patches @ params["proj.w"] + params["proj.b"]


def pixel_windows(image: np.ndarray, window: int) -> np.ndarray:
    """(H*W) x (window*window*3) rows: the colour neighbourhood of each pixel,
    row-major over offsets, edge-padded at the border."""
    image = np.asarray(image, dtype=np.float64) - 0.5
    h, w, _ = image.shape
    r = window // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)), mode="edge")
    views = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    # views: h x w x 3 x window x window
    return views.transpose(0, 1, 3, 4, 2).reshape(h * w, window * window * 3)


def decode_pixels(f_patches: Tensor, image: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Per-pixel features: tanh(refined patch feature + local colour projection + bias)."""
    coarse = T.upsample_grid(f_patches @ params["dec.w"], cfg.grid, cfg.patch)
    local = Tensor(pixel_windows(image, cfg.pixel_window))
    return T.tanh(coarse + local @ params["dec.rgb"] + params["dec.b"])


def encode_image(image: np.ndarray, params: ParamStore, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    f_patches = encode_patches(image, params, cfg)
    return f_patches, decode_pixels(f_patches, image, params, cfg)


def pool_weights(mask: BinaryMask, cfg: ModelConfig) -> np.ndarray:
    """N x n_patches matrix turning patch features into prompt tokens.

    Each patch is weighted by the fraction of its pixels inside ``mask``;
    region i of an sqrt(N) x sqrt(N) split of the patch grid averages its own
    patches.  A region the mask does not touch gets the whole-mask average.
    """
    if mask.shape != (cfg.image, cfg.image):
        raise ShapeError(f"mask shape {mask.shape} does not match image size {cfg.image}")
    g, p = cfg.grid, cfg.patch
    frac = mask.bits.reshape(g, p, g, p).mean(axis=(1, 3))
    total = frac.sum()
    if total == 0:
        raise StateError("cannot form a visual prompt from an empty mask")
    side = math.isqrt(cfg.n_tokens)
    step = g // side
    # blocks[i, j] holds region (i, j) of the patch grid, zeros elsewhere
    blocks = np.zeros((side, side, g, g))
    for i in range(side):
        for j in range(side):
            blocks[i, j, i * step:(i + 1) * step, j * step:(j + 1) * step] = \
                frac[i * step:(i + 1) * step, j * step:(j + 1) * step]
    out = blocks.reshape(cfg.n_tokens, g * g)
    sums = out.sum(axis=1, keepdims=True)
    whole = frac.reshape(1, -1) / total
    return np.where(sums > 0, out / np.where(sums > 0, sums, 1.0), whole)


def pool_visual_tokens(f_patches: Tensor, mask: BinaryMask, cfg: ModelConfig) -> Tensor:
    return Tensor(pool_weights(mask, cfg)) @ f_patches


def pooled_colors(image: np.ndarray, mask: BinaryMask, cfg: ModelConfig) -> np.ndarray:
    """N x 3 log mean colour of the masked pixels in each region.

    Regions and the empty-region fallback match pool_weights.  In log space
    a per-channel camera gain becomes an additive offset.
    """
    if mask.shape != (cfg.image, cfg.image):
        raise ShapeError(f"mask shape {mask.shape} does not match image size {cfg.image}")
    bits = mask.bits
    if not bits.any():
        raise StateError("cannot form a visual prompt from an empty mask")
    image = np.asarray(image, dtype=np.float64)
    side = math.isqrt(cfg.n_tokens)
    step = cfg.image // side
    w = bits.astype(np.float64)
    counts = w.reshape(side, step, side, step).sum(axis=(1, 3)).reshape(-1, 1)
    sums = (image * w[..., None]).reshape(side, step, side, step, 3).sum(axis=(1, 3)).reshape(-1, 3)
    whole = sums.sum(axis=0) / counts.sum()
    out = np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), whole)
    return np.log(out + COLOR_FLOOR)


def prompt_tokens(f_patches: Tensor, image: np.ndarray, mask: BinaryMask, params: ParamStore,
                  cfg: ModelConfig) -> Tensor:
    """Visual prompt tokens from frozen patch features and masked colours."""
    colors = Tensor(pooled_colors(image, mask, cfg))
    return (pool_visual_tokens(f_patches, mask, cfg) @ params["vp.w"] + colors @ params["vp.rgb"]
            + params["vp.b"])


# ---------------------------------------------------------------------------
# context block, fusion, alignment, mask head
# ---------------------------------------------------------------------------

@dataclass
class Embeddings:
    e_txt: Tensor | None
    e_vis_query: Tensor
    e_mask: Tensor
    e_vis_target: Tensor | None = None
    e_cond: Tensor | None = None
    ca_fuse: Tensor | None = None


def context_block(x: Tensor, params: ParamStore) -> Tensor:
    """Single-head self-attention plus a tanh feed-forward, both residual,
    followed by a final row normalization."""
    d = x.cols
    q = x @ params["ctx.wq"]
    k = x @ params["ctx.wk"]
    v = x @ params["ctx.wv"]
    attn = T.row_softmax(T.mul_const(q @ k.T, 1.0 / math.sqrt(d)))
    h = x + (attn @ v) @ params["ctx.wo"]
    ff = T.tanh(h @ params["ctx.w1"] + params["ctx.b1"]) @ params["ctx.w2"] + params["ctx.b2"]
    return T.mul_const(T.layer_norm(h + ff), EMBED_NORM / math.sqrt(d))


def context_forward(f_patches: Tensor, t_vis: Tensor, params: ParamStore,
                    t_txt: Tensor | None = None) -> dict[str, Tensor | None]:
    """Run the shared context block on [f_patches; t_ins; t_txt?; t_vis; t_mask].

    Returns the output rows at the text, visual-prompt and mask positions.
    Without ``t_txt`` the text slot is left out of the sequence entirely.
    """
    n = t_vis.rows
    parts = [f_patches, params["tok.ins"]]
    if t_txt is not None:
        parts.append(t_txt)
    parts += [t_vis + params["tok.vis"], params["tok.mask"]]
    out = context_block(T.concat_rows(parts), params)
    pos = f_patches.rows + 1
    e_txt = None
    if t_txt is not None:
        e_txt = T.slice_rows(out, pos, pos + 1)
        pos += 1
    e_vis = T.slice_rows(out, pos, pos + n)
    e_mask = T.slice_rows(out, pos + n, pos + n + 1)
    return {"e_txt": e_txt, "e_vis": e_vis, "e_mask": e_mask}


def cross_attention(e_txt: Tensor, e_vis: Tensor, params: ParamStore) -> Tensor:
    """Text row as query over the visual rows as keys/values; returns NxD."""
    n, d = e_vis.shape
    q = T.repeat_rows(e_txt, n) @ params["mcf.wq"]
    k = e_vis @ params["mcf.wk"]
    v = e_vis @ params["mcf.wv"]
    return T.row_softmax(T.mul_const(q @ k.T, 1.0 / math.sqrt(d))) @ v


def mcfuse(e_txt: Tensor, e_vis: Tensor, params: ParamStore,
           cfg: FusionConfig) -> tuple[Tensor, Tensor | None]:
    """Fuse the text embedding into the visual prompt embeddings.

    Returns (e_cond, ca_fuse); ca_fuse is None for variants without it.
    """
    if e_txt.shape != (1, e_vis.cols):
        raise ShapeError(f"text embedding must be 1x{e_vis.cols}, got {e_txt.shape}")
    v = cfg.variant
    if v == "add":
        return e_vis + e_txt, None
    if v == "ca_no_params":
        n = e_vis.rows
        return (T.repeat_rows(e_txt, n) @ e_vis.T) @ e_vis, None
    ca = cross_attention(e_txt, e_vis, params)
    if v == "ca_plain":
        return ca, ca
    if v == "fixed_k":
        k = Tensor([[cfg.fixed_k_value]])
    elif v == "learnable_residual":
        k = T.sigmoid(params["mcf.alpha"])
    else:
        raise ConfigError(f"unknown fusion variant {v!r}")
    return T.scale(e_vis, k) + T.scale(ca, 1.0 - k), ca


def xobjalign_loss(e_q: Tensor, e_t: Tensor, cfg: AlignConfig) -> Tensor:
    """Mean over rows of the row-wise distance between two embedding stacks."""
    if e_q.shape != e_t.shape:
        raise ShapeError(f"embedding shapes differ: {e_q.shape} vs {e_t.shape}")
    if cfg.metric == "euclidean":
        return T.mean_all(T.row_norm(e_q - e_t))
    return 1.0 - T.mean_all(T.row_cosine(e_q, e_t))


def mask_head(f_pixels: Tensor, e_cond: Tensor, e_mask: Tensor, params: ParamStore,
              gt: BinaryMask | None = None, cfg: ModelConfig | None = None):
    """Per-pixel logits <f_pixels[p], s * norm(proj(mean(e_cond) + e_mask))> + bias.

    With ``gt`` also returns BCE + Dice (weights from ``cfg``, default 1:1).
    """
    c = T.mean_rows(e_cond) + e_mask
    c = T.scale(T.layer_norm(c @ params["head.w"] + params["head.b"]), params["head.scale"])
    logits = f_pixels @ c.T + params["head.bias"]
    if gt is None:
        return logits, None
    if gt.bits.size != logits.rows:
        raise ShapeError(f"gt mask has {gt.bits.size} pixels, logits have {logits.rows}")
    target = gt.bits.reshape(-1, 1).astype(np.float64)
    wb, wd = (cfg.bce_weight, cfg.dice_weight) if cfg else (1.0, 1.0)
    loss = T.mul_const(T.bce_with_logits(logits, target), wb) + T.mul_const(T.dice_loss(logits, target), wd)
    return logits, loss


def total_loss(l_mask, l_xobj, cfg: AlignConfig):
    """L = L_mask + lambda * L_xobj (works on floats or 1x1 tensors)."""
    if isinstance(l_mask, Tensor):
        return l_mask + T.mul_const(l_xobj, cfg.lambda_xobj)
    return l_mask + cfg.lambda_xobj * l_xobj


# ---------------------------------------------------------------------------
# the assembled model
# ---------------------------------------------------------------------------

@dataclass
class StepOutput:
    logits: Tensor
    l_mask: Tensor | None
    l_xobj: Tensor | None
    loss: Tensor | None
    emb: Embeddings


class ObjectRelator:
    """Parameters plus the configuration that decides which pathways run.

    ``mcfuse_enabled`` controls the text condition and fusion module as a unit:
    without it the text token is left out and e_cond is the visual prompt
    embedding.
    """

    def __init__(self, cfg: ModelConfig | None = None, fusion: FusionConfig | None = None,
                 align: AlignConfig | None = None, mcfuse_enabled: bool = True,
                 xobjalign_enabled: bool = True, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg or ModelConfig()
        self.fusion = fusion or FusionConfig()
        self.align = align or AlignConfig()
        self.mcfuse_enabled = mcfuse_enabled
        self.xobjalign_enabled = xobjalign_enabled
        self.params = params if params is not None else init_params(self.cfg, seed)

    def _text_token(self, category: int) -> Tensor:
        if not 0 <= category < self.cfg.n_categories:
            raise ConfigError(f"text category {category} out of range")
        return T.slice_rows(self.params["txt.table"], category, category + 1)

    def _embed(self, f_target: Tensor, query_image, query_mask: BinaryMask,
               text_category: int | None, use_text: bool) -> tuple[Embeddings, Tensor]:
        p, cfg = self.params, self.cfg
        f_query = encode_patches(query_image, p, cfg)
        t_vis = prompt_tokens(f_query, query_image, query_mask, p, cfg)
        t_txt = self._text_token(text_category) if use_text else None
        ctx = context_forward(f_target, t_vis, p, t_txt)
        emb = Embeddings(ctx["e_txt"], ctx["e_vis"], ctx["e_mask"])
        if use_text:
            emb.e_cond, emb.ca_fuse = mcfuse(emb.e_txt, emb.e_vis_query, p, self.fusion)
        else:
            emb.e_cond = emb.e_vis_query
        return emb, t_txt

    def forward(self, query_image, query_mask: BinaryMask, text_category: int | None,
                target_image, target_mask: BinaryMask | None = None, *,
                mode: str = "dual", with_alignment: bool = False) -> StepOutput:
        """One pair.  ``target_mask`` is used only for the losses.

        ``mode`` is "dual" (text + fusion when the model has them) or
        "visual_only" (no text token, no fusion).
        """
        if mode not in ("dual", "visual_only"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        p, cfg = self.params, self.cfg
        use_text = self.mcfuse_enabled and mode == "dual"
        f_enc = encode_patches(target_image, p, cfg)
        f_pixels = decode_pixels(f_enc, target_image, p, cfg)
        f_target = project_patches(f_enc, p)
        emb, t_txt = self._embed(f_target, query_image, query_mask, text_category, use_text)
        logits, l_mask = mask_head(f_pixels, emb.e_cond, emb.e_mask, p, target_mask, cfg)
        l_xobj = None
        if with_alignment:
            if target_mask is None or target_mask.area() == 0:
                raise StateError("the alignment pass needs a nonempty target mask")
            t_vis_target = prompt_tokens(f_enc, target_image, target_mask, p, cfg)
            emb.e_vis_target = context_forward(f_target, t_vis_target, p, t_txt)["e_vis"]
            l_xobj = xobjalign_loss(emb.e_vis_query, emb.e_vis_target, self.align)
        loss = None
        if l_mask is not None:
            loss = total_loss(l_mask, l_xobj, self.align) if l_xobj is not None else l_mask
        return StepOutput(logits, l_mask, l_xobj, loss, emb)

    def predict_logits(self, query_image, query_mask: BinaryMask, text_category: int | None,
                       target_image, mode: str = "dual") -> np.ndarray:
        with T.no_grad():
            out = self.forward(query_image, query_mask, text_category, target_image, mode=mode)
        return out.logits.data.reshape(self.cfg.image, self.cfg.image)

    def predict_mask(self, query_image, query_mask: BinaryMask, text_category: int | None,
                     target_image, mode: str = "dual") -> BinaryMask:
        return BinaryMask(self.predict_logits(query_image, query_mask, text_category,
                                              target_image, mode) > 0.0)

    def trainable_names(self, stage: str, freeze_encoder: bool = True) -> list[str]:
        """Parameter names updated in stage "s1" or "s2"."""
        names = self.params.names()
        if stage == "s1":
            return [n for n in MCFUSE_PARAMS if n in names]
        if stage != "s2":
            raise ConfigError(f"unknown stage {stage!r}")
        skip = set()
        if freeze_encoder:
            skip |= set(ENCODER_PARAMS)
        if not self.mcfuse_enabled:
            skip |= set(MCFUSE_PARAMS) | set(TEXT_PARAMS)
        elif self.fusion.variant != "learnable_residual":
            skip.add("mcf.alpha")
            if self.fusion.variant in ("add", "ca_no_params"):
                skip |= {"mcf.wq", "mcf.wk", "mcf.wv"}
        return [n for n in names if n not in skip]

    def describe(self) -> dict:
        return {
            "model": dataclasses.asdict(self.cfg),
            "fusion": dataclasses.asdict(self.fusion),
            "align": dataclasses.asdict(self.align),
            "mcfuse_enabled": self.mcfuse_enabled,
            "xobjalign_enabled": self.xobjalign_enabled,
            "n_parameters": self.params.n_values(),
        }


def parameter_count(cfg: ModelConfig) -> int:
    d, k, h = cfg.dim, cfg.n_categories, cfg.ff_mult * cfg.dim
    pdim = cfg.patch * cfg.patch * 3
    return (pdim * d + d          # encoder
            + d * d + d           # projector
            + d * d + 3 * d + d   # prompt projection
            + d * d + 3 * cfg.pixel_window ** 2 * d + d   # pixel decoder
            + 4 * d * d + d * h + h + h * d + d   # context block
            + 3 * d + k * d       # special tokens, text table
            + 3 * d * d + 1       # fusion
            + d * d + d + 2)      # head


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def checkpoint_dict(model: ObjectRelator, extra: dict | None = None) -> dict:
    p = model.params
    return {
        "version": CHECKPOINT_VERSION,
        "model": model.describe(),
        "params": {n: _encode_array(p[n].data) for n in p},
        "optimizer": {
            "step_count": p.step_count,
            "moment1": {n: _encode_array(p.moment1[n]) for n in p},
            "moment2": {n: _encode_array(p.moment2[n]) for n in p},
        },
        **(extra or {}),
    }


def save_checkpoint(path: str | os.PathLike, model: ObjectRelator, extra: dict | None = None) -> None:
    """Write the checkpoint as JSON (float64 arrays base64-encoded), atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(checkpoint_dict(model, extra), indent=1))
    os.replace(tmp, path)


def model_from_checkpoint(obj: dict) -> ObjectRelator:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {obj.get('version')!r}")
    m = obj["model"]
    params = ParamStore()
    for name, arr in obj["params"].items():
        params.add(name, _decode_array(arr))
        params.moment1[name] = _decode_array(obj["optimizer"]["moment1"][name])
        params.moment2[name] = _decode_array(obj["optimizer"]["moment2"][name])
    params.step_count = int(obj["optimizer"]["step_count"])
    return ObjectRelator(ModelConfig(**m["model"]), FusionConfig(**m["fusion"]), AlignConfig(**m["align"]),
                         m["mcfuse_enabled"], m["xobjalign_enabled"], params=params)


def load_checkpoint(path: str | os.PathLike) -> tuple[ObjectRelator, dict]:
    obj = json.loads(Path(path).read_text())
    return model_from_checkpoint(obj), obj
