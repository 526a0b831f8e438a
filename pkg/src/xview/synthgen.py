"""Deterministic synthetic ego/exo view pairs with analytic ground truth.

A scene lives on a 96x96 canvas.  The exo view is the whole canvas resampled
to 64x64; the ego view is a zoomed, rotated crop centred near the query
object, seen through a camera with its own brightness offset and colour cast.
Both views and both masks are rasterised from the same object geometry by
evaluating shape membership at pixel centres.

Sequences share one scene whose objects drift a little from frame to frame.
Every sequence draws from its own RNG stream derived from
``(seed, split, sequence index)``, so generation order does not matter.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .masks import BinaryMask, load_rle, save_rle

CATEGORIES = ("disc", "square", "triangle", "bar", "ring")
SPLIT_IDS = {"train": 0, "val": 1}
DIRECTIONS = ("ego2exo", "exo2ego", "joint")


@dataclass
class GeneratorConfig:
    canvas: int = 96
    image: int = 64
    n_categories: int = 5
    min_objects: int = 3
    max_objects: int = 6
    min_size: float = 7.0
    max_size: float = 12.0
    distractor_same_category_p: float = 0.35
    # hue = category * hue_spacing + U(-hue_jitter, hue_jitter); the defaults
    # make colour independent of category
    hue_spacing: float = 0.0
    hue_jitter: float = 0.5
    n_clutter: tuple[int, int] = (4, 10)
    zoom: tuple[float, float] = (1.5, 3.0)
    rotation_deg: float = 25.0
    brightness: float = 0.05
    color_cast: float = 0.3
    center_jitter_px: float = 3.0
    pixel_noise: float = 0.02
    p_occ: float = 0.15
    text_noise: float = 0.2
    seq_len: int = 8
    drift_px: float = 2.0
    drift_deg: float = 3.0
    max_retries: int = 200

    def __post_init__(self):
        try:
            self.n_clutter = tuple(int(v) for v in self.n_clutter)
            self.zoom = tuple(float(v) for v in self.zoom)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"n_clutter and zoom must be [low, high] pairs: {exc}") from exc
        if len(self.n_clutter) != 2 or len(self.zoom) != 2:
            raise ConfigError("n_clutter and zoom must be [low, high] pairs")
        if not 1 <= self.n_categories <= len(CATEGORIES):
            raise ConfigError(f"n_categories must be in 1..{len(CATEGORIES)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError("need 0 < min_size <= max_size")
        if not 0.0 <= self.p_occ <= 1.0 or not 0.0 <= self.text_noise <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not 0.0 <= self.distractor_same_category_p <= 1.0:
            raise ConfigError("distractor_same_category_p must lie in [0, 1]")
        if self.zoom[0] <= 0 or self.zoom[0] > self.zoom[1]:
            raise ConfigError("zoom range must be positive and ordered")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.image % 8 or self.canvas < self.image:
            raise ConfigError("image size must be a multiple of 8 and <= canvas")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_clutter"] = list(self.n_clutter)
        d["zoom"] = list(self.zoom)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------

@dataclass
class ObjectSpec:
    category: int
    center: tuple[float, float]
    size: float
    rotation: float
    color: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"category": self.category, "center": list(self.center), "size": self.size,
                "rotation": self.rotation, "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        return cls(int(d["category"]), tuple(d["center"]), float(d["size"]),
                   float(d["rotation"]), tuple(d["color"]))


@dataclass
class Clutter:
    """Axis-aligned rectangle of background clutter."""
    x0: float
    y0: float
    x1: float
    y1: float
    color: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"box": [self.x0, self.y0, self.x1, self.y1], "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "Clutter":
        return cls(*d["box"], tuple(d["color"]))


@dataclass
class SceneSpec:
    canvas: int
    background: float
    objects: list[ObjectSpec]
    distractors: list[Clutter]
    target_index: int = 0

    def __post_init__(self):
        if not 0 <= self.target_index < len(self.objects):
            raise GenerationError("target_index out of range")

    @property
    def target(self) -> ObjectSpec:
        return self.objects[self.target_index]

    def to_dict(self) -> dict:
        return {"canvas": self.canvas, "background": self.background,
                "objects": [o.to_dict() for o in self.objects],
                "distractors": [c.to_dict() for c in self.distractors],
                "target_index": self.target_index}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["canvas"]), float(d["background"]),
                   [ObjectSpec.from_dict(o) for o in d["objects"]],
                   [Clutter.from_dict(c) for c in d["distractors"]], int(d["target_index"]))


@dataclass
class ViewTransform:
    """Maps output pixel (row i, col j) to canvas point center + R(rot) @ (u, v) * scale."""
    center: tuple[float, float]
    scale: float
    rotation: float = 0.0
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brightness: float = 0.0

    def canvas_coords(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(size) + 0.5 - size / 2.0) * self.scale
        u, v = np.meshgrid(c, c)
        cos, sin = math.cos(self.rotation), math.sin(self.rotation)
        x = self.center[0] + cos * u - sin * v
        y = self.center[1] + sin * u + cos * v
        return x, y

    def to_dict(self) -> dict:
        return {"center": list(self.center), "scale": self.scale, "rotation": self.rotation,
                "gains": list(self.gains), "brightness": self.brightness}

    @classmethod
    def from_dict(cls, d: dict) -> "ViewTransform":
        return cls(tuple(d["center"]), float(d["scale"]), float(d["rotation"]),
                   tuple(d["gains"]), float(d["brightness"]))


def exo_view(config: GeneratorConfig) -> ViewTransform:
    return ViewTransform((config.canvas / 2.0, config.canvas / 2.0), config.canvas / config.image)


def ego_view(center, zoom: float, rotation: float, config: GeneratorConfig,
             gains=(1.0, 1.0, 1.0), brightness: float = 0.0) -> ViewTransform:
    """Zoom is relative to the full canvas: zoom z shows canvas/z canvas pixels."""
    return ViewTransform(tuple(center), config.canvas / config.image / zoom, rotation,
                         tuple(gains), brightness)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def shape_inside(obj: ObjectSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership of canvas points in the object's analytic shape."""
    dx, dy = x - obj.center[0], y - obj.center[1]
    cos, sin = math.cos(obj.rotation), math.sin(obj.rotation)
    u = cos * dx + sin * dy
    v = -sin * dx + cos * dy
    s = obj.size
    kind = CATEGORIES[obj.category]
    if kind == "disc":
        return u * u + v * v <= s * s
    if kind == "square":
        a = 0.85 * s
        return (np.abs(u) <= a) & (np.abs(v) <= a)
    if kind == "triangle":
        # equilateral, circumradius s, inradius s/2
        r = 0.5 * s
        inside = np.ones_like(u, dtype=bool)
        for ang in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6):
            inside &= math.cos(ang) * u + math.sin(ang) * v <= r
        return inside
    if kind == "bar":
        return (np.abs(u) <= s) & (np.abs(v) <= 0.4 * s)
    if kind == "ring":
        rr = u * u + v * v
        return (rr <= s * s) & (rr >= (0.55 * s) ** 2)
    raise GenerationError(f"unknown shape {kind}")


def _clutter_inside(c: Clutter, x, y):
    return (x >= c.x0) & (x < c.x1) & (y >= c.y0) & (y < c.y1)


def _object_color(category: int, rng: np.random.Generator, config: GeneratorConfig):
    hue = (category * config.hue_spacing + rng.uniform(-config.hue_jitter, config.hue_jitter)) % 1.0
    sat = rng.uniform(0.55, 0.9)
    val = rng.uniform(0.6, 0.95)
    return tuple(float(c) for c in colorsys.hsv_to_rgb(hue, sat, val))


# ---------------------------------------------------------------------------
# scene and view generation
# ---------------------------------------------------------------------------

def generate_scene(rng: np.random.Generator, config: GeneratorConfig) -> SceneSpec:
    """Sample a scene; object 0 is the query object."""
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    k = config.n_categories
    target_cat = int(rng.integers(k))
    cats = [target_cat] + [int(rng.integers(k)) for _ in range(n - 1)]
    if n > 1 and rng.random() < config.distractor_same_category_p:
        cats[1] = target_cat
    placed: list[ObjectSpec] = []
    for cat in cats:
        for _ in range(config.max_retries):
            size = float(rng.uniform(config.min_size, config.max_size))
            lo, hi = size + 1.0, config.canvas - size - 1.0
            if lo >= hi:
                raise GenerationError("object size too large for the canvas")
            cx, cy = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
            if all(math.hypot(cx - o.center[0], cy - o.center[1]) >= size + o.size
                   for o in placed):
                break
        else:
            raise GenerationError(f"could not place {n} objects after {config.max_retries} tries")
        placed.append(ObjectSpec(cat, (cx, cy), size, float(rng.uniform(0, 2 * math.pi)),
                                 _object_color(cat, rng, config)))
    background = float(rng.uniform(0.25, 0.45))
    clutter = []
    for _ in range(int(rng.integers(config.n_clutter[0], config.n_clutter[1] + 1))):
        w, h = rng.uniform(2, 6, size=2)
        x0, y0 = rng.uniform(0, config.canvas - 6, size=2)
        level = rng.uniform(0.15, 0.6)
        tint = rng.uniform(-0.06, 0.06, size=3)
        clutter.append(Clutter(float(x0), float(y0), float(x0 + w), float(y0 + h),
                               tuple(float(level + t) for t in tint)))
    return SceneSpec(config.canvas, background, placed, clutter, target_index=0)


def rasterize(scene: SceneSpec, view: ViewTransform, size: int, occluder=None):
    """Noise-free render of ``scene`` through ``view``.

    Returns (image HxWx3 float in [0, 1], target mask bool HxW).  Objects are
    painted in order with the target last; an occluder box (in view pixel
    coordinates, (r0, c0, r1, c1) inclusive-exclusive) is painted on top.
    """
    x, y = view.canvas_coords(size)
    img = np.empty((size, size, 3))
    img[...] = scene.background
    outside = (x < 0) | (x >= scene.canvas) | (y < 0) | (y >= scene.canvas)
    for c in scene.distractors:
        img[_clutter_inside(c, x, y)] = c.color
    order = [i for i in range(len(scene.objects)) if i != scene.target_index] + [scene.target_index]
    mask = None
    for i in order:
        obj = scene.objects[i]
        inside = shape_inside(obj, x, y)
        img[inside] = obj.color
        if i == scene.target_index:
            mask = inside.copy()
    img[outside] = 0.0
    mask &= ~outside
    if occluder is not None:
        r0, c0, r1, c1, level = occluder
        img[r0:r1, c0:c1] = level
        mask[r0:r1, c0:c1] = False
    img = img * np.asarray(view.gains) + view.brightness
    return np.clip(img, 0.0, 1.0), mask


def _occluder_for(mask: np.ndarray, rng: np.random.Generator):
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    h, w = mask.shape
    return (max(int(rows.min()) - 1, 0), max(int(cols.min()) - 1, 0),
            min(int(rows.max()) + 2, h), min(int(cols.max()) + 2, w),
            float(rng.uniform(0.05, 0.2)))


def _finish(img: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    if noise > 0:
        img = np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


@dataclass
class PairSample:
    """One temporally aligned query/target view pair.

    Images are stored as uint8 and exposed as float64 in [0, 1].
    """
    query_pixels: np.ndarray
    query_mask: BinaryMask
    target_pixels: np.ndarray
    target_mask: BinaryMask
    category: int
    text_category: int
    visible_query: bool
    visible_target: bool
    frame_id: int = 0
    sequence_id: str = ""
    query_role: str = "ego"
    scene: SceneSpec | None = None
    query_view: ViewTransform | None = None
    target_view: ViewTransform | None = None
    occluded: str | None = None

    @property
    def query_image(self) -> np.ndarray:
        return self.query_pixels.astype(np.float64) / 255.0

    @property
    def target_image(self) -> np.ndarray:
        return self.target_pixels.astype(np.float64) / 255.0

    @property
    def direction(self) -> str:
        return "ego2exo" if self.query_role == "ego" else "exo2ego"

    def swapped(self) -> "PairSample":
        """The same pair with query and target roles exchanged."""
        return dataclasses.replace(
            self, query_pixels=self.target_pixels, query_mask=self.target_mask,
            target_pixels=self.query_pixels, target_mask=self.query_mask,
            visible_query=self.visible_target, visible_target=self.visible_query,
            query_role="exo" if self.query_role == "ego" else "ego",
            query_view=self.target_view, target_view=self.query_view)

    def oriented(self, direction: str) -> "PairSample":
        return self if direction == self.direction else self.swapped()


def text_condition(category: int, noise_p: float, rng: np.random.Generator,
                   n_categories: int = len(CATEGORIES)) -> int:
    """Category with probability 1 - noise_p, otherwise a uniformly drawn other class."""
    if not 0.0 <= noise_p <= 1.0:
        raise ConfigError("noise_p must lie in [0, 1]")
    if n_categories < 2 or rng.random() >= noise_p:
        return int(category)
    other = int(rng.integers(n_categories - 1))
    return other if other < category else other + 1


def _sample_ego_camera(rng: np.random.Generator, config: GeneratorConfig) -> dict:
    return {
        "zoom": float(rng.uniform(*config.zoom)),
        "rotation": math.radians(float(rng.uniform(-config.rotation_deg, config.rotation_deg))),
        "brightness": float(rng.uniform(-config.brightness, config.brightness)),
        "gains": tuple(float(g) for g in rng.uniform(1 - config.color_cast, 1 + config.color_cast, 3)),
    }


def render_views(scene: SceneSpec, config: GeneratorConfig, rng: np.random.Generator,
                 camera: dict | None = None, occlude: str | None = "random") -> PairSample:
    """Render the ego (query) and exo (target) views of ``scene``.

    ``camera`` fixes the ego zoom/rotation/brightness/gains and the centre
    jitter (key ``jitter``); missing keys are sampled.  ``occlude`` is
    "random" (draw with probability p_occ), None, "ego" or "exo".
    """
    cam = _sample_ego_camera(rng, config)
    jitter = rng.uniform(-config.center_jitter_px, config.center_jitter_px, 2)
    cam["jitter"] = (float(jitter[0]), float(jitter[1]))
    if camera:
        cam.update(camera)
    tx, ty = scene.target.center
    ego = ego_view((tx + cam["jitter"][0], ty + cam["jitter"][1]), cam["zoom"], cam["rotation"],
                   config, cam["gains"], cam["brightness"])
    exo = exo_view(config)
    if occlude == "random":
        occlude = None
        if rng.random() < config.p_occ:
            occlude = "ego" if rng.random() < 0.5 else "exo"
    size = config.image
    views = {}
    for role, view in (("ego", ego), ("exo", exo)):
        _, clean_mask = rasterize(scene, view, size)
        occ = _occluder_for(clean_mask, rng) if occlude == role else None
        img, mask = rasterize(scene, view, size, occ)
        views[role] = (_finish(img, rng, config.pixel_noise), BinaryMask(mask))
    text = text_condition(scene.target.category, config.text_noise, rng, config.n_categories)
    (qp, qm), (tp, tm) = views["ego"], views["exo"]
    return PairSample(qp, qm, tp, tm, scene.target.category, text,
                      qm.area() >= 1, tm.area() >= 1, scene=scene, query_view=ego,
                      target_view=exo, occluded=occlude)


def _drift(scene: SceneSpec, motion: list, config: GeneratorConfig) -> SceneSpec:
    objs = []
    for obj, (vx, vy, w) in zip(scene.objects, motion):
        cx, cy = obj.center[0] + vx, obj.center[1] + vy
        lo, hi = obj.size + 1.0, config.canvas - obj.size - 1.0
        cx, cy = min(max(cx, lo), hi), min(max(cy, lo), hi)
        objs.append(dataclasses.replace(obj, center=(cx, cy), rotation=obj.rotation + w))
    return dataclasses.replace(scene, objects=objs)


def sequence_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLIT_IDS[split], int(index)]))


def generate_sequence(seed: int, split: str, index: int, length: int,
                      config: GeneratorConfig) -> list[PairSample]:
    """Frames of one sequence; query is the ego view."""
    rng = sequence_rng(seed, split, index)
    scene = generate_scene(rng, config)
    motion = []
    for _ in scene.objects:
        ang = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0, config.drift_px)
        motion.append((speed * math.cos(ang), speed * math.sin(ang),
                       math.radians(rng.uniform(-config.drift_deg, config.drift_deg))))
    cam = _sample_ego_camera(rng, config)
    seq_id = f"{split}-{index:04d}"
    frames = []
    for t in range(length):
        if t:
            scene = _drift(scene, motion, config)
            cam["zoom"] = float(np.clip(cam["zoom"] + rng.uniform(-0.05, 0.05), *config.zoom))
            cam["rotation"] += math.radians(float(rng.uniform(-2, 2)))
        sample = render_views(scene, config, rng, camera=dict(cam))
        sample.frame_id = t
        sample.sequence_id = seq_id
        frames.append(sample)
    return frames


def generate_split(seed: int, n: int, split: str, config: GeneratorConfig) -> list[list[PairSample]]:
    """``n`` samples as ceil(n / seq_len) sequences (the last one may be short)."""
    if n < 1:
        raise ConfigError("sample count must be >= 1")
    L = config.seq_len
    n_seq = math.ceil(n / L)
    return [generate_sequence(seed, split, i, min(L, n - i * L), config) for i in range(n_seq)]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError("PPM writer expects an HxWx3 uint8 array")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: not a binary PPM with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    data = np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def _frame_record(sample: PairSample, rel: str) -> dict:
    return {
        "frame_id": sample.frame_id,
        "image_path": f"{rel}.ppm",
        "query_mask_path": f"{rel}_q.json",
        "target_mask_path": f"{rel}_t.json",
        "category": sample.category,
        "text_category": sample.text_category,
        "visible_query": sample.visible_query,
        "visible_target": sample.visible_target,
        "query_view": sample.query_role,
        "occluded": sample.occluded,
        "views": {"query": sample.query_view.to_dict(), "target": sample.target_view.to_dict()},
        "scene": sample.scene.to_dict(),
    }


@dataclass
class Dataset:
    """Loaded or generated samples grouped by split and sequence."""
    train: list[list[PairSample]]
    val: list[list[PairSample]]
    direction: str = "ego2exo"
    seed: int = 0
    config: GeneratorConfig = field(default_factory=GeneratorConfig)

    def samples(self, split: str) -> list[PairSample]:
        return [s for seq in getattr(self, split) for s in seq]


def make_dataset(seed: int, n_train: int, n_val: int, direction: str = "ego2exo",
                 config: GeneratorConfig | None = None) -> Dataset:
    """Generate in memory.  Samples are stored in the manifest orientation."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    config = config or GeneratorConfig()
    train = generate_split(seed, n_train, "train", config)
    val = generate_split(seed, n_val, "val", config)
    if direction == "exo2ego":
        train = [[s.swapped() for s in seq] for seq in train]
        val = [[s.swapped() for s in seq] for seq in val]
    return Dataset(train, val, direction, seed, config)


def build_dataset(out_dir: str | os.PathLike, seed: int, n_train: int, n_val: int,
                  direction: str = "ego2exo", config: GeneratorConfig | None = None,
                  extra: dict | None = None) -> dict:
    """Write PPM images, RLE-JSON masks and manifest.json; return the manifest.

    Each image file holds the query view (left) and target view (right) side
    by side.  The tree is assembled in a temporary directory and renamed into
    place, so a failed run leaves nothing behind.
    """
    config = config or GeneratorConfig()
    ds = make_dataset(seed, n_train, n_val, direction, config)
    out_dir = Path(out_dir)
    parent = out_dir.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-", dir=parent))
    try:
        manifest = {
            "seed": seed, "n_train": n_train, "n_val": n_val, "direction": direction,
            "orientations": ["ego2exo", "exo2ego"] if direction == "joint" else [direction],
            "config": config.to_dict(),
            "sequences": [],
        }
        if extra:
            manifest.update(extra)
        for split in ("train", "val"):
            for seq in getattr(ds, split):
                seq_id = seq[0].sequence_id
                (tmp / split / seq_id).mkdir(parents=True)
                frames = []
                for s in seq:
                    rel = f"{split}/{seq_id}/f{s.frame_id:02d}"
                    write_ppm(tmp / f"{rel}.ppm", np.concatenate([s.query_pixels, s.target_pixels], axis=1))
                    (tmp / f"{rel}_q.json").write_text(save_rle(s.query_mask))
                    (tmp / f"{rel}_t.json").write_text(save_rle(s.target_mask))
                    frames.append(_frame_record(s, rel))
                manifest["sequences"].append({"id": seq_id, "split": split, "frames": frames})
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.json under {root}") from exc
    config = GeneratorConfig.from_dict(manifest["config"])
    splits: dict[str, list[list[PairSample]]] = {"train": [], "val": []}
    for seq in manifest["sequences"]:
        frames = []
        for fr in seq["frames"]:
            pix = read_ppm(root / fr["image_path"])
            half = pix.shape[1] // 2
            qm = load_rle((root / fr["query_mask_path"]).read_text())
            tm = load_rle((root / fr["target_mask_path"]).read_text())
            frames.append(PairSample(
                pix[:, :half].copy(), qm, pix[:, half:].copy(), tm,
                int(fr["category"]), int(fr["text_category"]),
                bool(fr["visible_query"]), bool(fr["visible_target"]),
                int(fr["frame_id"]), seq["id"], fr["query_view"],
                SceneSpec.from_dict(fr["scene"]),
                ViewTransform.from_dict(fr["views"]["query"]),
                ViewTransform.from_dict(fr["views"]["target"]), fr.get("occluded")))
        splits[seq["split"]].append(frames)
    return Dataset(splits["train"], splits["val"], manifest["direction"], int(manifest["seed"]), config)


def tree_digest(path: str | os.PathLike) -> str:
    """SHA-256 over relative paths and contents of every file under ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
