"""Synthetic video-caption corpus: one colored shape moving over a background.

A scene is a point in a small attribute grid (shape x color x motion x
speed x background, 240 combinations).  The renderer and the caption
are both pure functions of the scene, so captions and clips are paired
by construction and the whole corpus can be enumerated for oracles.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
MOTIONS = ("left", "right", "up", "down", "still")
SPEEDS = ("slow", "fast")
BACKGROUNDS = ("plain", "striped")

SOS_ID = 0
EOS_ID = 1

# id tables follow caption order: color, shape, motion, speed, background
_OFFSETS = {}
_next = 2
for _field, _vals in (("color", COLORS), ("shape", SHAPES), ("motion", MOTIONS),
                      ("speed", SPEEDS), ("background", BACKGROUNDS)):
    _OFFSETS[_field] = _next
    _next += len(_vals)
VOCAB_SIZE = _next

_COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.1, 0.1, 0.9),
    "yellow": (0.9, 0.9, 0.1),
}
_MOTION_DIR = {
    "left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0),
    "still": (0, 0),
}
_SPEED_PX = {"slow": 1.5, "fast": 3.5}

CAPTION_LEN = 7


@dataclass(frozen=True)
class SyntheticScene:
    shape: str
    color: str
    motion: str
    speed: str
    background: str

    def __post_init__(self):
        for field, table in (("shape", SHAPES), ("color", COLORS),
                             ("motion", MOTIONS), ("speed", SPEEDS),
                             ("background", BACKGROUNDS)):
            if getattr(self, field) not in table:
                raise InputError(f"unknown {field}: {getattr(self, field)!r}")

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "motion": self.motion,
                "speed": self.speed, "background": self.background}


def all_scenes() -> list[SyntheticScene]:
    """All 240 scenes in a fixed enumeration order."""
    return [SyntheticScene(*combo) for combo in
            itertools.product(SHAPES, COLORS, MOTIONS, SPEEDS, BACKGROUNDS)]


def caption_of(scene: SyntheticScene) -> np.ndarray:
    """Token ids [SOS, color, shape, motion, speed, background, EOS]."""
    ids = [SOS_ID,
           _OFFSETS["color"] + COLORS.index(scene.color),
           _OFFSETS["shape"] + SHAPES.index(scene.shape),
           _OFFSETS["motion"] + MOTIONS.index(scene.motion),
           _OFFSETS["speed"] + SPEEDS.index(scene.speed),
           _OFFSETS["background"] + BACKGROUNDS.index(scene.background),
           EOS_ID]
    return np.asarray(ids, dtype=np.int64)


def scene_of_caption(ids) -> SyntheticScene:
    """Invert caption_of; malformed sequences are rejected."""
    ids = np.asarray(ids)
    if ids.shape != (CAPTION_LEN,):
        raise InputError(f"caption must have {CAPTION_LEN} tokens, got {ids.shape}")
    if ids[0] != SOS_ID or ids[-1] != EOS_ID:
        raise InputError("caption must be SOS-framed with a trailing EOS")

    def pick(field, table, tok):
        k = int(tok) - _OFFSETS[field]
        if not (0 <= k < len(table)):
            raise InputError(f"token {tok} is not a {field} id")
        return table[k]

    return SyntheticScene(
        color=pick("color", COLORS, ids[1]),
        shape=pick("shape", SHAPES, ids[2]),
        motion=pick("motion", MOTIONS, ids[3]),
        speed=pick("speed", SPEEDS, ids[4]),
        background=pick("background", BACKGROUNDS, ids[5]),
    )


def _background(h: int, w: int, kind: str) -> np.ndarray:
    img = np.empty((h, w, 3), dtype=np.float64)
    if kind == "plain":
        img[:] = 0.15
    else:
        rows = (np.arange(h) // 4) % 2
        img[:] = np.where(rows[:, None, None] == 0, 0.10, 0.25)
    return img


def _footprint(shape: str, h: int, w: int, cy: float, cx: float,
               radius: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    # upward-pointing triangle: apex at cy - radius
    return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)


def render_clip(scene: SyntheticScene, m: int = 6, h: int = 32,
                w: int = 32) -> np.ndarray:
    """Deterministic [M, h, w, 3] clip with pixel values in [0, 1]."""
    radius = max(2, round(min(h, w) * 5 / 32))
    margin = radius + 1
    dy, dx = _MOTION_DIR[scene.motion]
    step = _SPEED_PX[scene.speed]
    rgb = np.asarray(_COLOR_RGB[scene.color])
    bg = _background(h, w, scene.background)
    clip = np.empty((m, h, w, 3), dtype=np.float64)
    for f in range(m):
        off = (f - (m - 1) / 2.0) * step
        cy = np.clip(round(h / 2 + dy * off), margin, h - 1 - margin)
        cx = np.clip(round(w / 2 + dx * off), margin, w - 1 - margin)
        alpha = _footprint(scene.shape, h, w, cy, cx, radius)
        frame = bg.copy()
        frame[alpha] = rgb
        clip[f] = frame
    return clip


def gen_pair(scene_or_seed, m: int = 6, h: int = 32, w: int = 32):
    """Render one (video, caption) pair from a scene or a sampling seed."""
    if isinstance(scene_or_seed, SyntheticScene):
        scene = scene_or_seed
    else:
        rng = np.random.default_rng(int(scene_or_seed))
        scene = all_scenes()[int(rng.integers(0, 240))]
    return render_clip(scene, m=m, h=h, w=w), caption_of(scene)


def _config_hash(meta: dict) -> str:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def gen_dataset(count: int, seed: int, out_dir, m: int = 6, h: int = 32,
                w: int = 32) -> Path:
    """Sample scenes and write manifest.json plus pairs/<id>.{tns,cap}."""
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    space = all_scenes()
    warning = None
    if count <= len(space):
        picks = rng.choice(len(space), size=count, replace=False)
    else:
        picks = rng.integers(0, len(space), size=count)
        warning = (f"count {count} exceeds the {len(space)}-scene space; "
                   "sampled with replacement")
    scenes = [space[int(i)] for i in picks]

    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    gen_cfg = {"count": count, "seed": seed, "frames": m, "height": h,
               "width": w, "format": 1}
    manifest = {
        "config": gen_cfg,
        "config_hash": _config_hash(gen_cfg),
        "scenes": [s.to_dict() for s in scenes],
    }
    if warning:
        manifest["warning"] = warning
    for i, scene in enumerate(scenes):
        clip = render_clip(scene, m=m, h=h, w=w)
        sid = f"{i:04d}"
        nm.save_tensor(out / "pairs" / f"{sid}.tns", clip, name=sid)
        cap_lines = "\n".join(str(int(t)) for t in caption_of(scene))
        (out / "pairs" / f"{sid}.cap").write_text(cap_lines + "\n")
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


@dataclass
class Dataset:
    videos: np.ndarray    # [N, M, h, w, 3]
    captions: np.ndarray  # [N, 7] int64
    scenes: list
    meta: dict

    def __len__(self) -> int:
        return self.videos.shape[0]


def dataset_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()[:16]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    scenes = [SyntheticScene(**d) for d in manifest["scenes"]]
    videos, captions = [], []
    for i in range(len(scenes)):
        sid = f"{i:04d}"
        _, clip = nm.load_tensor(root / "pairs" / f"{sid}.tns")
        videos.append(clip)
        lines = (root / "pairs" / f"{sid}.cap").read_text().split()
        captions.append([int(tok) for tok in lines])
    return Dataset(videos=np.stack(videos),
                   captions=np.asarray(captions, dtype=np.int64),
                   scenes=scenes, meta=manifest)


@dataclass
class Batch:
    videos: np.ndarray
    captions: np.ndarray
    indices: np.ndarray


def batches(dataset: Dataset, b: int, epoch_seed: int):
    """Epoch-seeded shuffle into fixed-size batches; the ragged tail drops."""
    n = len(dataset)
    if b > n:
        raise ConfigError(f"batch size {b} exceeds dataset size {n}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n - b + 1, b):
        idx = order[start:start + b]
        yield Batch(videos=dataset.videos[idx], captions=dataset.captions[idx],
                    indices=idx)


def import_feature_pairs(root) -> Dataset:
    """Import hook for externally extracted features (documented, untested).

    Expects the dataset layout above, but pairs/<id>.tns may hold arbitrary
    float feature stacks instead of rendered pixels; captions stay one id
    per line.  Shapes are taken as-is, so downstream configs must match.
    """
    return load_dataset(root)
