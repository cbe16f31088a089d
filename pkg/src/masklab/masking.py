"""Tube mask generation and attention interaction matrices.

High/low-informed masks rank patches by the CLS attention row of the
final self-attention layer, averaged over heads and over the sampled
tube of frames.  Interaction matrices gate who may attend to whom:
spatially, masked tokens are invisible to everyone but themselves;
temporally, unmasked frames cannot see masked frames while masked
frames see everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, InputError


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


@dataclass(frozen=True)
class AttentionWeights:
    """CLS-to-patch weights, head-averaged then tube-averaged."""

    w: np.ndarray                  # [n], nonnegative
    frame_range: tuple[int, int]   # inclusive (a_s, a_e)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise InputError(f"attention weights must be 1-D, got {w.shape}")
        if np.any(w < 0):
            raise InputError("attention weights must be nonnegative")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class TubeMask:
    """One spatial index set applied to every frame in [a_s, a_e]."""

    patch_indices: tuple
    a_s: int
    a_e: int
    kind: str            # high | low | random | random_tube
    ratio: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.patch_indices)
        if list(idx) != sorted(set(idx)):
            raise InputError("patch_indices must be sorted and unique")
        if not (0 <= self.a_s <= self.a_e):
            raise InputError(f"bad frame range [{self.a_s}, {self.a_e}]")
        if self.kind not in ("high", "low", "random", "random_tube"):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "patch_indices", idx)

    @property
    def frames(self) -> range:
        return range(self.a_s, self.a_e + 1)


@dataclass(frozen=True)
class InteractionMask:
    """Binary [T, T] gate multiplied into attention; 0 blocks the pair."""

    u: np.ndarray
    level: str           # spatial | temporal

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise InputError(f"interaction mask must be square, got {u.shape}")
        if not np.all((u == 0.0) | (u == 1.0)):
            raise InputError("interaction mask entries must be 0 or 1")
        if self.level == "spatial" and not np.all(np.diag(u) == 1.0):
            raise ContractError("spatial interaction mask must keep the diagonal")
        if self.level not in ("spatial", "temporal"):
            raise ConfigError(f"unknown interaction level {self.level!r}")
        u.flags.writeable = False
        object.__setattr__(self, "u", u)


def extract_cls_weights(a_last, a_s: int, a_e: int) -> AttentionWeights:
    """Head-average the final attention, take CLS->patch row, tube-average."""
    a = _as_array(a_last)
    if a.ndim != 4:
        raise InputError(f"attention stack must be [M, H, T, T], got {a.shape}")
    m = a.shape[0]
    if not (0 <= a_s <= a_e < m):
        raise InputError(f"frame range [{a_s}, {a_e}] out of bounds for M={m}")
    head_mean = a.mean(axis=1)                 # [M, T, T]
    cls_rows = head_mean[:, 0, 1:]             # drop the CLS->CLS column
    w = cls_rows[a_s:a_e + 1].mean(axis=0)
    return AttentionWeights(w=w, frame_range=(a_s, a_e))


def sample_tube(m: int, rng: np.random.Generator) -> tuple[int, int]:
    """Draw two frame indices independently and return them sorted."""
    if m < 1:
        raise ConfigError(f"need at least one frame, got M={m}")
    a = int(rng.integers(0, m))
    b = int(rng.integers(0, m))
    return (a, b) if a <= b else (b, a)


def informed_mask(weights: AttentionWeights, r: float, order: str) -> TubeMask:
    """Top-k (descending) or bottom-k (ascending) patches by attention weight.

    k = floor(r * n); ties resolve to the lower index via a stable sort.
    """
    if not (0.0 <= r <= 1.0):
        raise ConfigError(f"mask ratio must lie in [0,1], got {r}")
    w = weights.w
    n = w.shape[0]
    k = math.floor(r * n)
    if order == "descending":
        ranked = np.argsort(-w, kind="stable")
        kind = "high"
    elif order == "ascending":
        ranked = np.argsort(w, kind="stable")
        kind = "low"
    else:
        raise ConfigError(f"order must be ascending or descending, got {order!r}")
    a_s, a_e = weights.frame_range
    return TubeMask(patch_indices=tuple(sorted(int(i) for i in ranked[:k])),
                    a_s=a_s, a_e=a_e, kind=kind, ratio=float(r))


def baseline_mask(n: int, m: int, r: float, kind: str, rng: np.random.Generator):
    """Random baselines: per-frame subsets, or one subset over a sampled tube."""
    if not (0.0 <= r <= 1.0):
        raise ConfigError(f"mask ratio must lie in [0,1], got {r}")
    k = math.floor(r * n)
    if kind == "random":
        out = []
        for f in range(m):
            idx = rng.choice(n, size=k, replace=False)
            out.append(TubeMask(patch_indices=tuple(sorted(int(i) for i in idx)),
                                a_s=f, a_e=f, kind="random", ratio=float(r)))
        return out
    if kind == "random_tube":
        a_s, a_e = sample_tube(m, rng)
        idx = rng.choice(n, size=k, replace=False)
        return TubeMask(patch_indices=tuple(sorted(int(i) for i in idx)),
                        a_s=a_s, a_e=a_e, kind="random_tube", ratio=float(r))
    raise ConfigError(f"baseline kind must be random or random_tube, got {kind!r}")


def apply_pixel_mask(video: np.ndarray, mask: TubeMask, patch: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Replace masked patches with uniform [0,1] noise on a copy of the video.

    Noise is drawn in one call covering (frames in tube) x (patches) so the
    result is a pure function of the rng state.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise InputError(f"video must be [M, h, w, c], got {video.shape}")
    m, h, w, c = video.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame {h}x{w} not divisible by patch {patch}")
    cols = w // patch
    n = (h // patch) * cols
    if mask.patch_indices and mask.patch_indices[-1] >= n:
        raise InputError(f"mask index {mask.patch_indices[-1]} >= n={n}")
    if mask.a_e >= m:
        raise InputError(f"mask frame range exceeds M={m}")
    out = video.copy()
    if not mask.patch_indices:
        return out
    frames = list(mask.frames)
    noise = rng.uniform(0.0, 1.0,
                        size=(len(frames), len(mask.patch_indices), patch, patch, c))
    for fi, f in enumerate(frames):
        for pi, idx in enumerate(mask.patch_indices):
            row, col = divmod(idx, cols)
            out[f, row * patch:(row + 1) * patch,
                col * patch:(col + 1) * patch, :] = noise[fi, pi]
    return out


def apply_pixel_masks(video: np.ndarray, masks, patch: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Apply a list of per-frame masks (the random baseline) sequentially."""
    out = np.asarray(video, dtype=np.float64).copy()
    for mask in masks:
        out = apply_pixel_mask(out, mask, patch, rng)
    return out


def spatial_interaction_mask(flags) -> InteractionMask:
    """One-way spatial gate: u(i,j)=0 iff token j is masked and i != j.

    flags[t] is True when token t is masked; index 0 is the CLS token and
    must be unmasked.
    """
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 1:
        raise InputError("token flags must be 1-D")
    if flags[0]:
        raise ContractError("CLS token cannot be masked")
    t = flags.shape[0]
    u = np.ones((t, t), dtype=np.float64)
    u[:, flags] = 0.0
    np.fill_diagonal(u, 1.0)
    return InteractionMask(u=u, level="spatial")


def temporal_interaction_mask(flags) -> InteractionMask:
    """Temporal gate: u(i,j)=0 iff frame i is unmasked and frame j is masked."""
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 1:
        raise InputError("frame flags must be 1-D")
    t = flags.shape[0]
    u = np.ones((t, t), dtype=np.float64)
    u[np.ix_(~flags, flags)] = 0.0
    return InteractionMask(u=u, level="temporal")
