"""Toy transformer encoders with interaction-mask-aware attention.

One parameter store backs four roles: the spatial encoder doubles as the
co-encoder (same tensors, not copies), and one temporal encoder serves
both masked-reconstruction paths.  All forwards come in batched form;
the public single-clip ops wrap them.

Attention gating has two semantics behind
EncoderConfig.renormalize_gated_attention:

  True (default)  blocked keys are excluded from the softmax (additive
                  -1e30 bias).  Equivalent to renormalizing the gated
                  rows, and the only form under which unmasked outputs
                  are exactly independent of masked inputs.
  False           the gate multiplies post-softmax attention and rows
                  are left unnormalized.  Masked keys then still shift
                  every row through the softmax denominator, so the
                  isolation guarantee does not hold; kept for
                  experimentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, InputError
from .masking import InteractionMask
from .numerics import Tensor

_BIG = 1e30  # additive attention block; absorbs any finite logit exactly

SOS_ID = 0
EOS_ID = 1

_BLOCK_FIELDS = ("ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_out", "b_out",
                 "ln2_g", "ln2_b", "w_fc", "b_fc", "w_pr", "b_pr")


@dataclass(frozen=True)
class EncoderConfig:
    h: int = 32
    w: int = 32
    patch: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_frames: int = 6
    text_len: int = 7
    vocab_size: int = 18
    temporal_layers: int = 2
    temporal_heads: int = 4
    temporal_dim: int = 64
    mlp_ratio: int = 4
    renormalize_gated_attention: bool = True

    def __post_init__(self):
        if self.h % self.patch or self.w % self.patch:
            raise ConfigError(f"frame {self.h}x{self.w} not divisible by "
                              f"patch {self.patch}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must divide evenly into heads")
        if self.temporal_dim != self.d_model:
            raise ConfigError("temporal_dim must equal d_model here; "
                              "adapters are out of scope")
        if self.temporal_dim % self.temporal_heads:
            raise ConfigError("temporal_dim must divide evenly into heads")
        for name in ("h", "w", "patch", "d_model", "n_heads", "n_layers",
                     "n_frames", "text_len", "vocab_size", "temporal_layers",
                     "temporal_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def n_patches(self) -> int:
        return (self.h // self.patch) * (self.w // self.patch)

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1


@dataclass
class TokenSequence:
    tokens: Tensor                       # [T, d]
    mask_flags: Optional[np.ndarray] = None  # True where masked

    def __post_init__(self):
        if self.mask_flags is not None:
            flags = np.asarray(self.mask_flags, dtype=bool)
            if flags.shape != (self.tokens.shape[0],):
                raise ContractError("mask flags must align with tokens")
            self.mask_flags = flags


class ModelParams:
    """Named parameter leaves plus group labels for the two lr groups.

    The co-encoder is the spatial encoder: there is one set of
    'spatial.*' tensors and both roles read it.  Likewise 'temporal.*'
    serves the high- and low-mask paths.
    """

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def _add(self, name: str, array: np.ndarray, group: str) -> None:
        self._tensors[name] = Tensor(array, requires_grad=True, name=name)
        self._groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> tuple:
        return tuple(self._tensors)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def replace(self, name: str, array: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        if np.shape(array) != self._tensors[name].shape:
            raise ContractError(f"replacement for {name} changes shape")
        self._tensors[name] = Tensor(array, requires_grad=True, name=name)

    @property
    def sharing_groups(self) -> dict:
        return {
            "spatial_and_co_encoder": [n for n in self._tensors
                                       if n.startswith("spatial.")],
            "temporal_high_and_low_paths": [n for n in self._tensors
                                            if n.startswith("temporal.")],
        }


def _init_block(params: ModelParams, prefix: str, d: int, ratio: int,
                group: str, rng: np.random.Generator) -> None:
    hidden = ratio * d
    params._add(f"{prefix}.ln1_g", np.ones(d), group)
    params._add(f"{prefix}.ln1_b", np.zeros(d), group)
    params._add(f"{prefix}.w_qkv", rng.normal(0.0, 0.02, (d, 3 * d)), group)
    params._add(f"{prefix}.b_qkv", np.zeros(3 * d), group)
    params._add(f"{prefix}.w_out", rng.normal(0.0, 0.02, (d, d)), group)
    params._add(f"{prefix}.b_out", np.zeros(d), group)
    params._add(f"{prefix}.ln2_g", np.ones(d), group)
    params._add(f"{prefix}.ln2_b", np.zeros(d), group)
    params._add(f"{prefix}.w_fc", rng.normal(0.0, 0.02, (d, hidden)), group)
    params._add(f"{prefix}.b_fc", np.zeros(hidden), group)
    params._add(f"{prefix}.w_pr", rng.normal(0.0, 0.02, (hidden, d)), group)
    params._add(f"{prefix}.b_pr", np.zeros(d), group)


def init_params(config: EncoderConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams(config)
    d = config.d_model
    patch_dim = config.patch * config.patch * 3

    p._add("spatial.patch_w", rng.normal(0.0, 0.02, (patch_dim, d)), "backbone")
    p._add("spatial.patch_b", np.zeros(d), "backbone")
    p._add("spatial.cls", rng.normal(0.0, 0.02, (d,)), "backbone")
    p._add("spatial.pos", rng.normal(0.0, 0.01, (config.seq_len, d)), "backbone")
    for i in range(config.n_layers):
        _init_block(p, f"spatial.block{i}", d, config.mlp_ratio, "backbone", rng)
    p._add("spatial.ln_f_g", np.ones(d), "backbone")
    p._add("spatial.ln_f_b", np.zeros(d), "backbone")
    p._add("spatial.proj", rng.normal(0.0, 0.02, (d, d)), "backbone")

    p._add("text.emb", rng.normal(0.0, 0.02, (config.vocab_size, d)), "backbone")
    p._add("text.pos", rng.normal(0.0, 0.01, (config.text_len, d)), "backbone")
    for i in range(config.n_layers):
        _init_block(p, f"text.block{i}", d, config.mlp_ratio, "backbone", rng)
    p._add("text.ln_f_g", np.ones(d), "backbone")
    p._add("text.ln_f_b", np.zeros(d), "backbone")
    p._add("text.proj", rng.normal(0.0, 0.02, (d, d)), "backbone")

    p._add("temporal.pos", rng.normal(0.0, 0.01, (config.n_frames, d)), "new")
    for i in range(config.temporal_layers):
        _init_block(p, f"temporal.block{i}", d, config.mlp_ratio, "new", rng)
    p._add("temporal.ln_f_g", np.ones(d), "new")
    p._add("temporal.ln_f_b", np.zeros(d), "new")

    p._add("recon.pos", rng.normal(0.0, 0.01, (config.n_frames, d)), "new")
    _init_block(p, "recon.block", d, config.mlp_ratio, "new", rng)

    p._add("disc.w1", rng.normal(0.0, 0.02, (d, d)), "new")
    p._add("disc.b1", np.zeros(d), "new")
    p._add("disc.w2", rng.normal(0.0, 0.02, (d, 2)), "new")
    p._add("disc.b2", np.zeros(2), "new")

    p._add("gates.vis_w", rng.normal(0.0, 0.02, (d, 1)), "new")
    p._add("gates.vis_b", np.zeros(1), "new")
    p._add("gates.txt_w", rng.normal(0.0, 0.02, (d, 1)), "new")
    p._add("gates.txt_b", np.zeros(1), "new")

    p._add("log_tau", np.array(math.log(0.05)), "new")
    return p


# ------------------------------------------------------------------ building


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = nm.matmul(x, w)
    return nm.add(out, nm.broadcast_to(b, out.shape))


def apply_attention_gate(a: Tensor, u) -> Tensor:
    """Literal gate: multiply post-softmax attention elementwise by u."""
    u = np.asarray(getattr(u, "u", u), dtype=np.float64)
    if not np.all((u == 0.0) | (u == 1.0)):
        raise ContractError("attention gate must be binary")
    gate = nm.Tensor(u)
    if a.shape != u.shape:
        gate = nm.broadcast_to(nm.reshape(gate, (1,) * (a.ndim - 2) + u.shape),
                               a.shape)
    return nm.mul(a, gate)


def _gate_to_stack(u, batch: int, t: int) -> np.ndarray:
    """Normalize a gate argument to one [batch, T, T] binary stack."""
    if isinstance(u, InteractionMask):
        u = u.u
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u == 0.0) | (u == 1.0)):
        raise ContractError("attention gate must be binary")
    if u.shape == (t, t):
        u = np.broadcast_to(u, (batch, t, t))
    if u.shape != (batch, t, t):
        raise ContractError(f"gate shape {u.shape} incompatible with "
                            f"sequence length {t}")
    return u


def _attention_bias(u_stack: np.ndarray) -> Tensor:
    # 0 where allowed, -_BIG where blocked; adding 0.0 leaves logits bit-exact
    return nm.Tensor((u_stack - 1.0) * _BIG)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    x = nm.reshape(x, (b, t, n_heads, d // n_heads))
    return nm.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nm.reshape(nm.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _block_forward(params: ModelParams, prefix: str, x: Tensor,
                   n_heads: int, u_stack: Optional[np.ndarray] = None,
                   causal: bool = False,
                   renormalize: bool = True) -> tuple[Tensor, Tensor]:
    """One pre-LN transformer block on [B, T, d]; returns (tokens, A)."""
    b, t, d = x.shape
    dh = d // n_heads

    h = nm.layer_norm(x, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    qkv = _affine(h, params[f"{prefix}.w_qkv"], params[f"{prefix}.b_qkv"])
    q = _split_heads(nm.slice_axis(qkv, 2, 0, d), n_heads)
    k = _split_heads(nm.slice_axis(qkv, 2, d, 2 * d), n_heads)
    v = _split_heads(nm.slice_axis(qkv, 2, 2 * d, 3 * d), n_heads)

    scores = nm.scale(nm.matmul(q, nm.swap_last2(k)), 1.0 / math.sqrt(dh))
    if causal:
        tri = np.triu(np.full((t, t), -_BIG), k=1)
        scores = nm.add(scores, nm.broadcast_to(
            nm.Tensor(tri.reshape(1, 1, t, t)), scores.shape))
    if u_stack is not None and renormalize:
        bias = _attention_bias(u_stack)
        scores = nm.add(scores, nm.broadcast_to(
            nm.reshape(bias, (b, 1, t, t)), scores.shape))
    att = nm.softmax_lastdim(scores)
    used = att
    if u_stack is not None and not renormalize:
        gate = nm.broadcast_to(nm.reshape(nm.Tensor(u_stack), (b, 1, t, t)),
                               att.shape)
        used = nm.mul(att, gate)
    ctx = _merge_heads(nm.matmul(used, v))
    x = nm.add(x, _affine(ctx, params[f"{prefix}.w_out"],
                          params[f"{prefix}.b_out"]))

    h2 = nm.layer_norm(x, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])
    mid = nm.gelu(_affine(h2, params[f"{prefix}.w_fc"], params[f"{prefix}.b_fc"]))
    x = nm.add(x, _affine(mid, params[f"{prefix}.w_pr"], params[f"{prefix}.b_pr"]))
    return x, att


def _patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    f, h, w, c = frames.shape
    gh, gw = h // patch, w // patch
    x = frames.reshape(f, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(f, gh * gw, patch * patch * c))


def encode_frames(params: ModelParams, frames: np.ndarray,
                  gate_stack: Optional[np.ndarray] = None
                  ) -> tuple[Tensor, Tensor]:
    """Batched spatial encoder over stacked frames [F, h, w, 3].

    gate_stack, when given, holds one spatial interaction matrix per
    frame ([F, n+1, n+1]); frames without masked patches should carry
    all-ones rows.  Returns (CLS embeddings [F, d], final attention
    [F, H, n+1, n+1]).
    """
    cfg = params.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1:] != (cfg.h, cfg.w, 3):
        raise ConfigError(f"frames shaped {frames.shape} do not match config "
                          f"[{cfg.h}, {cfg.w}, 3]")
    f = frames.shape[0]
    t = cfg.seq_len
    if gate_stack is not None:
        gate_stack = _gate_to_stack(gate_stack, f, t)

    patches = nm.Tensor(_patchify(frames, cfg.patch))
    tokens = _affine(patches, params["spatial.patch_w"], params["spatial.patch_b"])
    cls = nm.broadcast_to(nm.reshape(params["spatial.cls"], (1, 1, cfg.d_model)),
                          (f, 1, cfg.d_model))
    x = nm.concat([cls, tokens], axis=1)
    x = nm.add(x, nm.broadcast_to(
        nm.reshape(params["spatial.pos"], (1, t, cfg.d_model)), (f, t, cfg.d_model)))

    att = None
    for i in range(cfg.n_layers):
        x, att = _block_forward(params, f"spatial.block{i}", x, cfg.n_heads,
                                u_stack=gate_stack,
                                renormalize=cfg.renormalize_gated_attention)
    cls_out = nm.reshape(nm.slice_axis(x, 1, 0, 1), (f, cfg.d_model))
    cls_out = nm.layer_norm(cls_out, params["spatial.ln_f_g"],
                            params["spatial.ln_f_b"])
    emb = nm.matmul(cls_out, params["spatial.proj"])
    return emb, att


def patch_embed(params: ModelParams, frame: np.ndarray) -> TokenSequence:
    """Project one frame into n patch tokens, prepend CLS, add positions."""
    cfg = params.config
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (cfg.h, cfg.w, 3):
        raise ConfigError(f"frame shaped {frame.shape} does not match config")
    patches = nm.Tensor(_patchify(frame[None], cfg.patch))
    tokens = _affine(patches, params["spatial.patch_w"], params["spatial.patch_b"])
    cls = nm.reshape(params["spatial.cls"], (1, 1, cfg.d_model))
    x = nm.concat([cls, tokens], axis=1)
    x = nm.add(x, nm.reshape(params["spatial.pos"], (1,) + params["spatial.pos"].shape))
    flags = np.zeros(cfg.seq_len, dtype=bool)
    return TokenSequence(tokens=nm.reshape(x, (cfg.seq_len, cfg.d_model)),
                         mask_flags=flags)


def msa_block(params: ModelParams, prefix: str, seq: TokenSequence,
              u: Optional[InteractionMask] = None
              ) -> tuple[TokenSequence, Tensor]:
    """One gated attention block over a single [T, d] sequence."""
    cfg = params.config
    t, d = seq.tokens.shape
    x = nm.reshape(seq.tokens, (1, t, d))
    stack = None
    if u is not None:
        stack = _gate_to_stack(u, 1, t)
    x, att = _block_forward(params, prefix, x, cfg.n_heads, u_stack=stack,
                            renormalize=cfg.renormalize_gated_attention)
    out = TokenSequence(tokens=nm.reshape(x, (t, d)), mask_flags=seq.mask_flags)
    return out, nm.reshape(att, att.shape[1:])


def spatial_encode(params: ModelParams, frames: np.ndarray,
                   u_s: Optional[InteractionMask] = None
                   ) -> tuple[Tensor, Tensor]:
    """Encode M frames of one clip; same u_s gates every frame and layer."""
    cfg = params.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ConfigError(f"expected [M, h, w, 3], got {frames.shape}")
    stack = None
    if u_s is not None:
        u = u_s.u if isinstance(u_s, InteractionMask) else np.asarray(u_s)
        if u.shape != (cfg.seq_len, cfg.seq_len):
            raise ContractError(f"u_s shaped {u.shape}, expected "
                                f"({cfg.seq_len}, {cfg.seq_len})")
        stack = _gate_to_stack(u, frames.shape[0], cfg.seq_len)
    return encode_frames(params, frames, gate_stack=stack)


def text_encode_batch(params: ModelParams, ids: np.ndarray) -> Tensor:
    """Causal text encoder over id batches [B, N] -> token features [B, N, d]."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] != cfg.text_len:
        raise InputError(f"captions must have {cfg.text_len} tokens, "
                         f"got {ids.shape[1]}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise InputError("caption ids outside the vocabulary")
    if np.any(ids[:, 0] != SOS_ID):
        raise InputError("captions must start with SOS")
    if not np.all((ids == EOS_ID).any(axis=1)):
        raise InputError("caption without EOS")
    b = ids.shape[0]
    t, d = cfg.text_len, cfg.d_model
    x = nm.embedding(params["text.emb"], ids)
    x = nm.add(x, nm.broadcast_to(nm.reshape(params["text.pos"], (1, t, d)),
                                  (b, t, d)))
    for i in range(cfg.n_layers):
        x, _ = _block_forward(params, f"text.block{i}", x, cfg.n_heads,
                              causal=True)
    x = nm.layer_norm(x, params["text.ln_f_g"], params["text.ln_f_b"])
    return nm.matmul(x, params["text.proj"])


def text_encode(params: ModelParams, caption: np.ndarray) -> TokenSequence:
    out = text_encode_batch(params, np.asarray(caption)[None])
    t, d = params.config.text_len, params.config.d_model
    return TokenSequence(tokens=nm.reshape(out, (t, d)))


def temporal_encode_batch(params: ModelParams, frame_tokens: Tensor) -> Tensor:
    """Bidirectional temporal encoder over [B, M, d] frame embeddings."""
    cfg = params.config
    b, m, d = frame_tokens.shape
    if m != cfg.n_frames:
        raise ConfigError(f"expected {cfg.n_frames} frames, got {m}")
    x = nm.add(frame_tokens, nm.broadcast_to(
        nm.reshape(params["temporal.pos"], (1, m, d)), (b, m, d)))
    for i in range(cfg.temporal_layers):
        x, _ = _block_forward(params, f"temporal.block{i}", x,
                              cfg.temporal_heads)
    return nm.layer_norm(x, params["temporal.ln_f_g"], params["temporal.ln_f_b"])


def temporal_encode(params: ModelParams, frame_tokens: Tensor) -> Tensor:
    m, d = frame_tokens.shape
    out = temporal_encode_batch(params, nm.reshape(frame_tokens, (1, m, d)))
    return nm.reshape(out, (m, d))


def reconstruct_batch(params: ModelParams, frame_tokens: Tensor,
                      gate_stack: np.ndarray) -> Tensor:
    """Single gated attention layer over [B, M, d]; gates are per item."""
    cfg = params.config
    b, m, d = frame_tokens.shape
    stack = _gate_to_stack(gate_stack, b, m)
    x = nm.add(frame_tokens, nm.broadcast_to(
        nm.reshape(params["recon.pos"], (1, m, d)), (b, m, d)))
    x, _ = _block_forward(params, "recon.block", x, cfg.temporal_heads,
                          u_stack=stack,
                          renormalize=cfg.renormalize_gated_attention)
    return x


def reconstruct(params: ModelParams, frame_tokens: Tensor,
                u_t: InteractionMask) -> Tensor:
    m, d = frame_tokens.shape
    u = u_t.u if isinstance(u_t, InteractionMask) else np.asarray(u_t)
    if u.shape != (m, m):
        raise ContractError(f"u_t shaped {u.shape}, expected ({m}, {m})")
    out = reconstruct_batch(params, nm.reshape(frame_tokens, (1, m, d)), u)
    return nm.reshape(out, (m, d))


def discriminate_batch(params: ModelParams, video_tokens: Tensor) -> Tensor:
    """Mean-pool tokens, 2-layer MLP, softmax over {masked, unmasked}.

    Class index 0 is 'masked', 1 is 'unmasked'.
    """
    pooled = nm.tmean(video_tokens, axis=1)
    h = nm.gelu(_affine(pooled, params["disc.w1"], params["disc.b1"]))
    logits = _affine(h, params["disc.w2"], params["disc.b2"])
    return nm.softmax_lastdim(logits)


def discriminate(params: ModelParams, video_tokens: Tensor) -> Tensor:
    m, d = video_tokens.shape
    out = discriminate_batch(params, nm.reshape(video_tokens, (1, m, d)))
    return nm.reshape(out, (2,))
