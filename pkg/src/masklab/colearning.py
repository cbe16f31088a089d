"""Dual-mask co-learning: planning, the four-branch step, training loop.

Each step builds a mask plan from the current model's own attention
(high-salience and low-salience tube masks over one sampled frame
interval per clip), then evaluates one combined objective:

  anchor      unmasked video vs caption contrastive term
  high branch co-encode masked video, reconstruct, contrast against
              captions and against detached unmasked video tokens
  low branch  co-encode background-masked video, same contrastive pair,
              plus a gradient-reversed discriminator term

One backward pass and one optimizer update apply all branches; the
spatial encoder and co-encoder are the same tensors, as are the
temporal encoders of both masked paths.  All randomness is drawn from
per-(seed, step, purpose) streams so runs replay bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as dt
from . import masking as mk
from . import numerics as nm
from .encoders import (EncoderConfig, ModelParams, discriminate_batch,
                       encode_frames, init_params, reconstruct_batch,
                       temporal_encode_batch, text_encode_batch)
from .errors import CheckpointError, ConfigError, ContractError
from .evaluation import attention_stats
from .numerics import Gradients, Tape, Tensor
from .objectives import (LossParts, LossWeights, SimilarityMatrix,
                         adversarial_loss, clamp_log_tau, contrastive_loss,
                         tau_of, total_loss, wti_matrix)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# rng stream purposes, one independent stream per (seed, step, purpose)
_TUBE = 0
_MASK_HIGH = 1
_MASK_LOW = 2
_NOISE_HIGH = 3
_NOISE_LOW = 4
_SHUFFLE = 5

_STRATEGIES = ("attention", "random", "random_tube")


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    batch_size: int = 16
    steps: int = 300
    lr_backbone: float = 3e-4
    lr_new: float = 3e-4
    r_high: float = 0.7
    r_low: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    grl_lambda: float = 1.0
    seed: int = 0
    horizon: Optional[int] = None
    mask_strategy: str = "attention"
    sequential_branches: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if self.lr_backbone < 0 or self.lr_new < 0:
            raise ConfigError("learning rates must be nonnegative")
        for name in ("r_high", "r_low"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.grl_lambda <= 0:
            raise ConfigError("grl_lambda must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be positive when set")
        if self.mask_strategy not in _STRATEGIES:
            raise ConfigError(f"mask_strategy must be one of {_STRATEGIES}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @property
    def schedule_horizon(self) -> int:
        # default decays to half the base lr by the last step; annealing
        # all the way to zero within the run stalls short runs early
        return self.horizon if self.horizon is not None else 2 * self.steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        try:
            d = dict(payload)
            encoder = EncoderConfig(**d.pop("encoder"))
            weights = LossWeights(**d.pop("weights"))
            return cls(encoder=encoder, weights=weights, **d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed training config: {exc}") from exc


def _stream(seed: int, step: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step, purpose)))


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence((seed, _SHUFFLE, epoch))
               .generate_state(1)[0])


# ------------------------------------------------------------------ planning


@dataclass
class MaskPlan:
    """Frozen per-step masking decisions; phase two treats these as data."""
    videos_high: np.ndarray   # [B, M, h, w, 3] pixel-masked clips
    videos_low: np.ndarray
    gates_high: np.ndarray    # [B, M, T, T] spatial interaction stacks
    gates_low: np.ndarray
    ut_high: np.ndarray       # [B, M, M] temporal interaction matrices
    ut_low: np.ndarray
    masks_high: list
    masks_low: list
    tubes: list


def _interaction_stacks(mask_or_list, m: int, n: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    masks = mask_or_list if isinstance(mask_or_list, list) else [mask_or_list]
    token_flags = np.zeros((m, n + 1), dtype=bool)
    for tube in masks:
        idx = np.asarray(tube.patch_indices, dtype=int)
        if idx.size:
            token_flags[tube.a_s:tube.a_e + 1, 1 + idx] = True
    gates = np.ones((m, n + 1, n + 1))
    for f in range(m):
        if token_flags[f].any():
            gates[f] = mk.spatial_interaction_mask(token_flags[f]).u
    frame_flags = token_flags[:, 1:].any(axis=1)
    u_t = mk.temporal_interaction_mask(frame_flags).u
    return gates, u_t


def _apply_masks(video: np.ndarray, mask_or_list, patch: int,
                 rng: np.random.Generator) -> np.ndarray:
    if isinstance(mask_or_list, list):
        return mk.apply_pixel_masks(video, mask_or_list, patch, rng)
    return mk.apply_pixel_mask(video, mask_or_list, patch, rng)


def plan_from_attention(att: np.ndarray, videos: np.ndarray,
                        config: TrainConfig, step: int) -> MaskPlan:
    """att is the final-layer attention of the unmasked pass,
    [B, M, H, T, T] as plain numpy."""
    cfg = config.encoder
    b, m = videos.shape[:2]
    n, t = cfg.n_patches, cfg.seq_len
    rng_tube = _stream(config.seed, step, _TUBE)
    rng_mask_h = _stream(config.seed, step, _MASK_HIGH)
    rng_mask_l = _stream(config.seed, step, _MASK_LOW)
    rng_noise_h = _stream(config.seed, step, _NOISE_HIGH)
    rng_noise_l = _stream(config.seed, step, _NOISE_LOW)

    vids_h = np.empty_like(videos)
    vids_l = np.empty_like(videos)
    gates_h = np.empty((b, m, t, t))
    gates_l = np.empty((b, m, t, t))
    ut_h = np.empty((b, m, m))
    ut_l = np.empty((b, m, m))
    masks_h, masks_l, tubes = [], [], []

    for i in range(b):
        a_s, a_e = mk.sample_tube(m, rng_tube)
        tubes.append((a_s, a_e))
        if config.mask_strategy == "attention":
            # one tube per clip per step; both branches rank the same
            # weight vector so their masks stay comparable
            weights = mk.extract_cls_weights(att[i], a_s, a_e)
            mask_h = mk.informed_mask(weights, config.r_high, "descending")
            mask_l = mk.informed_mask(weights, config.r_low, "ascending")
        else:
            mask_h = mk.baseline_mask(n, m, config.r_high,
                                      config.mask_strategy, rng_mask_h)
            mask_l = mk.baseline_mask(n, m, config.r_low,
                                      config.mask_strategy, rng_mask_l)
        masks_h.append(mask_h)
        masks_l.append(mask_l)
        vids_h[i] = _apply_masks(videos[i], mask_h, cfg.patch, rng_noise_h)
        vids_l[i] = _apply_masks(videos[i], mask_l, cfg.patch, rng_noise_l)
        gates_h[i], ut_h[i] = _interaction_stacks(mask_h, m, n)
        gates_l[i], ut_l[i] = _interaction_stacks(mask_l, m, n)

    return MaskPlan(videos_high=vids_h, videos_low=vids_l,
                    gates_high=gates_h, gates_low=gates_l,
                    ut_high=ut_h, ut_low=ut_l,
                    masks_high=masks_h, masks_low=masks_l, tubes=tubes)


def build_mask_plan(params: ModelParams, batch: dt.Batch,
                    config: TrainConfig, step: int) -> MaskPlan:
    """Derive the step's masks from a fresh unmasked spatial pass.

    The training step itself plans from the attention of its own anchor
    forward rather than paying for this extra pass; both routes see the
    same parameters and therefore the same attention, so plans agree bit
    for bit.  This entry point serves gradient checking and offline mask
    inspection.
    """
    cfg = config.encoder
    b, m = batch.videos.shape[:2]
    flat = batch.videos.reshape(b * m, cfg.h, cfg.w, 3)
    _, att = encode_frames(params, flat)
    att_np = att.data.reshape(b, m, cfg.n_heads, cfg.seq_len, cfg.seq_len)
    return plan_from_attention(att_np, batch.videos, config, step)


# ------------------------------------------------------------------ branches


@dataclass
class _Anchor:
    e_v: Tensor          # [B, M, d] unmasked video tokens
    e_t: Tensor          # [B, N, d] caption tokens
    att: Tensor          # [B*M, H, T, T] final spatial attention
    tau: Tensor
    vis_gate: tuple
    txt_gate: tuple
    l_vtc: Tensor


def _anchor_forward(params: ModelParams, batch: dt.Batch) -> _Anchor:
    cfg = params.config
    b, m = batch.videos.shape[:2]
    flat = batch.videos.reshape(b * m, cfg.h, cfg.w, 3)
    cls_u, att = encode_frames(params, flat)
    frames = nm.reshape(cls_u, (b, m, cfg.d_model))
    e_v = temporal_encode_batch(params, frames)
    e_t = text_encode_batch(params, batch.captions)
    tau = tau_of(params["log_tau"])
    vis_gate = (params["gates.vis_w"], params["gates.vis_b"])
    txt_gate = (params["gates.txt_w"], params["gates.txt_b"])
    s = wti_matrix(e_v, e_t, vis_gate, txt_gate)
    l_vtc = contrastive_loss(SimilarityMatrix(s, "v2t", tau))
    return _Anchor(e_v=e_v, e_t=e_t, att=att, tau=tau,
                   vis_gate=vis_gate, txt_gate=txt_gate, l_vtc=l_vtc)


def _masked_clip_tokens(params: ModelParams, videos: np.ndarray,
                        gates: np.ndarray, u_t: Optional[np.ndarray]
                        ) -> Tensor:
    """Co-encode pixel-masked clips; reconstruct only when u_t is given."""
    cfg = params.config
    b, m = videos.shape[:2]
    t = cfg.seq_len
    flat = videos.reshape(b * m, cfg.h, cfg.w, 3)
    cls, _ = encode_frames(params, flat, gate_stack=gates.reshape(b * m, t, t))
    frames = nm.reshape(cls, (b, m, cfg.d_model))
    if u_t is not None:
        frames = reconstruct_batch(params, frames, u_t)
    return temporal_encode_batch(params, frames)


def _batch_attention_stats(att: np.ndarray, b: int, m: int) -> tuple:
    per = att.reshape(b, m, *att.shape[1:])
    tops, bots = [], []
    for i in range(b):
        w = mk.extract_cls_weights(per[i], 0, m - 1).w
        top, bot = attention_stats(w)
        tops.append(top)
        bots.append(bot)
    return float(np.mean(tops)), float(np.mean(bots))


def _branch_losses(params: ModelParams, anchor: _Anchor, plan: MaskPlan,
                   config: TrainConfig, target: Tensor) -> LossParts:
    """Masked branches given the anchor pass and the detached target."""
    e_vh = _masked_clip_tokens(params, plan.videos_high, plan.gates_high,
                               plan.ut_high)
    s_th = wti_matrix(e_vh, anchor.e_t, anchor.vis_gate, anchor.txt_gate)
    l_vtc_h = contrastive_loss(SimilarityMatrix(s_th, "v2t", anchor.tau))
    s_vh = wti_matrix(e_vh, target, anchor.vis_gate, anchor.vis_gate)
    l_vvc_h = contrastive_loss(SimilarityMatrix(s_vh, "v2t", anchor.tau))

    e_vl = _masked_clip_tokens(params, plan.videos_low, plan.gates_low,
                               u_t=None)
    s_tl = wti_matrix(e_vl, anchor.e_t, anchor.vis_gate, anchor.txt_gate)
    l_vtc_l = contrastive_loss(SimilarityMatrix(s_tl, "v2t", anchor.tau))
    s_vl = wti_matrix(e_vl, target, anchor.vis_gate, anchor.vis_gate)
    l_vvc_l = contrastive_loss(SimilarityMatrix(s_vl, "v2t", anchor.tau))

    d_masked = discriminate_batch(params, nm.grl(e_vl, config.grl_lambda))
    d_unmasked = discriminate_batch(params, target)
    l_adv = adversarial_loss(d_masked, d_unmasked)

    return LossParts(l_vtc=anchor.l_vtc, l_vtc_h=l_vtc_h, l_vvc_h=l_vvc_h,
                     l_vtc_l=l_vtc_l, l_vvc_l=l_vvc_l, l_adv=l_adv)


def _plan_of_anchor(anchor: _Anchor, batch: dt.Batch, config: TrainConfig,
                    step: int) -> MaskPlan:
    cfg = config.encoder
    b, m = batch.videos.shape[:2]
    att_np = anchor.att.data.reshape(b, m, cfg.n_heads, cfg.seq_len,
                                     cfg.seq_len)
    return plan_from_attention(att_np, batch.videos, config, step)


def loss_from_plan(params: ModelParams, batch: dt.Batch, plan: MaskPlan,
                   config: TrainConfig, frozen_targets: Optional[np.ndarray]
                   = None) -> tuple[LossParts, dict]:
    """All six loss components for one batch under a frozen mask plan.

    Pure in (params, batch, plan): no randomness, so tape gradients can
    be checked against finite differences of this same function.  The
    detached targets (unmasked video tokens fed to the video-video terms
    and the discriminator's real branch) are constants as far as the
    gradient is concerned; finite differencing must hold them at their
    base-point values, which is what frozen_targets injects.  Training
    never sets it.
    """
    b, m = batch.videos.shape[:2]
    anchor = _anchor_forward(params, batch)
    if frozen_targets is None:
        target = nm.stop_gradient(anchor.e_v)
    else:
        target = Tensor(np.asarray(frozen_targets))
    parts = _branch_losses(params, anchor, plan, config, target)
    top30, bot30 = _batch_attention_stats(anchor.att.data, b, m)
    return parts, {"top30": top30, "bot30": bot30}


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0


def init_optimizer(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros(params[n].shape) for n in params.names()},
        v={n: np.zeros(params[n].shape) for n in params.names()},
        t=0)


def lr_factor(step: int, horizon: int) -> float:
    frac = min(step, horizon) / horizon
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_update(params: ModelParams, grads: Gradients, opt: OptimizerState,
                config: TrainConfig, step: int) -> None:
    factor = lr_factor(step, config.schedule_horizon)
    t_new = opt.t + 1
    c1 = 1.0 - ADAM_BETA1 ** t_new
    c2 = 1.0 - ADAM_BETA2 ** t_new
    for name in params.names():
        g = grads.wrt(params[name])
        if not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient for {name}")
        opt.m[name] = ADAM_BETA1 * opt.m[name] + (1.0 - ADAM_BETA1) * g
        opt.v[name] = ADAM_BETA2 * opt.v[name] + (1.0 - ADAM_BETA2) * g * g
        base = (config.lr_backbone if params.group_of(name) == "backbone"
                else config.lr_new)
        update = (base * factor) * (opt.m[name] / c1) / (
            np.sqrt(opt.v[name] / c2) + ADAM_EPS)
        new = params[name].data - update
        if name == "log_tau":
            new = clamp_log_tau(new)
        params.replace(name, new)
    opt.t = t_new


# ---------------------------------------------------------------- step kinds


@dataclass
class StepResult:
    breakdown: dict
    top30: float
    bot30: float


def _check_finite(parts: LossParts, total: float) -> None:
    if np.isfinite(total):
        return
    detail = {k: v.item() for k, v in parts.as_dict().items()}
    raise ContractError(f"non-finite loss, step aborted: {detail}")


def _breakdown(step: int, parts: LossParts, total: float) -> dict:
    out = {"step": int(step)}
    out.update({k: v.item() for k, v in parts.as_dict().items()})
    out["total"] = total
    return out


def colearning_step(batch: dt.Batch, params: ModelParams,
                    opt: OptimizerState, config: TrainConfig,
                    step: int) -> StepResult:
    """One full training step: anchor forward, masks planned from its
    attention, masked branches, one backward, one optimizer update."""
    if config.sequential_branches:
        return _sequential_step(batch, params, opt, config, step)
    with Tape() as tape:
        anchor = _anchor_forward(params, batch)
        plan = _plan_of_anchor(anchor, batch, config, step)
        target = nm.stop_gradient(anchor.e_v)
        parts = _branch_losses(params, anchor, plan, config, target)
        total = total_loss(parts, config.weights)
    total_val = total.item()
    _check_finite(parts, total_val)
    grads = tape.backward(total)
    adam_update(params, grads, opt, config, step)
    b, m = batch.videos.shape[:2]
    top30, bot30 = _batch_attention_stats(anchor.att.data, b, m)
    return StepResult(_breakdown(step, parts, total_val), top30=top30,
                      bot30=bot30)


def _sequential_step(batch: dt.Batch, params: ModelParams,
                     opt: OptimizerState, config: TrainConfig,
                     step: int) -> StepResult:
    """Experimental: four optimizer updates per step, one per branch.
    Branches with zero weight are skipped entirely."""
    w = config.weights
    values = {}

    with Tape() as tape:
        anchor = _anchor_forward(params, batch)
    b, m = batch.videos.shape[:2]
    top30, bot30 = _batch_attention_stats(anchor.att.data, b, m)
    plan = _plan_of_anchor(anchor, batch, config, step)
    values["L_vtc"] = anchor.l_vtc.item()
    adam_update(params, tape.backward(anchor.l_vtc), opt, config, step)

    def branch(weight, build):
        with Tape() as tape:
            anchor = _anchor_forward(params, batch)
            named = build(anchor)
            loss = None
            for key, term in named.items():
                values[key] = term.item()
                loss = term if loss is None else nm.add(loss, term)
            scaled = nm.scale(loss, weight)
        adam_update(params, tape.backward(scaled), opt, config, step)

    def high_terms(anchor):
        e_vh = _masked_clip_tokens(params, plan.videos_high, plan.gates_high,
                                   plan.ut_high)
        s_t = wti_matrix(e_vh, anchor.e_t, anchor.vis_gate, anchor.txt_gate)
        s_v = wti_matrix(e_vh, nm.stop_gradient(anchor.e_v),
                         anchor.vis_gate, anchor.vis_gate)
        return {
            "L_vtc_H": contrastive_loss(SimilarityMatrix(s_t, "v2t",
                                                         anchor.tau)),
            "L_vvc_H": contrastive_loss(SimilarityMatrix(s_v, "v2t",
                                                         anchor.tau)),
        }

    def low_terms(anchor):
        e_vl = _masked_clip_tokens(params, plan.videos_low, plan.gates_low,
                                   u_t=None)
        s_t = wti_matrix(e_vl, anchor.e_t, anchor.vis_gate, anchor.txt_gate)
        s_v = wti_matrix(e_vl, nm.stop_gradient(anchor.e_v),
                         anchor.vis_gate, anchor.vis_gate)
        return {
            "L_vtc_L": contrastive_loss(SimilarityMatrix(s_t, "v2t",
                                                         anchor.tau)),
            "L_vvc_L": contrastive_loss(SimilarityMatrix(s_v, "v2t",
                                                         anchor.tau)),
        }

    def adv_terms(anchor):
        e_vl = _masked_clip_tokens(params, plan.videos_low, plan.gates_low,
                                   u_t=None)
        d_m = discriminate_batch(params, nm.grl(e_vl, config.grl_lambda))
        d_u = discriminate_batch(params, nm.stop_gradient(anchor.e_v))
        return {"L_adv": adversarial_loss(d_m, d_u)}

    for weight, build in ((w.alpha, high_terms), (w.beta, low_terms),
                          (w.gamma, adv_terms)):
        if weight > 0.0:
            branch(weight, build)

    for key in ("L_vtc_H", "L_vvc_H", "L_vtc_L", "L_vvc_L", "L_adv"):
        values.setdefault(key, 0.0)
    total = (values["L_vtc"]
             + w.alpha * (values["L_vtc_H"] + values["L_vvc_H"])
             + w.beta * (values["L_vtc_L"] + values["L_vvc_L"])
             + w.gamma * values["L_adv"])
    breakdown = {"step": int(step), **{k: values[k] for k in
                 ("L_vtc", "L_vtc_H", "L_vvc_H", "L_vtc_L", "L_vvc_L",
                  "L_adv")}, "total": total}
    return StepResult(breakdown, top30=top30, bot30=bot30)


def baseline_contrastive_step(batch: dt.Batch, params: ModelParams,
                              opt: OptimizerState, config: TrainConfig,
                              step: int) -> StepResult:
    """Plain contrastive training, no masked branches.  Shares the anchor
    forward with the co-learning step so that a co-learning run with all
    branch weights at zero reproduces this trace bit for bit."""
    with Tape() as tape:
        anchor = _anchor_forward(params, batch)
    total_val = anchor.l_vtc.item()
    if not np.isfinite(total_val):
        raise ContractError(f"non-finite loss, step aborted: {total_val}")
    b, m = batch.videos.shape[:2]
    top30, bot30 = _batch_attention_stats(anchor.att.data, b, m)
    grads = tape.backward(anchor.l_vtc)
    adam_update(params, grads, opt, config, step)
    breakdown = {"step": int(step), "L_vtc": total_val, "L_vtc_H": 0.0,
                 "L_vvc_H": 0.0, "L_vtc_L": 0.0, "L_vvc_L": 0.0,
                 "L_adv": 0.0, "total": total_val}
    return StepResult(breakdown, top30=top30, bot30=bot30)


def adversarial_only_gradients(params: ModelParams, batch: dt.Batch,
                               plan: MaskPlan, config: TrainConfig,
                               use_grl: bool = True) -> tuple[Gradients, float]:
    """Gradients of the adversarial term alone, optionally bypassing the
    reversal node; exercises the sign law the reversal must obey."""
    with Tape() as tape:
        anchor = _anchor_forward(params, batch)
        e_vl = _masked_clip_tokens(params, plan.videos_low, plan.gates_low,
                                   u_t=None)
        fed = nm.grl(e_vl, config.grl_lambda) if use_grl else e_vl
        d_m = discriminate_batch(params, fed)
        d_u = discriminate_batch(params, nm.stop_gradient(anchor.e_v))
        l_adv = adversarial_loss(d_m, d_u)
    return tape.backward(l_adv), l_adv.item()


# ------------------------------------------------------------- checkpointing


def save_checkpoint(path, params: ModelParams, opt: OptimizerState,
                    config: TrainConfig, step: int) -> None:
    manifest = {
        "format": 1,
        "step": int(step),
        "opt_t": int(opt.t),
        "config": config.to_dict(),
        "params": [{"name": n, "shape": list(params[n].shape)}
                   for n in params.names()],
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "sharing_groups": params.sharing_groups,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for name in params.names():
            nm.write_tns(fh, name, params[name].data)
        for name in params.names():
            nm.write_tns(fh, "opt.m." + name, opt.m[name])
        for name in params.names():
            nm.write_tns(fh, "opt.v." + name, opt.v[name])


def load_checkpoint(path, expect_config: Optional[TrainConfig] = None
                    ) -> tuple[ModelParams, OptimizerState, int, TrainConfig]:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable manifest: {exc}") from exc
        if manifest.get("format") != 1:
            raise CheckpointError("unknown checkpoint format")
        try:
            config = TrainConfig.from_dict(manifest["config"])
        except (ConfigError, KeyError) as exc:
            raise CheckpointError(f"bad config in checkpoint: {exc}") from exc
        if expect_config is not None and config != expect_config:
            raise CheckpointError("checkpoint config does not match the "
                                  "requested configuration")
        params = init_params(config.encoder, seed=0)
        names = list(params.names())
        listed = [p["name"] for p in manifest.get("params", [])]
        if listed != names:
            raise CheckpointError("parameter inventory mismatch")

        def next_record(expect_name):
            rec = nm.read_tns(fh)
            if rec is None:
                raise CheckpointError(f"truncated checkpoint at "
                                      f"{expect_name}")
            got, arr = rec
            if got != expect_name:
                raise CheckpointError(f"expected record {expect_name}, "
                                      f"found {got}")
            return arr

        for name in names:
            arr = next_record(name)
            try:
                params.replace(name, arr)
            except ContractError as exc:
                raise CheckpointError(str(exc)) from exc
        moments_m = {n: next_record("opt.m." + n) for n in names}
        moments_v = {n: next_record("opt.v." + n) for n in names}
        if nm.read_tns(fh) is not None:
            raise CheckpointError("trailing data after checkpoint records")
    opt = OptimizerState(m=moments_m, v=moments_v, t=int(manifest["opt_t"]))
    return params, opt, int(manifest["step"]), config


# ------------------------------------------------------------- training loop


def run_training(dataset: dt.Dataset, config: TrainConfig, out_dir,
                 resume_from=None, step_fn=None):
    """Train to config.steps, appending per-step traces and checkpoints.

    Writes loss.jsonl (one breakdown per step), attention.csv
    (step, meanW_top30, meanW_bot30), periodic checkpoints when
    checkpoint_every is set, and ckpt_final.bin at the end.
    """
    if step_fn is None:
        step_fn = colearning_step
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        params, opt, start, _ = load_checkpoint(resume_from,
                                                expect_config=config)
    else:
        params = init_params(config.encoder, config.seed)
        opt = init_optimizer(params)
        start = 0
    steps_per_epoch = len(dataset) // config.batch_size
    if steps_per_epoch < 1:
        raise ConfigError("dataset smaller than one batch")

    mode = "a" if resume_from is not None else "w"
    cached_epoch = -1
    batch_list = []
    with open(out / "loss.jsonl", mode) as loss_fh, \
            open(out / "attention.csv", mode) as att_fh:
        if mode == "w":
            att_fh.write("step,meanW_top30,meanW_bot30\n")
        for step in range(start, config.steps):
            epoch = step // steps_per_epoch
            if epoch != cached_epoch:
                batch_list = list(dt.batches(dataset, config.batch_size,
                                             _epoch_seed(config.seed, epoch)))
                cached_epoch = epoch
            res = step_fn(batch_list[step % steps_per_epoch], params, opt,
                          config, step)
            loss_fh.write(json.dumps(res.breakdown, sort_keys=True) + "\n")
            att_fh.write(f"{step},{res.top30!r},{res.bot30!r}\n")
            nxt = step + 1
            if (config.checkpoint_every and nxt < config.steps
                    and nxt % config.checkpoint_every == 0):
                save_checkpoint(out / f"ckpt_{nxt:06d}.bin", params, opt,
                                config, nxt)
    save_checkpoint(out / "ckpt_final.bin", params, opt, config,
                    config.steps)
    return params, opt


# ------------------------------------------------------------ gradient check


def _make_check_batch(seed: int, config: TrainConfig) -> dt.Batch:
    cfg = config.encoder
    rng = np.random.default_rng(seed)
    scenes = dt.all_scenes()
    picks = rng.choice(len(scenes), size=config.batch_size, replace=False)
    videos = np.stack([dt.render_clip(scenes[i], m=cfg.n_frames, h=cfg.h,
                                      w=cfg.w) for i in picks])
    captions = np.stack([dt.caption_of(scenes[i]) for i in picks])
    return dt.Batch(videos=videos, captions=captions,
                    indices=np.asarray(picks))


def gradcheck_objective(seed: int = 0, coords_per_tensor: int = 6,
                        config: Optional[TrainConfig] = None,
                        h: float = 1e-5) -> tuple[float, list]:
    """Compare tape gradients of the full objective against central
    differences, sampling coordinates from every parameter tensor
    (exhaustive for small tensors).  Returns (max rel err, worst cases).

    Two wrinkles make the reference more than a plain difference of the
    total.  The detached targets are held at their base-point values (a
    derivative through them would be a derivative the optimizer never
    sees).  And the reversal node flips the adversarial component's sign
    along every path upstream of it, so the reference combines the
    component slopes as  d(rest) + gamma * s * d(adv)  with s = +1 for
    discriminator parameters and s = -lambda for the rest.
    """
    if config is None:
        config = TrainConfig(batch_size=2, steps=1)
    batch = _make_check_batch(seed, config)
    params = init_params(config.encoder, seed)
    plan = build_mask_plan(params, batch, config, step=0)
    base_target = _anchor_forward(params, batch).e_v.data
    w = config.weights

    with Tape() as tape:
        parts, _ = loss_from_plan(params, batch, plan, config)
        total = total_loss(parts, config.weights)
    grads = tape.backward(total)

    def split_value() -> tuple[float, float]:
        parts, _ = loss_from_plan(params, batch, plan, config,
                                  frozen_targets=base_target)
        d = {k: v.item() for k, v in parts.as_dict().items()}
        rest = (d["L_vtc"] + w.alpha * (d["L_vtc_H"] + d["L_vvc_H"])
                + w.beta * (d["L_vtc_L"] + d["L_vvc_L"]))
        return rest, d["L_adv"]

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    cases = []
    for name in params.names():
        tensor = params[name]
        size = tensor.size
        if size <= coords_per_tensor:
            flat_picks = np.arange(size)
        else:
            flat_picks = rng.choice(size, size=coords_per_tensor,
                                    replace=False)
        sign = 1.0 if name.startswith("disc.") else -config.grl_lambda
        analytic = grads.wrt(tensor)
        original = params._tensors[name]
        try:
            for flat in flat_picks:
                coord = np.unravel_index(int(flat), tensor.shape)
                plus = np.array(original.data, copy=True)
                minus = np.array(original.data, copy=True)
                plus[coord] += h
                minus[coord] -= h
                params._tensors[name] = Tensor(plus, requires_grad=True,
                                               name=name)
                rest_p, adv_p = split_value()
                params._tensors[name] = Tensor(minus, requires_grad=True,
                                               name=name)
                rest_m, adv_m = split_value()
                numeric = ((rest_p - rest_m)
                           + w.gamma * sign * (adv_p - adv_m)) / (2.0 * h)
                g = analytic[coord] if tensor.ndim else float(analytic)
                err = abs(numeric - g) / max(1.0, abs(g))
                if err > worst:
                    worst = err
                cases.append((float(err), name, tuple(int(c) for c in coord)))
        finally:
            params._tensors[name] = original
    cases.sort(reverse=True)
    return worst, cases[:10]
