"""Training objectives: token-interaction similarity and the loss stack.

Similarity between a video clip and a caption is computed at token level:
cosine similarities between all token pairs, a max over the other side's
tokens, and a learned softmax weighting per token on each side, averaged
over both directions.  Batch-level matrices of these scores feed a
symmetric InfoNCE loss.  The adversarial term is a plain two-class
cross-entropy on the discriminator; the min-max against the encoder is
realized structurally by the gradient-reversal node upstream, not by a
second loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, InputError
from .numerics import Tensor

# discriminator class indices
MASKED_CLASS = 0
UNMASKED_CLASS = 1

_PROB_FLOOR = 1e-12
_NORM_FLOOR = 1e-24  # on squared norms, so token norms floor at 1e-12

TAU_MIN = 0.001
TAU_MAX = 0.5
TAU_INIT = 0.05


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class SimilarityMatrix:
    s: Tensor
    direction: str
    tau: Union[float, Tensor]

    def __post_init__(self):
        if self.s.ndim != 2 or self.s.shape[0] != self.s.shape[1]:
            raise ContractError(f"similarity matrix shaped {self.s.shape}, "
                                "expected square")
        if self.direction not in ("t2v", "v2t"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        tau_value = (self.tau.item() if isinstance(self.tau, Tensor)
                     else float(self.tau))
        if tau_value <= 0.0:
            raise ConfigError("temperature must be positive")


@dataclass
class LossParts:
    l_vtc: Tensor
    l_vtc_h: Tensor
    l_vvc_h: Tensor
    l_vtc_l: Tensor
    l_vvc_l: Tensor
    l_adv: Tensor

    def __post_init__(self):
        for name, t in self.as_dict().items():
            if t.size != 1:
                raise ContractError(f"{name} must be scalar")

    def as_dict(self) -> dict:
        return {"L_vtc": self.l_vtc, "L_vtc_H": self.l_vtc_h,
                "L_vvc_H": self.l_vvc_h, "L_vtc_L": self.l_vtc_l,
                "L_vvc_L": self.l_vvc_l, "L_adv": self.l_adv}


def _normalize_tokens(e: Tensor) -> Tensor:
    sq = nm.tsum(nm.mul(e, e), axis=e.ndim - 1, keepdims=True)
    norm = nm.sqrt(nm.clip_min(sq, _NORM_FLOOR))
    return nm.div(e, nm.broadcast_to(norm, e.shape))


def _gate_weights(e: Tensor, gate: tuple[Tensor, Tensor]) -> Tensor:
    """Per-token scalar gate, softmax-normalized over the sequence."""
    w, b = gate
    logits = nm.matmul(e, w)
    logits = nm.add(logits, nm.broadcast_to(b, logits.shape))
    return nm.softmax_lastdim(nm.reshape(logits, e.shape[:-2] + (e.shape[-2],)))


def wti_matrix(e1: Tensor, e2: Tensor, gate1: tuple[Tensor, Tensor],
               gate2: tuple[Tensor, Tensor]) -> Tensor:
    """All-pairs token-interaction scores: S[i, j] compares item i of e1
    with item j of e2.  e1 is [B, M, d], e2 is [B, N, d].
    """
    if e1.ndim != 3 or e2.ndim != 3:
        raise ContractError("wti_matrix expects [B, tokens, d] inputs")
    b, m, d = e1.shape
    b2, n, d2 = e2.shape
    if b != b2 or d != d2:
        raise ContractError(f"incompatible shapes {e1.shape} vs {e2.shape}")
    if m < 1 or n < 1:
        raise InputError("empty token sequence")

    n1 = _normalize_tokens(e1)
    n2 = _normalize_tokens(e2)
    left = nm.broadcast_to(nm.reshape(n1, (b, 1, m, d)), (b, b, m, d))
    right = nm.broadcast_to(nm.reshape(n2, (1, b, n, d)), (b, b, n, d))
    sim = nm.matmul(left, nm.swap_last2(right))          # [B, B, M, N]

    best_for_1 = nm.tmax(sim, axis=3)                    # [B, B, M]
    best_for_2 = nm.tmax(sim, axis=2)                    # [B, B, N]
    w1 = _gate_weights(e1, gate1)                        # [B, M]
    w2 = _gate_weights(e2, gate2)                        # [B, N]
    part1 = nm.tsum(nm.mul(nm.broadcast_to(nm.reshape(w1, (b, 1, m)),
                                           (b, b, m)), best_for_1), axis=2)
    part2 = nm.tsum(nm.mul(nm.broadcast_to(nm.reshape(w2, (1, b, n)),
                                           (b, b, n)), best_for_2), axis=2)
    return nm.scale(nm.add(part1, part2), 0.5)


def wti(e1, e2, gate1: tuple[Tensor, Tensor],
        gate2: tuple[Tensor, Tensor]) -> Tensor:
    """Scalar similarity between one token sequence pair."""
    t1 = getattr(e1, "tokens", e1)
    t2 = getattr(e2, "tokens", e2)
    if t1.ndim != 2 or t2.ndim != 2:
        raise ContractError("wti expects [tokens, d] sequences")
    if t1.shape[0] < 1 or t2.shape[0] < 1:
        raise InputError("empty token sequence")
    m, d = t1.shape
    n, _ = t2.shape
    s = wti_matrix(nm.reshape(t1, (1, m, d)), nm.reshape(t2, (1, n, d)),
                   gate1, gate2)
    return nm.reshape(s, ())


def contrastive_loss(sm: SimilarityMatrix) -> Tensor:
    """Symmetric InfoNCE over a square score matrix: mean over items of
    -log softmax at the matched pair, averaged over both directions.
    """
    s = sm.s
    b = s.shape[0]
    if isinstance(sm.tau, Tensor):
        tau = nm.broadcast_to(nm.reshape(sm.tau, (1, 1)), (b, b))
        logits = nm.div(s, tau)
    else:
        logits = nm.scale(s, 1.0 / float(sm.tau))
    eye = nm.Tensor(np.eye(b))
    row = nm.log_softmax_lastdim(logits)
    col = nm.log_softmax_lastdim(nm.transpose(logits, (1, 0)))
    l_row = nm.scale(nm.tsum(nm.mul(row, eye)), -1.0 / b)
    l_col = nm.scale(nm.tsum(nm.mul(col, eye)), -1.0 / b)
    return nm.scale(nm.add(l_row, l_col), 0.5)


def adversarial_loss(d_masked: Tensor, d_unmasked: Tensor) -> Tensor:
    """Two-class discriminator cross-entropy, averaged over the batch.

    d_masked holds class probabilities for inputs built from masked
    video, d_unmasked for unmasked video; probabilities are clamped at
    1e-12 before the log.
    """
    def rows(t: Tensor) -> Tensor:
        if t.ndim == 1:
            t = nm.reshape(t, (1,) + t.shape)
        if t.ndim != 2 or t.shape[1] != 2:
            raise ContractError(f"expected [B, 2] probabilities, got shape "
                                f"{t.shape}")
        return t

    dm = rows(d_masked)
    du = rows(d_unmasked)
    pick_m = nm.clip_min(nm.slice_axis(dm, 1, MASKED_CLASS, MASKED_CLASS + 1),
                         _PROB_FLOOR)
    pick_u = nm.clip_min(nm.slice_axis(du, 1, UNMASKED_CLASS,
                                       UNMASKED_CLASS + 1), _PROB_FLOOR)
    term_m = nm.tmean(nm.log(pick_m))
    term_u = nm.tmean(nm.log(pick_u))
    return nm.scale(nm.add(term_m, term_u), -0.5)


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """Contrastive anchor plus weighted mask branches:
    L = L_vtc + alpha*(L_vtc_H + L_vvc_H) + beta*(L_vtc_L + L_vvc_L)
        + gamma*L_adv.
    """
    high = nm.add(parts.l_vtc_h, parts.l_vvc_h)
    low = nm.add(parts.l_vtc_l, parts.l_vvc_l)
    extra = nm.add(nm.add(nm.scale(high, weights.alpha),
                          nm.scale(low, weights.beta)),
                   nm.scale(parts.l_adv, weights.gamma))
    return nm.add(parts.l_vtc, extra)


def tau_of(log_tau: Tensor) -> Tensor:
    """Learned temperature read; training keeps log_tau inside
    [ln TAU_MIN, ln TAU_MAX] by projection after each update."""
    return nm.exp(log_tau)


def clamp_log_tau(value: np.ndarray) -> np.ndarray:
    return np.clip(value, math.log(TAU_MIN), math.log(TAU_MAX))
