"""Retrieval metrics, inference-time score adjustment, report assembly.

Ranks are pessimistic: a tie with the ground-truth score counts as a
beat, so duplicate rows can only hurt the reported recall.  The DSL
adjustment reweights each column of a score matrix by a softmax prior
over queries; it is an inference trick and runs in plain numpy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .data import Dataset
from .encoders import (ModelParams, encode_frames, temporal_encode_batch,
                       text_encode_batch)
from .errors import ContractError, InputError
from .numerics import Tensor
from .objectives import SimilarityMatrix, wti_matrix

REPORT_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r_at: dict
    mdr: float
    mnr: float
    rsum: float
    dsl_applied: bool

    def __post_init__(self):
        last = 0.0
        for k in REPORT_KS:
            val = self.r_at[k]
            if not (last - 1e-12 <= val <= 100.0 + 1e-12):
                raise ContractError(f"R@{k}={val} breaks monotonicity")
            last = val
        if self.mdr < 1.0 or self.mnr < 1.0:
            raise ContractError("ranks start at 1")

    def to_dict(self) -> dict:
        return {"direction": self.direction,
                "r_at": {str(k): self.r_at[k] for k in REPORT_KS},
                "mdr": self.mdr, "mnr": self.mnr, "rsum": self.rsum,
                "dsl_applied": self.dsl_applied}


def ranks_of(s: np.ndarray) -> np.ndarray:
    """Row-wise rank of the diagonal entry; ties count as beaten."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"score matrix shaped {s.shape}, expected square")
    diag = s.diagonal()[:, None]
    return (s >= diag).sum(axis=1)


def rank_metrics(sm: SimilarityMatrix, dsl_applied: bool = False
                 ) -> RetrievalReport:
    ranks = ranks_of(sm.s.data)
    r_at = {k: 100.0 * float(np.mean(ranks <= k)) for k in REPORT_KS}
    return RetrievalReport(direction=sm.direction, r_at=r_at,
                           mdr=float(np.median(ranks)),
                           mnr=float(np.mean(ranks)),
                           rsum=float(sum(r_at.values())),
                           dsl_applied=dsl_applied)


def run_rsum(a: RetrievalReport, b: RetrievalReport) -> float:
    """Run-level Rsum: all six R@K values across both directions."""
    return float(sum(a.r_at[k] for k in REPORT_KS)
                 + sum(b.r_at[k] for k in REPORT_KS))


def dsl_adjust(sm: SimilarityMatrix, tau_dsl: float | None = None
               ) -> SimilarityMatrix:
    """Reweight scores by a per-column softmax prior over queries.

    tau_dsl defaults to 1/100 of the observed score range.  Evaluate the
    opposite direction by adjusting the transposed matrix.
    """
    s = sm.s.data
    if tau_dsl is None:
        spread = float(s.max() - s.min()) if s.size else 0.0
        tau_dsl = max(spread, 1e-12) / 100.0
    if tau_dsl <= 0:
        raise ContractError("tau_dsl must be positive")
    logits = s / tau_dsl
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    prior = e / e.sum(axis=0, keepdims=True)
    return SimilarityMatrix(Tensor(s * prior), sm.direction, sm.tau)


def attention_stats(w: np.ndarray) -> tuple[float, float]:
    """Mean of the largest and smallest ceil(0.3 n) attention weights."""
    w = np.asarray(w, dtype=np.float64).ravel()
    n = w.shape[0]
    if n < 1:
        raise InputError("empty weight vector")
    k = math.ceil(0.3 * n)
    ordered = np.sort(w)
    return float(ordered[-k:].mean()), float(ordered[:k].mean())


# ------------------------------------------------------------------ harness


def embed_dataset(params: ModelParams, dataset: Dataset, chunk: int = 16
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Encode every pair without recording gradients; returns
    (video tokens [N, M, d], text tokens [N, text_len, d])."""
    cfg = params.config
    n = len(dataset)
    m = dataset.videos.shape[1]
    if m != cfg.n_frames:
        raise ContractError(f"dataset has {m} frames per clip, model expects "
                            f"{cfg.n_frames}")
    e_v = np.empty((n, m, cfg.d_model))
    e_t = np.empty((n, cfg.text_len, cfg.d_model))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        vids = dataset.videos[start:stop]
        flat = vids.reshape((stop - start) * m, cfg.h, cfg.w, 3)
        cls, _ = encode_frames(params, flat)
        frames = nm.reshape(cls, (stop - start, m, cfg.d_model))
        e_v[start:stop] = temporal_encode_batch(params, frames).data
        e_t[start:stop] = text_encode_batch(
            params, dataset.captions[start:stop]).data
    return e_v, e_t


def score_matrix(params: ModelParams, e_v: np.ndarray, e_t: np.ndarray
                 ) -> np.ndarray:
    """Token-interaction scores with rows = text queries, cols = videos."""
    vis = (params["gates.vis_w"], params["gates.vis_b"])
    txt = (params["gates.txt_w"], params["gates.txt_b"])
    s = wti_matrix(Tensor(e_t), Tensor(e_v), txt, vis)
    return s.data


def config_digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def evaluate(params: ModelParams, dataset: Dataset,
             tau_dsl: float | None = None, config_hash: str | None = None,
             dataset_hash: str | None = None) -> dict:
    """Both-direction retrieval reports, with and without the DSL trick."""
    e_v, e_t = embed_dataset(params, dataset)
    s_t2v = score_matrix(params, e_v, e_t)
    tau = 1.0  # ranks are invariant to the temperature

    t2v = SimilarityMatrix(Tensor(s_t2v), "t2v", tau)
    v2t = SimilarityMatrix(Tensor(s_t2v.T.copy()), "v2t", tau)
    rep_t2v = rank_metrics(t2v)
    rep_v2t = rank_metrics(v2t)
    rep_t2v_dsl = rank_metrics(dsl_adjust(t2v, tau_dsl), dsl_applied=True)
    rep_v2t_dsl = rank_metrics(dsl_adjust(v2t, tau_dsl), dsl_applied=True)

    if config_hash is None:
        config_hash = config_digest(asdict(params.config))
    if dataset_hash is None:
        dataset_hash = dataset.meta.get("config_hash", "unknown")
    return {
        "config_hash": config_hash,
        "dataset_hash": dataset_hash,
        "t2v": rep_t2v.to_dict(),
        "v2t": rep_v2t.to_dict(),
        "t2v_dsl": rep_t2v_dsl.to_dict(),
        "v2t_dsl": rep_v2t_dsl.to_dict(),
        "rsum": run_rsum(rep_t2v, rep_v2t),
        "rsum_dsl": run_rsum(rep_t2v_dsl, rep_v2t_dsl),
    }
