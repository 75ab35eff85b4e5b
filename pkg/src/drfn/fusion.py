"""Cross-modal contrastive alignment, bilinear fusion, temporal encoding.

The alignment loss is a one-directional InfoNCE: news states anchor,
market states (linearly projected into the news space, since the two
hidden sizes differ) form the candidate set across stocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import GruParams, run_gru
from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass
class AlignmentConfig:
    temperature: float = 0.1
    weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got "
                             f"{self.temperature}")
        if self.weight < 0:
            raise ValueError("alignment weight must be nonnegative")


@dataclass
class FusionParams:
    """Weighted bilinear fusion of the two modality states.

    w: (K, L + L') applied to [h_m || h_n]; t: (L, L', K) bilinear tensor
    whose slice [:, :, k] fills output column k; b: (1, K).
    """

    w: Tensor
    t: Tensor
    b: Tensor

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.t": self.t,
                f"{prefix}.b": self.b}


def init_fusion(rng: np.random.Generator, news_dim: int, market_dim: int,
                fusion_dim: int) -> FusionParams:
    bw = 1.0 / math.sqrt(news_dim + market_dim)
    bt = 1.0 / math.sqrt(news_dim * market_dim)
    return FusionParams(
        w=Tensor(rng.uniform(-bw, bw, size=(fusion_dim,
                                            news_dim + market_dim)),
                 requires_grad=True),
        t=Tensor(rng.uniform(-bt, bt, size=(news_dim, market_dim,
                                            fusion_dim)),
                 requires_grad=True),
        b=Tensor(np.zeros((1, fusion_dim)), requires_grad=True),
    )


def _logsumexp_rows(scores: Tensor) -> Tensor:
    # The row max is detached; the gradient of logsumexp is the softmax
    # either way, so treating it as a constant shift is exact.
    shift = Tensor(scores.data.max(axis=1, keepdims=True))
    return ad.add(ad.log(ad.tsum(ad.exp(ad.sub(scores, shift)),
                                 axis=1, keepdims=True)), shift)


def align_loss(news_states: Sequence[Tensor], market_states: Sequence[Tensor],
               projection: Tensor, temperature: float) -> Tensor:
    """InfoNCE over stocks, averaged across stocks and time steps.

    For each step and stock i the positive is (news_i, market_i); the
    negatives are the other stocks' market states at the same step.
    Zero-norm rows fall back to an exact-zero cosine (and are logged).
    """
    if len(news_states) != len(market_states):
        raise ShapeError("alignment needs matching sequence lengths")
    t_steps = len(news_states)
    z = news_states[0].data.shape[0]
    eye = Tensor(np.eye(z))
    inv_t = 1.0 / temperature
    total: Tensor | None = None
    for h_n, h_m in zip(news_states, market_states):
        projected = ad.matmul(h_m, projection)
        if (np.linalg.norm(h_n.data, axis=1) == 0.0).any() or \
                (np.linalg.norm(projected.data, axis=1) == 0.0).any():
            log.warning("align_loss: zero-norm state; cosine treated as 0")
        sim = ad.matmul(ad.l2_normalize_rows(h_n),
                        ad.transpose(ad.l2_normalize_rows(projected)))
        scaled = ad.mul(sim, inv_t)
        matched = ad.tsum(ad.mul(scaled, eye), axis=1, keepdims=True)
        per_stock = ad.sub(_logsumexp_rows(scaled), matched)
        contribution = ad.tsum(per_stock)
        total = contribution if total is None else ad.add(total, contribution)
    return ad.mul(total, 1.0 / (t_steps * z))


def bilinear_fuse(params: FusionParams, h_m: Tensor, h_n: Tensor) -> Tensor:
    """x = tanh(W [h_m || h_n] + h_n^T T h_m + b), rows are stocks.

    Output column k of the bilinear part is
    sum_{p,q} T[p, q, k] * h_n[:, p] * h_m[:, q].
    """
    k_dim, cat_dim = params.w.data.shape
    if h_m.data.shape[1] + h_n.data.shape[1] != cat_dim:
        raise ShapeError(f"bilinear_fuse: concat dim "
                         f"{h_m.data.shape[1]}+{h_n.data.shape[1]} != {cat_dim}")
    linear = ad.matmul(ad.concat_cols([h_m, h_n]), ad.transpose(params.w))
    interaction = ad.bilinear_pair(h_n, params.t, h_m)
    return ad.tanh(ad.add(ad.add(linear, interaction), params.b))


def temporal_sequence(params: GruParams, fused: Sequence[Tensor],
                      ) -> list[Tensor]:
    """Third GRU over the fused vectors; returns every hidden state."""
    return run_gru(params, fused)
