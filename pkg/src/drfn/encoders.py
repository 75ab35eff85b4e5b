"""Text embedding and the recurrent encoders for both modalities.

The news encoder is a plug point. The default is a feature-hashing
embedder (deterministic, dependency-free); precomputed embeddings can be
loaded from the binary format handled in :mod:`drfn.data`. Both produce
unit-norm vectors, with the zero vector reserved for empty input.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Feature-hashing text embedder with signed buckets.

    Tokens are lowercased alphanumeric runs. Each token is hashed to one
    of ``dim`` buckets with a +-1 sign; counts accumulate; the result is
    L2-normalized. Same text always maps to the same vector.
    """

    def __init__(self, dim: int = 768):
        if dim <= 0:
            raise ValueError("embedding dim must be positive")
        self.dim = dim

    def bucket_and_sign(self, token: str) -> tuple[int, float]:
        digest = hashlib.md5(token.encode("utf-8")).digest()
        h = int.from_bytes(digest[:8], "little")
        bucket = h % self.dim
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        return bucket, sign

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in _TOKEN_RE.findall(text.lower()):
            bucket, sign = self.bucket_and_sign(token)
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


def aggregate_daily_news(embeddings: Sequence[np.ndarray], dim: int,
                         max_count: int = 30) -> tuple[np.ndarray, bool]:
    """Mean-pool one day's news vectors for one stock.

    Keeps at most ``max_count`` items (newest kept, assuming input is in
    chronological order), drops exact-zero vectors (empty texts), and
    returns ``(mean, True)``. A day with nothing left returns
    ``(zeros, False)`` so the caller can substitute the learned no-news
    vector.
    """
    for e in embeddings:
        if e.shape != (dim,):
            raise ShapeError(
                f"aggregate_daily_news: embedding shape {e.shape} != ({dim},)")
    kept = list(embeddings)[-max_count:] if max_count > 0 else []
    nonzero = [e for e in kept if np.any(e)]
    if not nonzero:
        return np.zeros(dim), False
    return np.mean(np.asarray(nonzero, dtype=np.float64), axis=0), True


@dataclass
class GruParams:
    """One GRU cell's weights; rows of the batch are independent streams.

    w_* map inputs, u_* map the hidden state. Update/reset gates use the
    logistic function, the candidate uses tanh, and the new state is
    (1 - z) * h + z * h_tilde.
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    @property
    def input_dim(self) -> int:
        return self.w_z.data.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.data.shape[1]

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name)
                for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                             "w_c", "u_c", "b_c")}


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> GruParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    def w():
        b = 1.0 / np.sqrt(input_dim)
        return Tensor(rng.uniform(-b, b, size=(input_dim, hidden_dim)),
                      requires_grad=True)

    def u():
        b = 1.0 / np.sqrt(hidden_dim)
        return Tensor(rng.uniform(-b, b, size=(hidden_dim, hidden_dim)),
                      requires_grad=True)

    def bias():
        return Tensor(np.zeros((1, hidden_dim)), requires_grad=True)

    return GruParams(w_z=w(), u_z=u(), b_z=bias(),
                     w_r=w(), u_r=u(), b_r=bias(),
                     w_c=w(), u_c=u(), b_c=bias())


def gru_step(params: GruParams, x: Tensor, h: Tensor) -> Tensor:
    """One cell update for a batch of row vectors.

    x: (Z, input_dim), h: (Z, hidden_dim) -> (Z, hidden_dim).
    """
    if x.data.shape[1] != params.input_dim:
        raise ShapeError(f"gru_step: input dim {x.data.shape[1]} != "
                         f"{params.input_dim}")
    if h.data.shape[1] != params.hidden_dim:
        raise ShapeError(f"gru_step: hidden dim {h.data.shape[1]} != "
                         f"{params.hidden_dim}")
    z = ad.sigmoid(ad.matmul(x, params.w_z) + ad.matmul(h, params.u_z) + params.b_z)
    r = ad.sigmoid(ad.matmul(x, params.w_r) + ad.matmul(h, params.u_r) + params.b_r)
    cand = ad.tanh(ad.matmul(x, params.w_c)
                   + ad.matmul(ad.mul(r, h), params.u_c) + params.b_c)
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))


def run_gru(params: GruParams, inputs: Sequence[Tensor],
            h0: Tensor | None = None) -> list[Tensor]:
    """Unroll the cell over a day-ordered sequence; returns every state.

    The initial state defaults to zeros, shared parameters across all
    rows (stocks), so the parameter count does not grow with Z.
    """
    if not inputs:
        return []
    z_rows = inputs[0].data.shape[0]
    h = h0 if h0 is not None else Tensor(np.zeros((z_rows, params.hidden_dim)))
    states: list[Tensor] = []
    for x in inputs:
        h = gru_step(params, x, h)
        states.append(h)
    return states
