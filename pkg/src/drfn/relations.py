"""Dual relation learning: dynamic attention, recurrent relative-static
structure, bidirectional fusion, and the relational-temporal heads.

Everything operates on Z x Z matrices whose rows/columns index stocks.
The weight shapes (2Z x Z) tie a trained model to a fixed stock universe;
changing the universe requires retraining.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

RELATION_MODES = ("full", "static", "relative_static", "dynamic", "none")


@dataclass
class RelationParams:
    """Learnable pieces of the relation module.

    The blend scalar lives as an unconstrained pre-activation; the
    effective mixing weight sigmoid(raw_alpha) stays inside (0, 1).
    w_tr holds one (F, F') interaction matrix per attention head.
    """

    w_d: Tensor                 # (2Z, Z) dynamic projection
    w_s: Tensor                 # (Z, Z) elementwise static modulation
    raw_alpha: Tensor           # scalar pre-activation of the blend
    w_drs: Tensor               # (2Z, Z) bidirectional fusion projection
    w_tr: list[Tensor]          # B heads of (F, F')

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_d": self.w_d, f"{prefix}.w_s": self.w_s,
               f"{prefix}.raw_alpha": self.raw_alpha,
               f"{prefix}.w_drs": self.w_drs}
        for b, t in enumerate(self.w_tr):
            out[f"{prefix}.w_tr.{b}"] = t
        return out

    @property
    def heads(self) -> int:
        return len(self.w_tr)

    @property
    def head_dim(self) -> int:
        return self.w_tr[0].data.shape[1]


def init_relation(rng: np.random.Generator, z: int, temporal_dim: int,
                  head_dim: int, heads: int) -> RelationParams:
    b2z = 1.0 / math.sqrt(2 * z)
    bf = 1.0 / math.sqrt(temporal_dim)
    return RelationParams(
        w_d=Tensor(rng.uniform(-b2z, b2z, size=(2 * z, z)), requires_grad=True),
        w_s=Tensor(np.ones((z, z)), requires_grad=True),
        raw_alpha=Tensor(0.0, requires_grad=True),
        w_drs=Tensor(rng.uniform(-b2z, b2z, size=(2 * z, z)),
                     requires_grad=True),
        w_tr=[Tensor(rng.uniform(-bf, bf, size=(temporal_dim, head_dim)),
                     requires_grad=True) for _ in range(heads)],
    )


def raw_attention(v: Tensor, a: int) -> Tensor:
    """A = V (a V)^T / sqrt(F); the a=-1 view is the exact negation."""
    if a not in (1, -1):
        raise ValueError(f"correlation mode must be +-1, got {a}")
    f_dim = v.data.shape[1]
    return ad.mul(ad.matmul(v, ad.transpose(v)), a / math.sqrt(f_dim))


def behavioral_distance(v: Tensor, a: int) -> Tensor:
    """D[i, j] = || v_i - a * v_j ||_1."""
    if a not in (1, -1):
        raise ValueError(f"correlation mode must be +-1, got {a}")
    other = v if a == 1 else ad.neg(v)
    return ad.pairwise_l1(v, other)


def modulated_attention(attention: Tensor, distance: Tensor) -> Tensor:
    """Soft-gate attention by behavioral distance: A * exp(-D).

    exp(-D) lies in (0, 1], so the gate only attenuates; huge distances
    underflow to an exact zero, which is the intended limit.
    """
    if attention.data.shape != distance.data.shape:
        raise ShapeError(f"modulated_attention: {attention.data.shape} vs "
                         f"{distance.data.shape}")
    return ad.mul(attention, ad.exp(ad.neg(distance)))


def cross_perspective_fuse(mod_a: Tensor, mod_opposite: Tensor) -> Tensor:
    """softmax_rows(A_a A_{-a}^T / sqrt(Z)) A_{-a}."""
    z = mod_a.data.shape[0]
    scores = ad.mul(ad.matmul(mod_a, ad.transpose(mod_opposite)),
                    1.0 / math.sqrt(z))
    return ad.matmul(ad.softmax_rows(scores), mod_opposite)


def dynamic_relation(fused_pos: Tensor, fused_neg: Tensor, w_d: Tensor,
                     ) -> Tensor:
    """GELU([F_pos || F_neg] W_d) -> Z x Z dynamic relation matrix."""
    return ad.gelu(ad.matmul(ad.concat_cols([fused_pos, fused_neg]), w_d))


def dynamic_chain(v: Tensor, w_d: Tensor) -> Tensor:
    """Full per-step dynamic relation from the hidden-state matrix."""
    modulated = {}
    for a in (1, -1):
        modulated[a] = modulated_attention(raw_attention(v, a),
                                           behavioral_distance(v, a))
    fused_pos = cross_perspective_fuse(modulated[1], modulated[-1])
    fused_neg = cross_perspective_fuse(modulated[-1], modulated[1])
    return dynamic_relation(fused_pos, fused_neg, w_d)


def relative_static(dyn_prev: Tensor | None, modulated_static: Tensor,
                    alpha: Tensor | float) -> Tensor:
    """alpha * D_prev + (1 - alpha) * (W_s o S_pre).

    At the first step of a window there is no prior dynamic relation and
    the modulated static matrix is used alone.
    """
    if dyn_prev is None:
        return modulated_static
    return ad.add(ad.mul(alpha, dyn_prev),
                  ad.mul(ad.sub(1.0, alpha), modulated_static))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with the matrix rows as tokens."""
    d_k = k.data.shape[0]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def bidirectional_fuse(s_rel: Tensor, d_dyn: Tensor, w_drs: Tensor) -> Tensor:
    """GELU([Attn(S,D,D) || Attn(D,S,S)] W_DRS)."""
    a_sd = scaled_dot_attention(s_rel, d_dyn, d_dyn)
    a_ds = scaled_dot_attention(d_dyn, s_rel, s_rel)
    return ad.gelu(ad.matmul(ad.concat_cols([a_sd, a_ds]), w_drs))


def relational_temporal_fuse(r: Tensor, v: Tensor,
                             w_tr: Sequence[Tensor]) -> Tensor:
    """Multi-head bilinear mix of relations with temporal features.

    Head b computes tanh(R (V W_tr[b])); heads are concatenated along
    columns into a Z x (B * F') matrix. The relation matrix is shared
    across heads.
    """
    heads = [ad.tanh(ad.matmul(r, ad.matmul(v, w))) for w in w_tr]
    return ad.concat_cols(heads)


@dataclass
class RelationOutputs:
    """Per-step relation matrices plus the final fused representation."""

    fused: list[Tensor]        # R^theta (or the variant's stand-in) per step
    dynamics: list[Tensor]     # D_dynamic^theta where the mode computes it
    s_t: Tensor                # Z x (B * F')


def run_relation_module(v_seq: Sequence[Tensor], s_pre: Tensor,
                        params: RelationParams, mode: str = "full",
                        alpha_override: float | None = None,
                        ) -> RelationOutputs:
    """Iterate the relation recurrence over a window of hidden states.

    mode selects the ablation wiring: "static" pins the relation to the
    modulated predefined matrix, "relative_static" runs only the
    recurrence (fed by its own previous output), "dynamic" uses the
    per-step dynamic relation directly, and "none" skips the module,
    returning a zero fused representation.
    """
    if mode not in RELATION_MODES:
        raise ValueError(f"unknown relation mode {mode!r}")
    z = v_seq[0].data.shape[0]
    if mode == "none":
        width = params.heads * params.head_dim
        return RelationOutputs(fused=[], dynamics=[],
                               s_t=Tensor(np.zeros((z, width))))

    modulated_static = ad.mul(params.w_s, s_pre)
    if alpha_override is not None:
        alpha: Tensor | float = float(alpha_override)
    else:
        alpha = ad.sigmoid(params.raw_alpha)

    fused: list[Tensor] = []
    dynamics: list[Tensor] = []
    dyn_prev: Tensor | None = None
    rel_prev: Tensor | None = None
    for v in v_seq:
        if mode == "static":
            r = modulated_static
        elif mode == "relative_static":
            r = relative_static(rel_prev, modulated_static, alpha)
            rel_prev = r
        elif mode == "dynamic":
            d_dyn = dynamic_chain(v, params.w_d)
            dynamics.append(d_dyn)
            r = d_dyn
        else:  # full
            d_dyn = dynamic_chain(v, params.w_d)
            s_rel = relative_static(dyn_prev, modulated_static, alpha)
            r = bidirectional_fuse(s_rel, d_dyn, params.w_drs)
            dynamics.append(d_dyn)
            dyn_prev = d_dyn
        fused.append(r)

    s_t = relational_temporal_fuse(fused[-1], v_seq[-1], params.w_tr)
    return RelationOutputs(fused=fused, dynamics=dynamics, s_t=s_t)
