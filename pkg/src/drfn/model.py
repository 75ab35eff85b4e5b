"""Full model assembly: encoders, alignment, fusion, relations, output.

A model instance is just a ``ModelParams`` container plus ``ModelDims``;
``forward`` wires one window of data through every stage and returns the
predictions together with the alignment loss and per-step relation
snapshots for diagnostics.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowSample
from .encoders import GruParams, init_gru, run_gru
from .errors import DataError, DrfnError, ShapeError
from .fusion import FusionParams, align_loss, bilinear_fuse, init_fusion
from .relations import (RELATION_MODES, RelationOutputs, RelationParams,
                        init_relation, run_relation_module)

CHECKPOINT_MAGIC = b"DRFNCKPT"
MARKET_INDICATORS = 6


@dataclass
class ModelDims:
    """Every width in one place; mirrors the run configuration."""

    z: int
    t_window: int = 5
    news_dim: int = 768       # L
    market_dim: int = 64      # L'
    fusion_dim: int = 128     # K
    temporal_dim: int = 128   # F
    head_dim: int = 256       # F'
    heads: int = 6            # B

    @property
    def relation_width(self) -> int:
        return self.heads * self.head_dim


@dataclass
class VariantSpec:
    """Which pieces of the full model are wired in.

    relation_mode "none" is the relation-free recurrent baseline; the
    other reduced modes mirror the ablation table variants.
    """

    relation_mode: str = "full"
    alignment: bool = True
    adaptive_residual: bool = True

    def __post_init__(self):
        if self.relation_mode not in RELATION_MODES:
            raise ValueError(f"unknown relation mode {self.relation_mode!r}")

    def to_dict(self) -> dict:
        return {"relation_mode": self.relation_mode,
                "alignment": self.alignment,
                "adaptive_residual": self.adaptive_residual}

    @classmethod
    def from_dict(cls, raw: dict) -> "VariantSpec":
        unknown = set(raw) - {"relation_mode", "alignment", "adaptive_residual"}
        if unknown:
            raise ValueError(f"unknown variant keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class OutputParams:
    """Adaptive residual output head."""

    w_o: Tensor      # (1, B*F')
    b_o: Tensor      # (1, 1)
    w_n: Tensor      # (B*F', L)
    b_n: Tensor      # (1, B*F')
    w_m: Tensor      # (B*F', L')
    b_m: Tensor      # (1, B*F')
    alpha_news: Tensor    # (Z, 1) per-stock residual weights
    alpha_market: Tensor  # (Z, 1)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("w_o", "b_o", "w_n", "b_n", "w_m", "b_m",
                          "alpha_news", "alpha_market")}


@dataclass
class ModelParams:
    dims: ModelDims
    news_gru: GruParams
    market_gru: GruParams
    temporal_gru: GruParams
    align_proj: Tensor          # (L', L)
    fusion: FusionParams
    relation: RelationParams
    head: OutputParams
    no_news: Tensor             # (1, L) learned stand-in for no-news days
    _order: list[str] = field(default_factory=list, repr=False)

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.news_gru.tensors("news_gru"))
        out.update(self.market_gru.tensors("market_gru"))
        out.update(self.temporal_gru.tensors("temporal_gru"))
        out["align_proj"] = self.align_proj
        out.update(self.fusion.tensors("fusion"))
        out.update(self.relation.tensors("relation"))
        out.update(self.head.tensors("head"))
        out["no_news"] = self.no_news
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        tensors = self.tensors()
        missing = set(tensors) - set(state)
        extra = set(state) - set(tensors)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, "
                            f"unexpected {sorted(extra)}")
        for name, t in tensors.items():
            if state[name].shape != t.data.shape:
                raise DataError(f"checkpoint tensor '{name}' has shape "
                                f"{state[name].shape}, expected {t.data.shape}")
            t.data = state[name].astype(np.float64).copy()

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.grad = None


def init_model(dims: ModelDims, seed: int) -> ModelParams:
    """Deterministic initialization; the draw order is fixed."""
    rng = np.random.default_rng(seed)
    news_gru = init_gru(rng, dims.news_dim, dims.news_dim)
    market_gru = init_gru(rng, MARKET_INDICATORS, dims.market_dim)
    temporal_gru = init_gru(rng, dims.fusion_dim, dims.temporal_dim)
    bp = 1.0 / math.sqrt(dims.market_dim)
    align_proj = Tensor(rng.uniform(-bp, bp, size=(dims.market_dim,
                                                   dims.news_dim)),
                        requires_grad=True)
    fusion = init_fusion(rng, dims.news_dim, dims.market_dim, dims.fusion_dim)
    relation = init_relation(rng, dims.z, dims.temporal_dim, dims.head_dim,
                             dims.heads)
    width = dims.relation_width
    bo = 1.0 / math.sqrt(width)
    bn = 1.0 / math.sqrt(dims.news_dim)
    bm = 1.0 / math.sqrt(dims.market_dim)
    head = OutputParams(
        w_o=Tensor(rng.uniform(-bo, bo, size=(1, width)), requires_grad=True),
        b_o=Tensor(np.zeros((1, 1)), requires_grad=True),
        w_n=Tensor(rng.uniform(-bn, bn, size=(width, dims.news_dim)),
                   requires_grad=True),
        b_n=Tensor(np.zeros((1, width)), requires_grad=True),
        w_m=Tensor(rng.uniform(-bm, bm, size=(width, dims.market_dim)),
                   requires_grad=True),
        b_m=Tensor(np.zeros((1, width)), requires_grad=True),
        alpha_news=Tensor(np.full((dims.z, 1), 0.5), requires_grad=True),
        alpha_market=Tensor(np.full((dims.z, 1), 0.5), requires_grad=True),
    )
    no_news = Tensor(np.zeros((1, dims.news_dim)), requires_grad=True)
    return ModelParams(dims=dims, news_gru=news_gru, market_gru=market_gru,
                       temporal_gru=temporal_gru, align_proj=align_proj,
                       fusion=fusion, relation=relation, head=head,
                       no_news=no_news)


def predict_returns(s_t: Tensor, h_news: Tensor, h_market: Tensor,
                    head: OutputParams, adaptive_residual: bool = True,
                    ) -> Tensor:
    """tanh(W_o [s + a1 (W_n h_n + b_n) + a2 (W_m h_m + b_m)] + b_o).

    The residual weights are per-stock scalars; with the residual off
    they are pinned to zero constants so no gradient reaches them.
    """
    shortcut_news = ad.add(ad.matmul(h_news, ad.transpose(head.w_n)), head.b_n)
    shortcut_market = ad.add(ad.matmul(h_market, ad.transpose(head.w_m)),
                             head.b_m)
    if adaptive_residual:
        a1: Tensor | float = head.alpha_news
        a2: Tensor | float = head.alpha_market
        bracket = ad.add(s_t, ad.add(ad.mul(a1, shortcut_news),
                                     ad.mul(a2, shortcut_market)))
    else:
        bracket = s_t
    return ad.tanh(ad.add(ad.matmul(bracket, ad.transpose(head.w_o)),
                          head.b_o))


def total_loss(predictions: Tensor, targets: np.ndarray, align: Tensor | None,
               align_weight: float) -> Tensor:
    """Mean squared error over stocks plus the weighted alignment term."""
    if predictions.data.shape[0] != targets.shape[0]:
        raise ShapeError(f"loss: {predictions.data.shape[0]} predictions vs "
                         f"{targets.shape[0]} targets")
    diff = ad.sub(predictions, Tensor(targets.reshape(-1, 1)))
    mse = ad.mean(ad.mul(diff, diff))
    if align is None or align_weight == 0.0:
        return mse
    return ad.add(mse, ad.mul(align, align_weight))


@dataclass
class ForwardResult:
    predictions: Tensor               # (Z, 1)
    align: Tensor | None              # scalar, None when alignment is off
    relations: list[np.ndarray]       # R^theta values per window step
    dynamics: list[np.ndarray]        # D_dynamic^theta values where computed
    news_state: Tensor
    market_state: Tensor


def forward(params: ModelParams, sample: WindowSample, s_pre: np.ndarray,
            variant: VariantSpec, temperature: float = 0.1,
            alpha_override: float | None = None) -> ForwardResult:
    """Run one window through the whole network.

    Errors from a stage are re-raised with the stage name so a failing
    batch can be located.
    """
    dims = params.dims
    t_steps, z = sample.features.shape[0], sample.features.shape[1]
    if z != dims.z:
        raise ShapeError(f"sample has {z} stocks, model expects {dims.z}")

    stage = "news encoding"
    try:
        news_inputs = []
        for step in range(t_steps):
            base = Tensor(sample.news_mean[step])
            gap = Tensor((~sample.news_mask[step]).astype(float).reshape(-1, 1))
            news_inputs.append(ad.add(base, ad.mul(gap, params.no_news)))
        news_states = run_gru(params.news_gru, news_inputs)

        stage = "market encoding"
        market_inputs = [Tensor(sample.features[step])
                         for step in range(t_steps)]
        market_states = run_gru(params.market_gru, market_inputs)

        stage = "alignment"
        align: Tensor | None = None
        if variant.alignment:
            align = align_loss(news_states, market_states, params.align_proj,
                               temperature)

        stage = "bilinear fusion"
        fused = [bilinear_fuse(params.fusion, h_m, h_n)
                 for h_m, h_n in zip(market_states, news_states)]

        stage = "temporal encoding"
        temporal = run_gru(params.temporal_gru, fused)

        stage = "relation fusion"
        rel: RelationOutputs = run_relation_module(
            temporal, Tensor(s_pre), params.relation,
            mode=variant.relation_mode, alpha_override=alpha_override)

        stage = "output head"
        predictions = predict_returns(rel.s_t, news_states[-1],
                                      market_states[-1], params.head,
                                      variant.adaptive_residual)
    except DrfnError as e:
        raise type(e)(f"[{stage}] {e}") from e

    return ForwardResult(predictions=predictions, align=align,
                         relations=[r.data for r in rel.fused],
                         dynamics=[d.data for d in rel.dynamics],
                         news_state=news_states[-1],
                         market_state=market_states[-1])


def build_variant(spec: VariantSpec, params: ModelParams):
    """Bind a variant wiring to a parameter set.

    Returns a callable with the same signature as ``forward`` minus the
    variant argument.
    """
    def run(sample: WindowSample, s_pre: np.ndarray,
            temperature: float = 0.1) -> ForwardResult:
        return forward(params, sample, s_pre, spec, temperature=temperature)

    return run


def active_parameter_names(params: ModelParams, variant: VariantSpec,
                           ) -> list[str]:
    """Names of tensors that can receive gradient under a variant.

    The alignment-off variant keeps its full set (only the loss term is
    dropped), which is why it is the one variant without a strictly
    smaller count.
    """
    names = set(params.tensors())
    dead: set[str] = set()
    mode = variant.relation_mode
    if mode == "static":
        dead |= {"relation.w_d", "relation.w_drs", "relation.raw_alpha"}
    elif mode == "relative_static":
        dead |= {"relation.w_d", "relation.w_drs"}
    elif mode == "dynamic":
        dead |= {"relation.w_s", "relation.w_drs", "relation.raw_alpha"}
    elif mode == "none":
        dead |= {n for n in names if n.startswith("relation.")}
    if not variant.adaptive_residual:
        dead |= {"head.alpha_news", "head.alpha_market"}
    return sorted(names - dead)


def active_parameter_count(params: ModelParams, variant: VariantSpec) -> int:
    tensors = params.tensors()
    return sum(tensors[n].data.size
               for n in active_parameter_names(params, variant))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, then (name, rank, dims, f64 data) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, array in state.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    offset = 8
    state: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        state[name] = array.reshape(shape).astype(np.float64)
    return state
