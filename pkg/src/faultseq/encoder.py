"""Dual-stream bidirectional encoder with rotary positions.

Each layer runs two cross-attentions in parallel from the layer's input
states: DTC queries against env keys/values and env queries against DTC
keys/values, with separate projection weights per direction. Queries and
keys get rotary position encodings with a per-modality frequency base, so
score logits depend on relative position when the bases match. Residual
paths use RMS normalization. A conventional self-attention encoder with
layer normalization serves as the unimodal baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .embeddings import (
    DtcEmbeddingTables,
    EnvEmbeddingTables,
    PositionalConfig,
    embed_env,
    fuse_dtc_input,
)
from .tokens import Batch, VocabSizes

NEG_INF = -1e9  # additive mask for padded keys; large enough to zero them out

DTC_TO_ENV = "dtc_to_env"
ENV_TO_DTC = "env_to_dtc"


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_mult: int = 4
    theta0_dtc: float = 5000.0
    theta0_env: float = 80000.0
    alignment: str = "softmax"  # or "entmax15"
    self_attn_sublayer: bool = False
    use_rope: bool = True

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if (self.d // self.heads) % 2 != 0:
            raise ValueError(f"per-head dim {self.d // self.heads} must be even for rotary pairs")
        if self.theta0_dtc <= 1.0 or self.theta0_env <= 1.0:
            raise ValueError("rotary frequency bases must be > 1")
        if self.alignment not in ("softmax", "entmax15"):
            raise ValueError(f"unknown alignment {self.alignment!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class AttentionRecord:
    """Score matrix of one head: rows are query positions, columns keys."""

    layer: int
    head: int
    direction: str
    scores: np.ndarray


def rope_angles(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    freqs = base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)
    angle = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.cos(angle), np.sin(angle)


def rope_apply(x: T.Tensor, positions: np.ndarray, base: float) -> T.Tensor:
    """Rotate coordinate pairs of the last axis by pos * base^(-2i/d_h).

    ``positions`` indexes the second-to-last axis. Position 0 is the
    identity; rotations preserve norms exactly.
    """
    if x.shape[-1] % 2 != 0:
        raise ValueError(f"rotary encoding needs an even feature dim, got {x.shape[-1]}")
    cos, sin = rope_angles(positions, x.shape[-1], base)
    return T.rotate_pairs(x, cos, sin)


def _align(logits: T.Tensor, alignment: str) -> T.Tensor:
    if alignment == "entmax15":
        return T.entmax15_rows(logits)
    return T.softmax_rows(logits)


class DirectionWeights:
    """Q/K/V/output projections of one attention direction."""

    def __init__(self, d: int, rng: np.random.Generator):
        s = d**-0.5
        self.wq = T.param((d, d), rng, s)
        self.wk = T.param((d, d), rng, s)
        self.wv = T.param((d, d), rng, s)
        self.wo = T.param((d, d), rng, s)

    def parameters(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


class FeedForward:
    def __init__(self, d: int, mult: int, rng: np.random.Generator):
        self.w1 = T.param((d, d * mult), rng, d**-0.5)
        self.b1 = T.param(np.zeros(d * mult))
        self.w2 = T.param((d * mult, d), rng, (d * mult) ** -0.5)
        self.b2 = T.param(np.zeros(d))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    """(B, L, d) -> (B, heads, L, d/heads)."""
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _ensure_key_mask(mask: np.ndarray | None, b: int, lk: int) -> np.ndarray:
    if mask is None:
        return np.ones((b, lk), dtype=bool)
    mask = mask.astype(bool).copy()
    dead = ~mask.any(axis=-1)
    mask[dead, 0] = True  # fall back to the [CLS] key rather than a NaN row
    return mask


def cross_attention(
    q_src: T.Tensor,
    kv_src: T.Tensor,
    weights: DirectionWeights,
    q_positions: np.ndarray,
    k_positions: np.ndarray,
    q_base: float,
    k_base: float,
    cfg: EncoderConfig,
    key_mask: np.ndarray | None = None,
    trace: bool = False,
    layer: int = 0,
    direction: str = DTC_TO_ENV,
) -> tuple[T.Tensor, list[AttentionRecord]]:
    """Multi-head attention of one stream's queries over the other's keys.

    Accepts (L, d) or batched (B, L, d) inputs. Padded key positions are
    pushed to -inf before the alignment function; tracing (batch size 1
    only) returns one detached score matrix per head.
    """
    squeeze = q_src.ndim == 2
    if squeeze:
        q_src = T.reshape(q_src, (1,) + q_src.shape)
        kv_src = T.reshape(kv_src, (1,) + kv_src.shape)
    b, lq, d = q_src.shape
    lk = kv_src.shape[1]

    q = _split_heads(q_src @ weights.wq, cfg.heads)
    k = _split_heads(kv_src @ weights.wk, cfg.heads)
    v = _split_heads(kv_src @ weights.wv, cfg.heads)
    if cfg.use_rope:
        q = rope_apply(q, q_positions, q_base)
        k = rope_apply(k, k_positions, k_base)

    logits = (q @ T.transpose(k, (0, 1, 3, 2))) * (cfg.head_dim**-0.5)
    mask = _ensure_key_mask(key_mask, b, lk)
    additive = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
    scores = _align(logits + T.Tensor(additive), cfg.alignment)

    context = _merge_heads(scores @ v) @ weights.wo

    records: list[AttentionRecord] = []
    if trace:
        if b != 1:
            raise ValueError("attention tracing expects a single sequence, not a batch")
        for h in range(cfg.heads):
            records.append(AttentionRecord(layer, h, direction, scores.data[0, h].copy()))
    if squeeze:
        context = T.reshape(context, (lq, d))
    return context, records


class CoAttentionLayer:
    """One dual-stream layer: parallel cross blocks plus per-stream FFNs."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d
        self.d2e = DirectionWeights(d, rng)
        self.e2d = DirectionWeights(d, rng)
        self.ffn_dtc = FeedForward(d, cfg.ffn_mult, rng)
        self.ffn_env = FeedForward(d, cfg.ffn_mult, rng)
        self.g_attn_dtc = T.param(np.ones(d))
        self.g_ffn_dtc = T.param(np.ones(d))
        self.g_attn_env = T.param(np.ones(d))
        self.g_ffn_env = T.param(np.ones(d))
        self.self_dtc = DirectionWeights(d, rng) if cfg.self_attn_sublayer else None
        self.self_env = DirectionWeights(d, rng) if cfg.self_attn_sublayer else None
        self.g_self_dtc = T.param(np.ones(d)) if cfg.self_attn_sublayer else None
        self.g_self_env = T.param(np.ones(d)) if cfg.self_attn_sublayer else None

    def parameters(self, prefix: str) -> dict[str, T.Tensor]:
        out = {}
        out.update(self.d2e.parameters(f"{prefix}.d2e"))
        out.update(self.e2d.parameters(f"{prefix}.e2d"))
        out.update(self.ffn_dtc.parameters(f"{prefix}.ffn_dtc"))
        out.update(self.ffn_env.parameters(f"{prefix}.ffn_env"))
        out[f"{prefix}.g_attn_dtc"] = self.g_attn_dtc
        out[f"{prefix}.g_ffn_dtc"] = self.g_ffn_dtc
        out[f"{prefix}.g_attn_env"] = self.g_attn_env
        out[f"{prefix}.g_ffn_env"] = self.g_ffn_env
        if self.self_dtc is not None:
            out.update(self.self_dtc.parameters(f"{prefix}.self_dtc"))
            out.update(self.self_env.parameters(f"{prefix}.self_env"))
            out[f"{prefix}.g_self_dtc"] = self.g_self_dtc
            out[f"{prefix}.g_self_env"] = self.g_self_env
        return out


def coattention_layer(
    h_dtc: T.Tensor,
    h_env: T.Tensor,
    layer: CoAttentionLayer,
    cfg: EncoderConfig,
    dtc_positions: np.ndarray,
    env_positions: np.ndarray,
    dtc_mask: np.ndarray | None = None,
    env_mask: np.ndarray | None = None,
    layer_idx: int = 0,
    trace: bool = False,
) -> tuple[T.Tensor, T.Tensor, list[AttentionRecord]]:
    """Advance both streams one layer.

    Both cross-attentions read the layer's *input* states, so the two
    directions are symmetric; each stream then applies residual + RMS norm
    around the attention and FFN blocks.
    """
    records: list[AttentionRecord] = []
    if cfg.self_attn_sublayer:
        sa_d, _ = cross_attention(
            h_dtc, h_dtc, layer.self_dtc, dtc_positions, dtc_positions,
            cfg.theta0_dtc, cfg.theta0_dtc, cfg, dtc_mask,
        )
        h_dtc = T.rms_norm(h_dtc + sa_d, layer.g_self_dtc)
        sa_e, _ = cross_attention(
            h_env, h_env, layer.self_env, env_positions, env_positions,
            cfg.theta0_env, cfg.theta0_env, cfg, env_mask,
        )
        h_env = T.rms_norm(h_env + sa_e, layer.g_self_env)

    ctx_d, rec_d = cross_attention(
        h_dtc, h_env, layer.d2e, dtc_positions, env_positions,
        cfg.theta0_dtc, cfg.theta0_env, cfg, env_mask,
        trace=trace, layer=layer_idx, direction=DTC_TO_ENV,
    )
    ctx_e, rec_e = cross_attention(
        h_env, h_dtc, layer.e2d, env_positions, dtc_positions,
        cfg.theta0_env, cfg.theta0_dtc, cfg, dtc_mask,
        trace=trace, layer=layer_idx, direction=ENV_TO_DTC,
    )
    records += rec_d + rec_e

    h_dtc = T.rms_norm(h_dtc + ctx_d, layer.g_attn_dtc)
    h_dtc = T.rms_norm(h_dtc + layer.ffn_dtc(h_dtc), layer.g_ffn_dtc)
    h_env = T.rms_norm(h_env + ctx_e, layer.g_attn_env)
    h_env = T.rms_norm(h_env + layer.ffn_env(h_env), layer.g_ffn_env)
    return h_dtc, h_env, records


class CoAttentionStack:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [CoAttentionLayer(cfg, rng) for _ in range(cfg.layers)]

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"stack.layer{i}"))
        return out


def encode(
    x_dtc: T.Tensor,
    x_env: T.Tensor,
    stack: CoAttentionStack,
    cfg: EncoderConfig,
    dtc_mask: np.ndarray | None = None,
    env_mask: np.ndarray | None = None,
    trace: bool = False,
) -> tuple[T.Tensor, T.Tensor, list[AttentionRecord]]:
    """Run the full stack; an empty stack returns the inputs unchanged."""
    lq = x_dtc.shape[-2]
    lk = x_env.shape[-2]
    dtc_positions = np.arange(lq)
    env_positions = np.arange(lk)
    records: list[AttentionRecord] = []
    h_dtc, h_env = x_dtc, x_env
    for i, layer in enumerate(stack.layers):
        h_dtc, h_env, recs = coattention_layer(
            h_dtc, h_env, layer, cfg, dtc_positions, env_positions,
            dtc_mask, env_mask, layer_idx=i, trace=trace,
        )
        records += recs
    return h_dtc, h_env, records


# -- unimodal baseline ------------------------------------------------------------


class UnimodalLayer:
    """Self-attention block with post layer normalization, no rotary."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d
        self.attn = DirectionWeights(d, rng)
        self.ffn = FeedForward(d, cfg.ffn_mult, rng)
        self.ln1_g = T.param(np.ones(d))
        self.ln1_b = T.param(np.zeros(d))
        self.ln2_g = T.param(np.ones(d))
        self.ln2_b = T.param(np.zeros(d))

    def parameters(self, prefix: str) -> dict[str, T.Tensor]:
        out = self.attn.parameters(f"{prefix}.attn")
        out.update(self.ffn.parameters(f"{prefix}.ffn"))
        out.update({f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
                    f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b})
        return out


class UnimodalStack:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [UnimodalLayer(cfg, rng) for _ in range(cfg.layers)]

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"baseline.layer{i}"))
        return out


def encode_unimodal(
    x: T.Tensor,
    stack: UnimodalStack,
    mask: np.ndarray | None = None,
    trace: bool = False,
) -> tuple[T.Tensor, list[AttentionRecord]]:
    cfg = stack.cfg
    no_rope = EncoderConfig(
        d=cfg.d, heads=cfg.heads, layers=cfg.layers, ffn_mult=cfg.ffn_mult,
        alignment="softmax", use_rope=False,
    )
    positions = np.arange(x.shape[-2])
    records: list[AttentionRecord] = []
    h = x
    for i, layer in enumerate(stack.layers):
        ctx, recs = cross_attention(
            h, h, layer.attn, positions, positions, cfg.theta0_dtc, cfg.theta0_dtc,
            no_rope, mask, trace=trace, layer=i, direction="self",
        )
        records += recs
        h = T.layer_norm(h + ctx, layer.ln1_g, layer.ln1_b)
        h = T.layer_norm(h + layer.ffn(h), layer.ln2_g, layer.ln2_b)
    return h, records


# -- attention aggregation ----------------------------------------------------------

CLS_KEY = "[CLS]"


def attn_aggregate(
    records: list[AttentionRecord],
    key_units: list,
    mode: str = "per_token",
) -> dict[tuple[int, object], float]:
    """Column mass of attention score matrices, per head.

    ``key_units`` labels each key column with its unit. A record with exactly
    one extra column is taken to start with the env [CLS] key: that column is
    grouped under ``CLS_KEY`` and the matching [CLS] query row is dropped, so
    reported masses sum to the number of real query events per head.

    Returns {(head, key): mass} where key is the column index in
    ``per_token`` mode and the unit label in ``per_unit`` mode.
    """
    if mode not in ("per_token", "per_unit"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    out: dict[tuple[int, object], float] = {}
    for rec in records:
        scores = rec.scores
        labels = list(key_units)
        if scores.shape[1] == len(key_units) + 1:
            labels = [CLS_KEY] + labels
            scores = scores[1:]
        elif scores.shape[1] != len(key_units):
            raise ValueError(
                f"record has {scores.shape[1]} key columns but {len(key_units)} unit labels"
            )
        column_mass = scores.sum(axis=0)
        if mode == "per_token":
            for j, mass in enumerate(column_mass):
                out[(rec.head, j)] = out.get((rec.head, j), 0.0) + float(mass)
        else:
            for j, mass in enumerate(column_mass):
                key = (rec.head, labels[j])
                out[key] = out.get(key, 0.0) + float(mass)
    return out


# -- full models ---------------------------------------------------------------------


class MultimodalEncoder:
    """Embedding tables plus the co-attention stack for both streams."""

    def __init__(
        self,
        sizes: VocabSizes,
        cfg: EncoderConfig,
        pos_cfg: PositionalConfig | None = None,
        seed: int = 0,
        env_fusion: str = "concat",
    ):
        rng = np.random.default_rng(seed)
        self.sizes = sizes
        self.cfg = cfg
        self.pos_cfg = pos_cfg if pos_cfg is not None else PositionalConfig()
        self.dtc_tables = DtcEmbeddingTables(sizes, cfg.d, rng)
        self.env_tables = EnvEmbeddingTables(sizes, cfg.d, rng, fusion=env_fusion)
        self.stack = CoAttentionStack(cfg, rng)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        out.update(self.dtc_tables.parameters())
        out.update(self.env_tables.parameters())
        out.update(self.stack.parameters())
        return out

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    def encode_batch(self, batch: Batch, trace: bool = False):
        """Returns (H_d, H_e, records) with the [CLS] state at row 0 and the
        full-length masks (CLS slot included) attached as ndarray extras."""
        x_d = fuse_dtc_input(
            batch.ecu, batch.base, batch.fault, batch.t, batch.m,
            self.dtc_tables, self.pos_cfg,
        )
        x_e = embed_env(batch.desc, batch.value, batch.unit, self.env_tables)
        b = batch.size
        ones = np.ones((b, 1), dtype=bool)
        dtc_mask = np.concatenate([ones, batch.dtc_mask], axis=1)
        env_mask = np.concatenate([ones, batch.env_mask], axis=1)
        return encode(x_d, x_e, self.stack, self.cfg, dtc_mask, env_mask, trace=trace)


class UnimodalEncoder:
    """DTC-only baseline: same fused DTC input, self-attention stack."""

    def __init__(
        self,
        sizes: VocabSizes,
        cfg: EncoderConfig,
        pos_cfg: PositionalConfig | None = None,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.sizes = sizes
        self.cfg = cfg
        self.pos_cfg = pos_cfg if pos_cfg is not None else PositionalConfig()
        self.dtc_tables = DtcEmbeddingTables(sizes, cfg.d, rng)
        self.stack = UnimodalStack(cfg, rng)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        out.update(self.dtc_tables.parameters())
        out.update(self.stack.parameters())
        return out

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    def encode_batch(self, batch: Batch, trace: bool = False):
        x = fuse_dtc_input(
            batch.ecu, batch.base, batch.fault, batch.t, batch.m,
            self.dtc_tables, self.pos_cfg,
        )
        ones = np.ones((batch.size, 1), dtype=bool)
        mask = np.concatenate([ones, batch.dtc_mask], axis=1)
        return encode_unimodal(x, self.stack, mask, trace=trace)


def cls_state(h: T.Tensor) -> T.Tensor:
    """Row 0 of every sequence: (B, L, d) -> (B, d)."""
    sliced = T.slice_axis(h, h.ndim - 2, 0, 1)
    return T.reshape(sliced, sliced.shape[:-2] + (h.shape[-1],))
