"""Fused input embeddings for the two streams.

DTC side: ECU and base-code rows are concatenated along features, the
fault-byte row is added across the full width (like a segment id), and a
parameter-free sinusoid channel built from continuous time and mileage is
added on top. Env side: value and description rows are concatenated and the
unit row added. Each stream gets one learned [CLS] row prepended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tokens import VocabSizes


@dataclass(frozen=True)
class PositionalConfig:
    """Frequency bases for the continuous time/mileage sinusoids."""

    base_time: float = 5000.0
    base_mileage: float = 5000.0

    def __post_init__(self):
        if self.base_time <= 1.0 or self.base_mileage <= 1.0:
            raise ValueError("sinusoid frequency bases must be > 1")


class DtcEmbeddingTables:
    """Lookup tables for the DTC stream: ecu (d_ecu wide), base (d_base wide,
    d_ecu + d_base = d), fault (full d), and the learned [CLS] row."""

    def __init__(self, sizes: VocabSizes, d: int, rng: np.random.Generator, d_ecu: int | None = None):
        if d % 2 != 0:
            raise ValueError(f"hidden size must be even, got {d}")
        self.d = d
        self.d_ecu = d // 2 if d_ecu is None else d_ecu
        self.d_base = d - self.d_ecu
        self.ecu = T.param((sizes.ecu_rows, self.d_ecu), rng)
        self.base = T.param((sizes.base_rows, self.d_base), rng)
        self.fault = T.param((2, d), rng)
        self.cls = T.param((d,), rng)

    def parameters(self) -> dict[str, T.Tensor]:
        return {"dtc_emb.ecu": self.ecu, "dtc_emb.base": self.base,
                "dtc_emb.fault": self.fault, "dtc_emb.cls": self.cls}


class EnvEmbeddingTables:
    """Lookup tables for the env stream.

    ``fusion="concat"``: value (d_v) and description (d_d) rows concatenated,
    d_v + d_d = d. ``fusion="sum"``: both tables full width and summed. The
    unit row is always full width and added on top.
    """

    def __init__(
        self,
        sizes: VocabSizes,
        d: int,
        rng: np.random.Generator,
        fusion: str = "concat",
        d_value: int | None = None,
    ):
        if fusion not in ("concat", "sum"):
            raise ValueError(f"unknown env fusion mode {fusion!r}")
        self.d = d
        self.fusion = fusion
        if fusion == "concat":
            self.d_value = d // 2 if d_value is None else d_value
            self.d_desc = d - self.d_value
        else:
            self.d_value = self.d_desc = d
        self.value = T.param((sizes.value_rows, self.d_value), rng)
        self.desc = T.param((sizes.description_rows, self.d_desc), rng)
        self.unit = T.param((sizes.unit_rows, d), rng)
        self.cls = T.param((d,), rng)

    def parameters(self) -> dict[str, T.Tensor]:
        return {"env_emb.value": self.value, "env_emb.desc": self.desc,
                "env_emb.unit": self.unit, "env_emb.cls": self.cls}


def embed_dtc(ecu_ids: np.ndarray, base_ids: np.ndarray, fault_ids: np.ndarray,
              tables: DtcEmbeddingTables) -> T.Tensor:
    """concat(ecu row, base row) + fault row, per position."""
    e = T.embedding(tables.ecu, ecu_ids)
    b = T.embedding(tables.base, base_ids)
    f = T.embedding(tables.fault, fault_ids)
    return T.concat([e, b], axis=-1) + f


def sinusoid_channel(values: np.ndarray, width: int, base: float) -> np.ndarray:
    """sin/cos pattern of one continuous signal: sin(v * base^(-j/width)) on
    even j, cos with the preceding exponent on odd j."""
    if width % 2 != 0:
        raise ValueError(f"channel width must be even, got {width}")
    j = np.arange(width, dtype=np.float64)
    exponent = np.where(j % 2 == 0, j, j - 1) / width
    freq = base ** (-exponent)
    angle = np.asarray(values, dtype=np.float64)[..., None] * freq
    out = np.empty(angle.shape, dtype=np.float64)
    out[..., 0::2] = np.sin(angle[..., 0::2])
    out[..., 1::2] = np.cos(angle[..., 1::2])
    return out


def time_mileage_embedding(t: np.ndarray, m: np.ndarray, d: int, cfg: PositionalConfig) -> T.Tensor:
    """Parameter-free positional channel: time sinusoids on the first d/2
    features, mileage sinusoids on the rest."""
    if d % 4 != 0:
        raise ValueError(f"hidden size must be divisible by 4 for the two sinusoid channels, got {d}")
    half = d // 2
    tm = np.concatenate(
        [sinusoid_channel(t, half, cfg.base_time), sinusoid_channel(m, half, cfg.base_mileage)],
        axis=-1,
    )
    return T.Tensor(tm)


def _prepend_cls(x: T.Tensor, cls_row: T.Tensor) -> T.Tensor:
    """Broadcast the learned [CLS] row to (…, 1, d) and stick it in front."""
    lead = x.shape[:-2]
    cls = T.reshape(cls_row, (1,) * len(lead) + (1, x.shape[-1]))
    if lead:
        cls = cls + T.Tensor(np.zeros(lead + (1, x.shape[-1])))
    return T.concat([cls, x], axis=-2)


def fuse_dtc_input(
    ecu_ids: np.ndarray,
    base_ids: np.ndarray,
    fault_ids: np.ndarray,
    t: np.ndarray,
    m: np.ndarray,
    tables: DtcEmbeddingTables,
    cfg: PositionalConfig,
) -> T.Tensor:
    """Full DTC-side input: embeddings + sinusoids, [CLS] at position 0.

    The [CLS] slot carries t = m = 0, so its positional pattern is the fixed
    alternating 0/1 vector.
    """
    fused = embed_dtc(ecu_ids, base_ids, fault_ids, tables) + time_mileage_embedding(
        t, m, tables.d, cfg
    )
    zero = np.zeros((1,), dtype=np.float64)
    cls_row = tables.cls + time_mileage_embedding(zero, zero, tables.d, cfg).reshape(tables.d)
    return _prepend_cls(fused, cls_row)


def embed_env(desc_ids: np.ndarray, value_ids: np.ndarray, unit_ids: np.ndarray,
              tables: EnvEmbeddingTables) -> T.Tensor:
    """Env-side input: value/description fusion + unit row, [CLS]_env at 0."""
    v = T.embedding(tables.value, value_ids)
    dsc = T.embedding(tables.desc, desc_ids)
    u = T.embedding(tables.unit, unit_ids)
    if tables.fusion == "concat":
        fused = T.concat([v, dsc], axis=-1) + u
    else:
        fused = v + dsc + u
    return _prepend_cls(fused, tables.cls)
