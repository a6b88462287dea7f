"""Mapping preprocessed event streams onto integer token arrays.

Every categorical space (ECU, base code, description, unit, discretized
value) reserves ids 0..2 for padding, mask, and unknown; real ids start at
:data:`~faultseq.quantiles.N_SPECIALS`. Value ids come straight from the
fitted :class:`~faultseq.quantiles.ValueVocab`, which shares the same
reserved range.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .events import ModalityPair
from .quantiles import MASK_ID, N_SPECIALS, PAD_ID, UNK_ID, ValueVocab

__all__ = [
    "PAD_ID",
    "MASK_ID",
    "UNK_ID",
    "N_SPECIALS",
    "VocabSizes",
    "TokenizedSequence",
    "Batch",
    "shift_id",
    "tokenize_pair",
    "collate",
]


def shift_id(raw_id: int, cardinality: int) -> int:
    """Raw categorical id -> token id; out-of-vocabulary ids map to UNK."""
    if 0 <= raw_id < cardinality:
        return raw_id + N_SPECIALS
    return UNK_ID


@dataclass(frozen=True)
class VocabSizes:
    """Raw cardinalities of the categorical spaces plus the value-token count.

    ``*_rows`` properties give the embedding-table row counts (specials
    included). ``value_tokens`` already includes the reserved range.
    """

    ecu: int
    base: int
    description: int
    unit: int
    value_tokens: int

    @property
    def ecu_rows(self) -> int:
        return self.ecu + N_SPECIALS

    @property
    def base_rows(self) -> int:
        return self.base + N_SPECIALS

    @property
    def description_rows(self) -> int:
        return self.description + N_SPECIALS

    @property
    def unit_rows(self) -> int:
        return self.unit + N_SPECIALS

    @property
    def value_rows(self) -> int:
        return self.value_tokens


@dataclass(frozen=True)
class TokenizedSequence:
    """One sequence as parallel id arrays (no [CLS] slot, no padding)."""

    ecu: np.ndarray
    base: np.ndarray
    fault: np.ndarray
    t: np.ndarray
    m: np.ndarray
    desc: np.ndarray
    value: np.ndarray
    unit: np.ndarray
    labels: frozenset[int] = field(default_factory=frozenset)

    @property
    def dtc_len(self) -> int:
        return len(self.base)

    @property
    def env_len(self) -> int:
        return len(self.desc)

    def with_masks(self, dtc_positions: np.ndarray, env_positions: np.ndarray) -> "TokenizedSequence":
        """Copy with [MASK] ids substituted at the given positions."""
        base = self.base.copy()
        base[dtc_positions] = MASK_ID
        desc = self.desc.copy()
        desc[env_positions] = MASK_ID
        value = self.value.copy()
        value[env_positions] = MASK_ID
        return replace(self, base=base, desc=desc, value=value)


def tokenize_pair(
    pair: ModalityPair,
    vocab: ValueVocab,
    sizes: VocabSizes,
    labels: frozenset[int] = frozenset(),
) -> TokenizedSequence:
    """Turn a split modality pair into id arrays.

    Numeric env values are binned through ``vocab``; text/boolean values map
    to the unknown-value token (the vocabulary only bins continuous values).
    """
    ecu = np.array([shift_id(e.ecu_id, sizes.ecu) for e in pair.dtc_seq], dtype=np.int64)
    base = np.array([shift_id(e.base_dtc, sizes.base) for e in pair.dtc_seq], dtype=np.int64)
    fault = np.array([e.fault_byte for e in pair.dtc_seq], dtype=np.int64)
    t = np.array([e.timestamp for e in pair.dtc_seq], dtype=np.float64)
    m = np.array([e.mileage for e in pair.dtc_seq], dtype=np.float64)
    desc = np.array([shift_id(x.description, sizes.description) for x in pair.env_seq], dtype=np.int64)
    unit = np.array([shift_id(x.unit, sizes.unit) for x in pair.env_seq], dtype=np.int64)
    value = np.array(
        [
            vocab.token(x.unit, float(x.value)) if isinstance(x.value, (int, float)) and not isinstance(x.value, bool) else UNK_ID
            for x in pair.env_seq
        ],
        dtype=np.int64,
    )
    return TokenizedSequence(ecu, base, fault, t, m, desc, unit=unit, value=value, labels=labels)


@dataclass(frozen=True)
class Batch:
    """Right-padded id arrays for a batch; masks flag real positions.

    Shapes: DTC-side arrays are (B, L_max), env-side (B, Le_max). The [CLS]
    slots are *not* materialized here; the embedding step prepends them.
    """

    ecu: np.ndarray
    base: np.ndarray
    fault: np.ndarray
    t: np.ndarray
    m: np.ndarray
    dtc_mask: np.ndarray
    desc: np.ndarray
    value: np.ndarray
    unit: np.ndarray
    env_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.ecu.shape[0]


def collate(sequences: list[TokenizedSequence]) -> Batch:
    b = len(sequences)
    lmax = max(1, max(s.dtc_len for s in sequences))
    emax = max(1, max(s.env_len for s in sequences))

    def pad_int(rows, width):
        out = np.full((b, width), PAD_ID, dtype=np.int64)
        for i, row in enumerate(rows):
            out[i, : len(row)] = row
        return out

    def pad_float(rows, width):
        out = np.zeros((b, width), dtype=np.float64)
        for i, row in enumerate(rows):
            out[i, : len(row)] = row
        return out

    dtc_mask = np.zeros((b, lmax), dtype=bool)
    env_mask = np.zeros((b, emax), dtype=bool)
    for i, s in enumerate(sequences):
        dtc_mask[i, : s.dtc_len] = True
        env_mask[i, : s.env_len] = True

    return Batch(
        ecu=pad_int([s.ecu for s in sequences], lmax),
        base=pad_int([s.base for s in sequences], lmax),
        fault=pad_int([s.fault for s in sequences], lmax),
        t=pad_float([s.t for s in sequences], lmax),
        m=pad_float([s.m for s in sequences], lmax),
        dtc_mask=dtc_mask,
        desc=pad_int([s.desc for s in sequences], emax),
        value=pad_int([s.value for s in sequences], emax),
        unit=pad_int([s.unit for s in sequences], emax),
        env_mask=env_mask,
    )
