"""End-to-end plumbing between corpus files and model-ready tensors.

The tokenizer artifact freezes everything fitted on the training split:
the retained unit set, per-unit value bins, categorical cardinalities, and
the windowing parameters. Validation/test sequences flow through the same
frozen artifact, so nothing leaks across splits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .events import (
    LabeledSequence,
    ModalityPair,
    read_jsonl,
    split_modalities,
    top_units,
    window_filter,
)
from .quantiles import ValueVocab, fit_bins
from .synth import PlantedRule, replay_labels
from .tokens import TokenizedSequence, VocabSizes, tokenize_pair

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TokenizerConfig:
    epsilon: float = 0.01
    theta: int = 128
    top_units: int = 18
    max_days: float = 30.0
    max_km: float = 300.0

    @classmethod
    def from_json(cls, text: str) -> "TokenizerConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TokenizerArtifact:
    retained_units: frozenset[int]
    vocab: ValueVocab
    sizes: VocabSizes
    max_days: float
    max_km: float

    def window(self, seq: LabeledSequence) -> LabeledSequence:
        return LabeledSequence(window_filter(seq.raw, self.max_days, self.max_km), seq.labels)

    def prepare_pair(self, seq: LabeledSequence) -> tuple[ModalityPair, TokenizedSequence]:
        windowed = self.window(seq)
        pair = split_modalities(windowed.raw, self.retained_units)
        return pair, tokenize_pair(pair, self.vocab, self.sizes, labels=windowed.labels)

    def prepare(self, seq: LabeledSequence) -> TokenizedSequence:
        return self.prepare_pair(seq)[1]

    def prepare_all(self, seqs: list[LabeledSequence]) -> list[TokenizedSequence]:
        return [self.prepare(s) for s in seqs]

    def to_json(self) -> str:
        return json.dumps(
            {
                "retained_units": sorted(self.retained_units),
                "value_vocab": json.loads(self.vocab.to_json()),
                "sizes": asdict(self.sizes),
                "max_days": self.max_days,
                "max_km": self.max_km,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TokenizerArtifact":
        obj = json.loads(text)
        return cls(
            retained_units=frozenset(obj["retained_units"]),
            vocab=ValueVocab.from_json(json.dumps(obj["value_vocab"])),
            sizes=VocabSizes(**obj["sizes"]),
            max_days=obj["max_days"],
            max_km=obj["max_km"],
        )


def fit_tokenizer(train: list[LabeledSequence], cfg: TokenizerConfig) -> TokenizerArtifact:
    """Fit units, bins, and cardinalities on the training split only."""
    windowed = [window_filter(s.raw, cfg.max_days, cfg.max_km) for s in train]
    retained = top_units(windowed, cfg.top_units)

    n_ecu = n_base = n_desc = 0
    max_unit = -1
    streams: dict[int, list[float]] = {u: [] for u in retained}
    for raw in windowed:
        pair = split_modalities(raw, retained)
        for e in pair.dtc_seq:
            n_ecu = max(n_ecu, e.ecu_id + 1)
            n_base = max(n_base, e.base_dtc + 1)
        for t in pair.env_seq:
            n_desc = max(n_desc, t.description + 1)
            max_unit = max(max_unit, t.unit)
            if isinstance(t.value, (int, float)) and not isinstance(t.value, bool):
                streams[t.unit].append(float(t.value))

    vocab = fit_bins(streams, cfg.epsilon, cfg.theta)
    sizes = VocabSizes(
        ecu=max(n_ecu, 1),
        base=max(n_base, 1),
        description=max(n_desc, 1),
        unit=max_unit + 1 if max_unit >= 0 else 1,
        value_tokens=vocab.num_tokens,
    )
    return TokenizerArtifact(
        retained_units=retained, vocab=vocab, sizes=sizes,
        max_days=cfg.max_days, max_km=cfg.max_km,
    )


# -- corpus directories ----------------------------------------------------------


def load_split(corpus_dir: Path, split: str) -> list[LabeledSequence]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing corpus split file {path}")
    with open(path) as fh:
        return list(read_jsonl(fh))


def load_rules(corpus_dir: Path) -> tuple[list[PlantedRule], int]:
    path = Path(corpus_dir) / "rules.json"
    if not path.exists():
        raise FileNotFoundError(f"missing rule manifest {path}")
    obj = json.loads(path.read_text())
    rules = [PlantedRule.from_dict(int(lbl), spec) for lbl, spec in obj["labels"].items()]
    rules.sort(key=lambda r: r.label)
    return rules, int(obj["k_labels"])


def oracle_scores(seqs: list[LabeledSequence], rules: list[PlantedRule], k: int) -> np.ndarray:
    """Perfect-knowledge predictor: replay the planted rules as scores."""
    scores = np.zeros((len(seqs), k))
    for i, s in enumerate(seqs):
        for label in replay_labels(s.raw, rules):
            scores[i, label] = 1.0
    return scores
