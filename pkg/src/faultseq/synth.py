"""Deterministic generator of vehicle-like multimodal event sequences.

Sequences carry planted, machine-checkable rules that tie labels to the
two modalities:

* ``dtc_pattern`` labels fire when a specific pair of base codes appears
  anywhere in the sequence (visible to a DTC-only model),
* ``env_threshold`` labels fire when enough values of one unit exceed a
  threshold in the final third of the env stream (invisible to a DTC-only
  model: the planting coin never touches the DTC side),
* ``joint`` labels require both conditions at once.

Labels are derived by replaying the rules against the finished sequence,
so accidental pattern occurrences are labeled consistently, and replay
from the emitted manifest reproduces the labels exactly at zero noise.
Base codes also leak into the env stream through per-code description
affinity pairs, which is what multimodal masked pretraining can exploit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .events import DtcEvent, EnvTriplet, LabeledSequence, RawSequence, dedup_env

BACKGROUND_VALUE_RANGE = (10.0, 100.0)
DRIFT_VALUE_RANGE = (150.0, 200.0)
DRIFT_THRESHOLD = 125.0  # background values never reach this
WINDOW_DAYS = 30.0
WINDOW_KM = 300.0


@dataclass(frozen=True)
class PlantedRule:
    label: int
    kind: str  # dtc_pattern | env_threshold | joint
    codes: tuple[int, ...] = ()
    unit: int | None = None
    threshold: float | None = None
    min_hits: int = 3
    noise_rate: float = 0.0

    @property
    def modality_required(self) -> str:
        return {"dtc_pattern": "dtc", "env_threshold": "env", "joint": "both"}[self.kind]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": {
                "codes": list(self.codes),
                "unit": self.unit,
                "threshold": self.threshold,
                "min_hits": self.min_hits,
            },
            "modality_required": self.modality_required,
            "noise_rate": self.noise_rate,
        }

    @classmethod
    def from_dict(cls, label: int, obj: dict) -> "PlantedRule":
        p = obj["params"]
        return cls(
            label=label, kind=obj["kind"], codes=tuple(p["codes"]),
            unit=p["unit"], threshold=p["threshold"], min_hits=p["min_hits"],
            noise_rate=obj.get("noise_rate", 0.0),
        )


@dataclass(frozen=True)
class GeneratorConfig:
    n_sequences: int = 2857
    n_ecu: int = 16
    n_base: int = 60
    n_description: int = 30
    n_units: int = 6
    n_dtc_rules: int = 8
    n_env_rules: int = 8
    n_joint_rules: int = 8
    mean_len: float = 40.0
    sd_len: float = 15.0
    min_len: int = 5
    mean_env_ratio: float = 15.0
    sd_env_ratio: float = 5.0
    min_env_ratio: float = 1.0
    rule_fire_prob: float = 0.3
    assoc_prob: float = 0.7  # P(env description comes from the code's affinity pair)
    noise_rate: float = 0.0
    simultaneous_prob: float = 0.1
    seed: int = 0
    train_frac: float = 0.70
    val_frac: float = 0.15

    def __post_init__(self):
        if min(self.n_ecu, self.n_base, self.n_description, self.n_units) < 2:
            raise ValueError("all vocabulary sizes must be >= 2")
        needed = 2 * (self.n_dtc_rules + self.n_joint_rules)
        if needed > self.n_base:
            raise ValueError(f"{needed} trigger codes needed but only {self.n_base} base codes")
        if self.n_env_rules + self.n_joint_rules > 0 and self.n_units < 1:
            raise ValueError("env rules need at least one unit")

    @property
    def k_labels(self) -> int:
        return self.n_dtc_rules + self.n_env_rules + self.n_joint_rules

    @classmethod
    def from_json(cls, text: str) -> "GeneratorConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**obj)


@dataclass
class CorpusBundle:
    train: list[LabeledSequence]
    val: list[LabeledSequence]
    test: list[LabeledSequence]
    rules: list[PlantedRule]
    config: GeneratorConfig

    def manifest(self) -> dict:
        return {
            "k_labels": self.config.k_labels,
            "labels": {str(r.label): r.to_dict() for r in self.rules},
            "config": asdict(self.config),
        }


def make_rules(cfg: GeneratorConfig, rng: np.random.Generator) -> list[PlantedRule]:
    """One rule per label; trigger code pairs are disjoint across rules."""
    pool = rng.permutation(cfg.n_base)
    rules: list[PlantedRule] = []
    label = 0
    cursor = 0
    for _ in range(cfg.n_dtc_rules):
        codes = (int(pool[cursor]), int(pool[cursor + 1]))
        cursor += 2
        rules.append(PlantedRule(label, "dtc_pattern", codes=codes, noise_rate=cfg.noise_rate))
        label += 1
    for i in range(cfg.n_env_rules):
        rules.append(
            PlantedRule(label, "env_threshold", unit=i % cfg.n_units,
                        threshold=DRIFT_THRESHOLD, noise_rate=cfg.noise_rate)
        )
        label += 1
    for i in range(cfg.n_joint_rules):
        codes = (int(pool[cursor]), int(pool[cursor + 1]))
        cursor += 2
        rules.append(
            PlantedRule(label, "joint", codes=codes, unit=(i + 1) % cfg.n_units,
                        threshold=DRIFT_THRESHOLD, noise_rate=cfg.noise_rate)
        )
        label += 1
    return rules


def _affinity_pairs(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Distinct (description, description) affinity pair per base code."""
    n_pairs = cfg.n_description * (cfg.n_description - 1)
    chosen = rng.choice(n_pairs, size=cfg.n_base, replace=n_pairs < cfg.n_base)
    pairs = np.empty((cfg.n_base, 2), dtype=np.int64)
    for i, c in enumerate(chosen):
        a, b = divmod(int(c), cfg.n_description - 1)
        if b >= a:
            b += 1
        pairs[i] = (a, b)
    return pairs


def unit_of_description(desc: int, cfg: GeneratorConfig) -> int:
    return desc % cfg.n_units


def _flatten_env(raw: RawSequence) -> list[EnvTriplet]:
    out: list[EnvTriplet] = []
    for _, local in raw.events:
        out.extend(local)
    return out


def rule_fires(rule: PlantedRule, raw: RawSequence) -> bool:
    """Replay one rule against a finished sequence."""
    if rule.kind in ("dtc_pattern", "joint"):
        present = {e.base_dtc for e, _ in raw.events}
        if not all(c in present for c in rule.codes):
            return False
        if rule.kind == "dtc_pattern":
            return True
    env = _flatten_env(raw)
    start = math.ceil(2 * len(env) / 3)
    hits = sum(
        1
        for t in env[start:]
        if t.unit == rule.unit
        and isinstance(t.value, (int, float))
        and t.value > rule.threshold
    )
    return hits >= rule.min_hits


def replay_labels(raw: RawSequence, rules: list[PlantedRule]) -> frozenset[int]:
    return frozenset(r.label for r in rules if rule_fires(r, raw))


def _sample_length(mean, sd, minimum, rng) -> float:
    return max(minimum, rng.normal(mean, sd))


def _timestamps_and_mileage(l: int, cfg: GeneratorConfig, rng: np.random.Generator):
    """Bursty arrivals: calm/burst alternation with occasional exact ties,
    rescaled to sit safely inside the 30-day / 300-km window."""
    dts = np.zeros(l)
    burst = False
    for i in range(1, l):
        if rng.random() < cfg.simultaneous_prob:
            dts[i] = 0.0
            continue
        if rng.random() < 0.2:
            burst = not burst
        dts[i] = rng.exponential(1800.0 if burst else 43200.0)
    t = np.cumsum(dts)
    horizon = 0.9 * WINDOW_DAYS * 86400.0
    if t[-1] > horizon:
        t *= horizon / t[-1]
    speed = rng.uniform(2.0, 25.0, size=l)  # km per day while moving
    dm = np.diff(t, prepend=0.0) / 86400.0 * speed
    m = np.cumsum(dm)
    cap = 0.9 * WINDOW_KM
    if m[-1] > cap:
        m *= cap / m[-1]
    return np.floor(t).astype(np.int64), np.floor(m).astype(np.int64)


def _background_code_dist(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    weights = 1.0 / (np.arange(cfg.n_base) + 2.0) ** 1.1
    rng.shuffle(weights)
    return weights / weights.sum()


def _unit_descriptions(cfg: GeneratorConfig) -> dict[int, np.ndarray]:
    return {
        u: np.array([d for d in range(cfg.n_description) if unit_of_description(d, cfg) == u])
        for u in range(cfg.n_units)
    }


def generate(cfg: GeneratorConfig) -> CorpusBundle:
    """Build the corpus; a fixed config yields a byte-identical corpus."""
    rng = np.random.default_rng(cfg.seed)
    rules = make_rules(cfg, rng)
    affinity = _affinity_pairs(cfg, rng)
    code_dist = _background_code_dist(cfg, rng)
    unit_descs = _unit_descriptions(cfg)

    sequences: list[LabeledSequence] = []
    for n in range(cfg.n_sequences):
        vid = f"veh{n:06d}"
        l = int(round(_sample_length(cfg.mean_len, cfg.sd_len, cfg.min_len, rng)))
        ratio = _sample_length(cfg.mean_env_ratio, cfg.sd_env_ratio, cfg.min_env_ratio, rng)
        t, m = _timestamps_and_mileage(l, cfg, rng)

        codes = rng.choice(cfg.n_base, size=l, p=code_dist)
        drift_requests: list[PlantedRule] = []
        for rule in rules:
            roll = rng.random()
            if rule.kind == "dtc_pattern":
                if roll < cfg.rule_fire_prob:
                    for c in rule.codes:
                        codes[rng.integers(0, l)] = c
            elif rule.kind == "env_threshold":
                if roll < cfg.rule_fire_prob:
                    drift_requests.append(rule)
            else:  # joint: plant both, one side, or neither
                p = cfg.rule_fire_prob
                if roll < 0.66 * p:
                    for c in rule.codes:
                        codes[rng.integers(0, l)] = c
                    drift_requests.append(rule)
                elif roll < 1.16 * p:
                    for c in rule.codes:
                        codes[rng.integers(0, l)] = c
                elif roll < 1.66 * p:
                    drift_requests.append(rule)

        ecu = np.where(
            rng.random(l) < 0.8, (codes * 7) % cfg.n_ecu, rng.integers(0, cfg.n_ecu, size=l)
        )
        fault = (rng.random(l) < 0.3).astype(np.int64)

        # env lists; simultaneous follow-up events report nothing (their
        # conditions would be dropped downstream anyway)
        fresh = np.ones(l, dtype=bool)
        fresh[1:] = t[1:] != t[:-1]
        env_lists: list[list[EnvTriplet]] = []
        flat_slots: list[tuple[int, int]] = []  # (event index, slot within event)
        lo, hi = BACKGROUND_VALUE_RANGE
        for i in range(l):
            count = int(rng.poisson(ratio)) if fresh[i] else 0
            local: list[EnvTriplet] = []
            for j in range(count):
                if rng.random() < cfg.assoc_prob:
                    desc = int(affinity[codes[i], rng.integers(0, 2)])
                else:
                    desc = int(rng.integers(0, cfg.n_description))
                value = float(np.round(rng.uniform(lo, hi), 3))
                local.append(EnvTriplet(desc, value, unit_of_description(desc, cfg)))
                flat_slots.append((i, j))
            env_lists.append(local)

        dlo, dhi = DRIFT_VALUE_RANGE
        total_env = len(flat_slots)
        late_start = math.ceil(2 * total_env / 3)
        for rule in drift_requests:
            late = flat_slots[late_start:]
            if not late:
                continue
            n_plant = min(len(late), rule.min_hits + int(rng.integers(1, 4)))
            picks = rng.choice(len(late), size=n_plant, replace=False)
            descs = unit_descs[rule.unit]
            for p in picks:
                ei, slot = late[p]
                desc = int(descs[rng.integers(0, len(descs))])
                value = float(np.round(rng.uniform(dlo, dhi), 3))
                env_lists[ei][slot] = EnvTriplet(desc, value, rule.unit)

        # rounded values can collide; emit each (d, v, c) at most once per
        # event so stored data already satisfies the dedup invariant
        events = tuple(
            (
                DtcEvent(int(ecu[i]), int(codes[i]), int(fault[i]), float(t[i]), float(m[i])),
                tuple(dedup_env(env_lists[i])),
            )
            for i in range(l)
        )
        raw = RawSequence(vid, events)
        labels = set(replay_labels(raw, rules))
        for rule in rules:
            if rule.noise_rate > 0.0 and rng.random() < rule.noise_rate:
                labels.symmetric_difference_update({rule.label})
        sequences.append(LabeledSequence(raw, frozenset(labels)))

    train, val, test = split_corpus(sequences, cfg.train_frac, cfg.val_frac)
    return CorpusBundle(train, val, test, rules, cfg)


def split_corpus(
    sequences: list[LabeledSequence], train_frac: float, val_frac: float
) -> tuple[list[LabeledSequence], list[LabeledSequence], list[LabeledSequence]]:
    """Stable partition keyed by a hash of the vehicle id.

    Sequences are ranked by digest, so the split depends only on the ids,
    not on list order, and the quota boundaries are exact.
    """
    def key(seq: LabeledSequence) -> str:
        return hashlib.sha256(seq.raw.vehicle_id.encode()).hexdigest()

    ranked = sorted(sequences, key=key)
    n = len(ranked)
    n_train = math.ceil(train_frac * n)
    n_val = math.ceil(val_frac * n)
    return ranked[:n_train], ranked[n_train : n_train + n_val], ranked[n_train + n_val :]
