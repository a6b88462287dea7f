"""Domain types and preprocessing for the two vehicle event modalities.

A raw sequence interleaves diagnostic trouble code (DTC) events with the
local environmental-condition triplets reported alongside each of them.
Preprocessing windows the sequence against its last event, removes
null/duplicate environmental triplets, keeps only the retained measurement
units, and splits the result into one DTC stream and one flattened
environmental stream.

All functions here are pure: they never mutate their inputs, so sequences
can be processed in parallel.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, TextIO

ABSENT = None  # raw_value / unit / description may be missing before cleanup


@dataclass(frozen=True)
class DtcEvent:
    """One diagnostic trouble code: ECU id, base code, fault byte, at a
    timestamp (seconds) and mileage (kilometers)."""

    ecu_id: int
    base_dtc: int
    fault_byte: int
    timestamp: float
    mileage: float

    def __post_init__(self):
        if not (self.timestamp >= 0 and self.timestamp == self.timestamp):
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")
        if not (self.mileage >= 0 and self.mileage == self.mileage):
            raise ValueError(f"mileage must be finite and >= 0, got {self.mileage}")
        if self.fault_byte not in (0, 1):
            raise ValueError(f"fault_byte must be 0 or 1, got {self.fault_byte}")


@dataclass(frozen=True)
class EnvTriplet:
    """One environmental condition: (description id, value, unit id).

    ``value`` may be a number, string, boolean, or None before cleanup;
    after preprocessing it is never None.
    """

    description: int | None
    value: object
    unit: int | None

    def is_complete(self) -> bool:
        return self.description is not None and self.unit is not None and self.value is not None


@dataclass(frozen=True)
class RawSequence:
    """All events of one vehicle, each with its local environmental list,
    sorted by (timestamp, mileage) non-decreasing. Simultaneous events are
    allowed and keep their input order."""

    vehicle_id: str
    events: tuple[tuple[DtcEvent, tuple[EnvTriplet, ...]], ...]

    def __post_init__(self):
        keys = [(e.timestamp, e.mileage) for e, _ in self.events]
        if any(a > b for a, b in zip(keys, keys[1:])):
            raise ValueError("events must be sorted by (timestamp, mileage)")


@dataclass(frozen=True)
class ModalityPair:
    """The two split streams: DTC events and flattened env triplets."""

    dtc_seq: tuple[DtcEvent, ...]
    env_seq: tuple[EnvTriplet, ...]


def window_filter(raw: RawSequence, max_days: float, max_km: float) -> RawSequence:
    """Keep events close to the last one: strictly under ``max_days`` back in
    time and at most ``max_km`` back in mileage. Empty input passes through."""
    if not raw.events:
        return raw
    last_event = raw.events[-1][0]
    horizon_s = max_days * 86400.0
    kept = tuple(
        (e, env)
        for e, env in raw.events
        if (last_event.timestamp - e.timestamp) < horizon_s
        and (last_event.mileage - e.mileage) <= max_km
    )
    return RawSequence(raw.vehicle_id, kept)


def dedup_env(local: Sequence[EnvTriplet]) -> list[EnvTriplet]:
    """Drop incomplete triplets and exact (d, v, c) repeats within one local
    list, keeping first occurrences in order."""
    seen: set[tuple] = set()
    out: list[EnvTriplet] = []
    for t in local:
        if not t.is_complete():
            continue
        key = (t.description, t.value, t.unit)
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
    return out


def split_modalities(raw: RawSequence, retained_units: frozenset[int]) -> ModalityPair:
    """Split a windowed sequence into its DTC stream and env stream.

    Every event contributes to the DTC stream. Env triplets are deduplicated
    per event and filtered to ``retained_units``; when several events share
    one timestamp, only the first of them contributes env triplets.
    """
    dtc_seq: list[DtcEvent] = []
    env_seq: list[EnvTriplet] = []
    prev_timestamp: float | None = None
    for event, local in raw.events:
        dtc_seq.append(event)
        simultaneous = prev_timestamp is not None and event.timestamp == prev_timestamp
        prev_timestamp = event.timestamp
        if simultaneous:
            continue
        for t in dedup_env(local):
            if t.unit in retained_units:
                env_seq.append(t)
    return ModalityPair(tuple(dtc_seq), tuple(env_seq))


def top_units(sequences: Iterable[RawSequence], k: int) -> frozenset[int]:
    """The k most frequent complete-triplet units, counted over raw events.

    Intended to run on the training split only; the resulting set is frozen
    and reused for validation/test. Ties break toward the smaller unit id.
    """
    counts: Counter[int] = Counter()
    for raw in sequences:
        for _, local in raw.events:
            for t in local:
                if t.is_complete():
                    counts[t.unit] += 1
    ranked = sorted(counts.items(), key=lambda uc: (-uc[1], uc[0]))
    return frozenset(u for u, _ in ranked[:k])


# -- corpus serialization (one JSON object per line) -----------------------------


@dataclass(frozen=True)
class LabeledSequence:
    """A raw sequence plus its multi-label error-pattern target set."""

    raw: RawSequence
    labels: frozenset[int] = field(default_factory=frozenset)


def sequence_to_record(seq: LabeledSequence) -> dict:
    return {
        "vehicle_id": seq.raw.vehicle_id,
        "events": [
            {
                "ecu": e.ecu_id,
                "base": e.base_dtc,
                "fb": e.fault_byte,
                "t": int(e.timestamp),
                "m": int(e.mileage),
                "env": [[t.description, t.value, t.unit] for t in env],
            }
            for e, env in seq.raw.events
        ],
        "labels": sorted(seq.labels),
    }


def record_to_sequence(rec: dict) -> LabeledSequence:
    events = []
    for ev in rec["events"]:
        event = DtcEvent(
            ecu_id=int(ev["ecu"]),
            base_dtc=int(ev["base"]),
            fault_byte=int(ev["fb"]),
            timestamp=float(ev["t"]),
            mileage=float(ev["m"]),
        )
        env = tuple(EnvTriplet(d, v, c) for d, v, c in ev.get("env", []))
        events.append((event, env))
    return LabeledSequence(
        RawSequence(rec["vehicle_id"], tuple(events)),
        frozenset(int(x) for x in rec.get("labels", [])),
    )


def write_jsonl(sequences: Iterable[LabeledSequence], fh: TextIO) -> None:
    for seq in sequences:
        fh.write(json.dumps(sequence_to_record(seq), sort_keys=True))
        fh.write("\n")


def read_jsonl(fh: TextIO) -> Iterator[LabeledSequence]:
    for line in fh:
        line = line.strip()
        if line:
            yield record_to_sequence(json.loads(line))
