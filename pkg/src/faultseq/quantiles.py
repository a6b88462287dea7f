"""Streaming quantile sketches and equal-frequency value tokenization.

One Greenwald-Khanna sketch per measurement unit summarizes that unit's
value stream; bin edges are then read off at evenly spaced quantiles and
frozen into a :class:`ValueVocab` that maps any real value to a discrete
token id. Token ids are disjoint across units, with a small reserved range
for padding/mask/unknown.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Mapping

# Reserved ids shared by every token space in the pipeline.
PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
N_SPECIALS = 3


class GkSketch:
    """Greenwald-Khanna epsilon-approximate quantile summary.

    Keeps an ordered list of tuples ``(value, g, delta)`` where ``g`` is the
    minimum-rank increment from the previous tuple and ``delta`` the rank
    uncertainty. The invariant ``g + delta <= floor(2*eps*n)`` guarantees any
    quantile query answers within ``eps * n`` ranks of the truth. Worst-case
    summary size is O((1/eps) * log(eps * n)).

    Deterministic: the summary depends only on the insertion sequence.
    """

    __slots__ = ("epsilon", "count", "summary", "_keys", "_compress_period")

    def __init__(self, epsilon: float):
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
        self.epsilon = float(epsilon)
        self.count = 0
        self.summary: list[tuple[float, int, int]] = []
        self._keys: list[float] = []  # values only, kept in sync for bisect
        self._compress_period = max(1, int(1.0 / (2.0 * epsilon)))

    def insert(self, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"cannot insert non-finite value {value!r}")
        self.count += 1
        pos = bisect_right(self._keys, value)
        if pos == 0 or pos == len(self.summary) or not self.summary:
            delta = 0  # new extreme: keep min/max exact
        else:
            delta = max(0, math.floor(2.0 * self.epsilon * self.count) - 1)
        self.summary.insert(pos, (value, 1, delta))
        self._keys.insert(pos, value)
        if self.count % self._compress_period == 0:
            self._compress()

    def _compress(self) -> None:
        if len(self.summary) < 3:
            return
        threshold = math.floor(2.0 * self.epsilon * self.count)
        # Sweep right to left, merging tuple i into i+1 when the invariant
        # allows; the first and last tuples stay put so min/max stay exact.
        out = [self.summary[-1]]
        for i in range(len(self.summary) - 2, 0, -1):
            v, g, d = self.summary[i]
            v_next, g_next, d_next = out[-1]
            if self._band(d, threshold) <= self._band(d_next, threshold) and g + g_next + d_next <= threshold:
                out[-1] = (v_next, g + g_next, d_next)
            else:
                out.append((v, g, d))
        out.append(self.summary[0])
        out.reverse()
        self.summary = out
        self._keys = [t[0] for t in out]

    @staticmethod
    def _band(delta: int, p: int) -> int:
        """Band index of a tuple: higher for fresher (larger-delta) tuples."""
        if delta == p:
            return 0
        diff = p - delta
        return int(math.log2(diff)) + 1 if diff > 0 else 0

    def query(self, phi: float) -> float:
        """Value whose rank is within ``eps * n`` of ``ceil(phi * n)``."""
        if not 0.0 <= phi <= 1.0:
            raise ValueError(f"phi must be in [0, 1], got {phi}")
        if self.count == 0:
            raise ValueError("cannot query an empty sketch")
        if phi == 0.0:
            return self.summary[0][0]
        if phi == 1.0:
            return self.summary[-1][0]
        target = max(1, math.ceil(phi * self.count))
        slack = self.epsilon * self.count
        # Largest tuple whose max possible rank stays within target + slack.
        r_min = 0
        best = self.summary[0][0]
        for value, g, delta in self.summary:
            r_min += g
            if r_min + delta <= target + slack:
                best = value
            else:
                break
        return best

    def __len__(self) -> int:
        return len(self.summary)


def gk_insert(sketch: GkSketch, value: float) -> GkSketch:
    sketch.insert(value)
    return sketch


def gk_query(sketch: GkSketch, phi: float) -> float:
    return sketch.query(phi)


@dataclass
class ValueVocab:
    """Per-unit bin edges plus the global (unit, bin) -> token id layout.

    ``edges[unit]`` is strictly increasing; bin ``k`` covers the half-open
    interval [edges[k-1], edges[k]), with everything below the first edge in
    bin 0 and everything at or above the last edge in the top bin. Units are
    keyed by their categorical id.
    """

    max_bins: int
    edges: dict[int, list[float]] = field(default_factory=dict)
    base_token: dict[int, int] = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        """Total token-id space size, reserved specials included."""
        if not self.base_token:
            return N_SPECIALS
        last = max(self.base_token, key=lambda u: self.base_token[u])
        return self.base_token[last] + len(self.edges[last]) + 1

    def bins_for_unit(self, unit: int) -> int:
        return len(self.edges[unit]) + 1

    def token(self, unit: int, value: float) -> int:
        if unit not in self.base_token:
            return UNK_ID
        return self.base_token[unit] + bisect_right(self.edges[unit], float(value))

    def to_json(self) -> str:
        payload = {
            str(u): {"edges": self.edges[u], "base_token": self.base_token[u]}
            for u in sorted(self.edges)
        }
        return json.dumps({"max_bins": self.max_bins, "units": payload}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ValueVocab":
        obj = json.loads(text)
        vocab = cls(max_bins=int(obj["max_bins"]))
        for key, spec in obj["units"].items():
            unit = int(key)
            vocab.edges[unit] = [float(e) for e in spec["edges"]]
            vocab.base_token[unit] = int(spec["base_token"])
        return vocab


def fit_bins(
    streams: Mapping[int, Iterable[float]], epsilon: float, theta: int
) -> ValueVocab:
    """Equal-frequency bin edges per unit from GK sketches.

    Edges sit at quantiles k/theta for k = 1..theta-1; duplicate or
    non-separating edges collapse, so heavy-tailed or degenerate units end
    up with fewer than ``theta`` bins (a constant stream gets one). An empty
    stream also yields a single catch-all bin.
    """
    if theta < 1:
        raise ValueError(f"theta must be >= 1, got {theta}")
    vocab = ValueVocab(max_bins=theta)
    next_base = N_SPECIALS
    for unit in sorted(streams):
        sketch = GkSketch(epsilon)
        for v in streams[unit]:
            sketch.insert(v)
        edges: list[float] = []
        if sketch.count > 0:
            lo = sketch.summary[0][0]
            prev = -math.inf
            for k in range(1, theta):
                q = sketch.query(k / theta)
                # An edge at or below the minimum would only create an empty
                # bottom bin; collapse it along with exact duplicates.
                if q > prev and q > lo:
                    edges.append(q)
                    prev = q
        vocab.edges[unit] = edges
        vocab.base_token[unit] = next_base
        next_base += len(edges) + 1
    return vocab


def value_to_token(vocab: ValueVocab, unit: int, value: float) -> int:
    return vocab.token(unit, value)


def summary_size_bound(epsilon: float, n: int) -> float:
    """The O((1/eps) * log(eps * n)) envelope, constant factor 1."""
    return (1.0 / epsilon) * max(1.0, math.log(max(epsilon * n, math.e)))
