"""Frozen-backbone multi-label classification head.

The multimodal head consumes the concatenated [CLS] states of both streams
(width 2d); the unimodal head consumes the single [CLS] (width d). Either
way: an input projection, two residual blocks with layer normalization,
and a final zero-initialized linear layer into per-label logits. Sigmoid
scores; trained with the stable binary cross-entropy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .encoder import MultimodalEncoder, UnimodalEncoder, cls_state
from .metrics import prf1
from .pretrain import AdamW, Linear, PretrainConfig
from .tokens import TokenizedSequence, collate


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    steps: int = 600
    batch_size: int = 64
    weight_decay: float = 0.01
    eval_every: int = 50
    patience: int = 6
    threshold: float = 0.8
    seed: int = 0

    @classmethod
    def from_json(cls, text: str) -> "FinetuneConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class ClassifierHead:
    """MLP over frozen backbone features: in_dim -> width -> K logits."""

    def __init__(self, in_dim: int, k_labels: int, width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.k_labels = k_labels
        self.width = width
        self.proj = Linear(in_dim, width, rng)
        self.block1 = Linear(width, width, rng)
        self.ln1_g = T.param(np.ones(width))
        self.ln1_b = T.param(np.zeros(width))
        self.block2 = Linear(width, width, rng)
        self.ln2_g = T.param(np.ones(width))
        self.ln2_b = T.param(np.zeros(width))
        self.out = Linear(width, k_labels, rng, zero=True)

    def parameters(self) -> dict[str, T.Tensor]:
        out = self.proj.parameters("clf.proj")
        out.update(self.block1.parameters("clf.block1"))
        out.update(self.block2.parameters("clf.block2"))
        out.update(self.out.parameters("clf.out"))
        out.update({"clf.ln1_g": self.ln1_g, "clf.ln1_b": self.ln1_b,
                    "clf.ln2_g": self.ln2_g, "clf.ln2_b": self.ln2_b})
        return out

    def logits(self, features: T.Tensor) -> T.Tensor:
        h = T.gelu(self.proj(features))
        h = T.layer_norm(h + T.gelu(self.block1(h)), self.ln1_g, self.ln1_b)
        h = T.layer_norm(h + T.gelu(self.block2(h)), self.ln2_g, self.ln2_b)
        return self.out(h)

    def scores(self, features: T.Tensor) -> np.ndarray:
        return T.sigmoid(self.logits(features)).data


def extract_features(
    backbone: MultimodalEncoder | UnimodalEncoder,
    sequences: list[TokenizedSequence],
    batch_size: int = 64,
) -> np.ndarray:
    """Frozen [CLS] features per sequence: (N, 2d) multimodal, (N, d) unimodal.

    Sequences are grouped by similar length before batching so padding stays
    cheap; row order follows the input list.
    """
    n = len(sequences)
    multimodal = isinstance(backbone, MultimodalEncoder)
    d = backbone.cfg.d
    feats = np.zeros((n, 2 * d if multimodal else d), dtype=np.float64)
    order = sorted(range(n), key=lambda i: (sequences[i].env_len, sequences[i].dtc_len))
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        batch = collate([sequences[i] for i in idx])
        if multimodal:
            h_d, h_e, _ = backbone.encode_batch(batch)
            feat = np.concatenate([cls_state(h_d).data, cls_state(h_e).data], axis=-1)
        else:
            h, _ = backbone.encode_batch(batch)
            feat = cls_state(h).data
        feats[idx] = feat
    return feats


def labels_matrix(sequences: list[TokenizedSequence], k: int) -> np.ndarray:
    y = np.zeros((len(sequences), k), dtype=np.float64)
    for i, s in enumerate(sequences):
        for label in s.labels:
            y[i, label] = 1.0
    return y


def classify(features: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """Sigmoid label scores for precomputed backbone features."""
    return head.scores(T.Tensor(features))


def finetune_head(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    k_labels: int,
    cfg: FinetuneConfig,
    width: int | None = None,
) -> ClassifierHead:
    """Train a head on frozen features; early stop on validation sample-F1."""
    in_dim = train_features.shape[1]
    head = ClassifierHead(in_dim, k_labels, width if width is not None else in_dim, seed=cfg.seed)
    params = head.parameters()
    opt_cfg = PretrainConfig(
        lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps,
        warmup_steps=0, batch_size=cfg.batch_size, seed=cfg.seed,
    )
    opt = AdamW(params, opt_cfg)
    rng = np.random.default_rng(cfg.seed)
    n = train_features.shape[0]

    best_f1 = -math.inf
    best = {k: p.data.copy() for k, p in params.items()}
    stalls = 0
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        x = T.Tensor(train_features[idx])
        y = train_labels[idx]
        opt.zero_grad()
        loss = T.bce_multilabel(head.logits(x), y)
        loss.backward()
        opt.step(cfg.lr)
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            val_scores = head.scores(T.Tensor(val_features))
            _, _, f1 = prf1(val_scores, val_labels, cfg.threshold, "sample")
            if f1 > best_f1 + 1e-12:
                best_f1 = f1
                for k, p in params.items():
                    best[k][:] = p.data
                stalls = 0
            else:
                stalls += 1
                if stalls >= cfg.patience:
                    break
    for k, p in params.items():
        p.data[:] = best[k]
    return head
