"""Finite-difference verification suite.

Runs central-difference gradient checks on every differentiable operation
and on the complete two-layer co-attention model at toy dimensions
(d=8, heads=2, L=6, Le=20). Elementwise operations are held to 1e-6
relative error, composite attention paths to 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .pretrain import MultimodalPretrainModel, PretrainConfig, UnimodalPretrainModel, make_mask_plan
from .tokens import TokenizedSequence, VocabSizes, collate

TIGHT = 1e-6
LOOSE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _elementwise_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []

    def check(name, f, params, tol):
        out.append(CheckResult(name, T.grad_check(f, params), tol))

    a = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    check("matmul", lambda: ((a @ b) * w).sum(), [a, b], TIGHT)

    x = T.Tensor(rng.normal(size=(3, 7)), requires_grad=True)
    wx = rng.normal(size=(3, 7))
    check("softmax_rows", lambda: (T.softmax_rows(x) * wx).sum(), [x], TIGHT)
    check("entmax15_rows", lambda: (T.entmax15_rows(x) * wx).sum(), [x], LOOSE)
    check("gelu", lambda: (T.gelu(x) * wx).sum(), [x], TIGHT)
    check("sigmoid", lambda: (T.sigmoid(x) * wx).sum(), [x], TIGHT)
    check("add_mul", lambda: ((x + x) * x).sum(), [x], TIGHT)

    g = T.Tensor(rng.normal(size=7) + 1.0, requires_grad=True)
    bias = T.Tensor(rng.normal(size=7), requires_grad=True)
    check("rms_norm", lambda: (T.rms_norm(x, g) * wx).sum(), [x, g], TIGHT)
    check("layer_norm", lambda: (T.layer_norm(x, g, bias) * wx).sum(), [x, g, bias], TIGHT)

    r = T.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    ang = rng.uniform(0, 2 * np.pi, size=(3, 3))
    wr = rng.normal(size=(3, 6))
    check("rotate_pairs", lambda: (T.rotate_pairs(r, np.cos(ang), np.sin(ang)) * wr).sum(), [r], TIGHT)

    table = T.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    ids = np.array([0, 2, 2, 5, 1])
    wt = rng.normal(size=(5, 4))
    check("embedding_gather", lambda: (T.embedding(table, ids) * wt).sum(), [table], TIGHT)

    c1 = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    c2 = T.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    wc = rng.normal(size=(2, 7))
    check("concat", lambda: (T.concat([c1, c2], axis=-1) * wc).sum(), [c1, c2], TIGHT)
    check("slice_axis", lambda: (T.slice_axis(c2, 1, 1, 3) * wc[:, :2]).sum(), [c2], TIGHT)

    z = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = rng.integers(0, 6, size=4)
    mask = np.array([True, False, True, True])
    check("cross_entropy_masked", lambda: T.cross_entropy_masked(z, targets, mask), [z], TIGHT)
    labels = (rng.random(size=(4, 6)) < 0.5).astype(float)
    check("bce_multilabel", lambda: T.bce_multilabel(z, labels), [z], TIGHT)
    return out


def _model_sequences(rng: np.random.Generator, sizes: VocabSizes, l: int, le: int):
    return TokenizedSequence(
        ecu=rng.integers(3, sizes.ecu_rows, size=l),
        base=rng.integers(3, sizes.base_rows, size=l),
        fault=rng.integers(0, 2, size=l),
        t=np.sort(rng.uniform(0, 1e4, size=l)),
        m=np.sort(rng.uniform(0, 50, size=l)),
        desc=rng.integers(3, sizes.description_rows, size=le),
        value=rng.integers(3, sizes.value_rows, size=le),
        unit=rng.integers(3, sizes.unit_rows, size=le),
    )


def _full_model_check(rng: np.random.Generator) -> CheckResult:
    sizes = VocabSizes(ecu=5, base=9, description=6, unit=4, value_tokens=16)
    enc = EncoderConfig(d=8, heads=2, layers=2, ffn_mult=2)
    model = MultimodalPretrainModel(sizes, enc, seed=3)
    cfg = PretrainConfig(mask_rate=0.4)
    seq = _model_sequences(rng, sizes, l=6, le=20)
    plan = make_mask_plan(seq, cfg, rng)
    batch = collate([seq.with_masks(plan.dtc_positions, plan.env_positions)])

    def loss():
        return model.loss(batch, [plan], cfg)[0]

    err = T.grad_check(loss, model.parameters().values())
    return CheckResult("coattention_model_2layer", err, LOOSE)


def _unimodal_model_check(rng: np.random.Generator) -> CheckResult:
    sizes = VocabSizes(ecu=5, base=9, description=6, unit=4, value_tokens=16)
    enc = EncoderConfig(d=8, heads=2, layers=2, ffn_mult=2)
    model = UnimodalPretrainModel(sizes, enc, seed=4)
    cfg = PretrainConfig(mask_rate=0.4)
    seq = _model_sequences(rng, sizes, l=6, le=1)
    plan = make_mask_plan(seq, cfg, rng)
    batch = collate([seq.with_masks(plan.dtc_positions, plan.env_positions)])

    def loss():
        return model.loss(batch, [plan], cfg)[0]

    err = T.grad_check(
        loss, model.parameters().values(), max_coords=12, rng=np.random.default_rng(5)
    )
    return CheckResult("baseline_model_2layer", err, LOOSE)


def run_grad_check_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = _elementwise_checks(rng)
    results.append(_full_model_check(rng))
    results.append(_unimodal_model_check(rng))
    return results
