"""Masked-reconstruction pretraining for both model variants.

The multimodal objective masks the base code of randomly chosen DTC events
and the (description, value) duet of randomly chosen env triplets (units
stay visible), then reconstructs all three through per-stream heads. The
three cross-entropies are combined with static weights. The unimodal
ablation trains the baseline encoder on the DTC term alone.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, MultimodalEncoder, UnimodalEncoder
from .tokens import MASK_ID, Batch, TokenizedSequence, VocabSizes, collate


@dataclass(frozen=True)
class PretrainConfig:
    mask_rate: float = 0.15
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip_threshold: float = 5.0
    batch_size: int = 16
    seed: int = 0
    mask_replace_mix: bool = False  # BERT-style 80/10/10 replacement mixture

    def __post_init__(self):
        if not math.isclose(self.alpha + self.beta + self.gamma, 1.0, abs_tol=1e-9):
            raise ValueError("loss weights alpha + beta + gamma must sum to 1")
        for name in ("mask_rate", "lr", "clip_threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.total_steps < 0 or self.warmup_steps < 0 or self.batch_size < 1:
            raise ValueError("step counts must be non-negative and batch_size >= 1")

    @classmethod
    def paper_preset(cls, **overrides) -> "PretrainConfig":
        """The published training protocol: lr 1e-4, 2000 warmup, batch 32."""
        base = dict(lr=1e-4, warmup_steps=2000, total_steps=20000, batch_size=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_json(cls, text: str) -> "PretrainConfig":
        obj = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class MaskPlan:
    """Masked positions and their original target ids for one sequence."""

    dtc_positions: np.ndarray
    dtc_targets: np.ndarray
    env_positions: np.ndarray
    env_desc_targets: np.ndarray
    env_value_targets: np.ndarray


def make_mask_plan(seq: TokenizedSequence, cfg: PretrainConfig, rng: np.random.Generator) -> MaskPlan:
    """Bernoulli(mask_rate) selection per DTC event and per env triplet.

    A selected event loses only its base code; a selected triplet loses both
    description and value. ECU ids, fault bytes, units, and positions are
    never touched, and [CLS]/padding do not exist yet at this stage.
    """
    dtc_pick = rng.random(seq.dtc_len) < cfg.mask_rate
    env_pick = rng.random(seq.env_len) < cfg.mask_rate
    dtc_positions = np.nonzero(dtc_pick)[0]
    env_positions = np.nonzero(env_pick)[0]
    return MaskPlan(
        dtc_positions=dtc_positions,
        dtc_targets=seq.base[dtc_positions].copy(),
        env_positions=env_positions,
        env_desc_targets=seq.desc[env_positions].copy(),
        env_value_targets=seq.value[env_positions].copy(),
    )


def apply_mask_plan(
    seq: TokenizedSequence,
    plan: MaskPlan,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    sizes: VocabSizes,
) -> TokenizedSequence:
    """Substitute [MASK] ids at planned positions.

    With ``mask_replace_mix`` on, each selected position instead gets [MASK]
    with p=0.8, a random in-vocabulary id with p=0.1, and its original id
    with p=0.1 (the env duet shares one draw per triplet).
    """
    if not cfg.mask_replace_mix:
        return seq.with_masks(plan.dtc_positions, plan.env_positions)

    base = seq.base.copy()
    desc = seq.desc.copy()
    value = seq.value.copy()
    for pos in plan.dtc_positions:
        u = rng.random()
        if u < 0.8:
            base[pos] = MASK_ID
        elif u < 0.9:
            base[pos] = rng.integers(3, sizes.base_rows)
    for pos in plan.env_positions:
        u = rng.random()
        if u < 0.8:
            desc[pos] = MASK_ID
            value[pos] = MASK_ID
        elif u < 0.9:
            desc[pos] = rng.integers(3, sizes.description_rows)
            value[pos] = rng.integers(3, sizes.value_rows)
    return replace(seq, base=base, desc=desc, value=value)


def _batch_targets(plans: list[MaskPlan], width: int, attr_pos: str, attr_tgt: str):
    """Per-batch target/mask arrays, shifted +1 for the [CLS] slot."""
    b = len(plans)
    targets = np.zeros((b, width), dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    for i, plan in enumerate(plans):
        pos = getattr(plan, attr_pos) + 1
        targets[i, pos] = getattr(plan, attr_tgt)
        mask[i, pos] = True
    return targets, mask


def joint_loss(
    base_logits: T.Tensor,
    value_logits: T.Tensor | None,
    desc_logits: T.Tensor | None,
    plans: list[MaskPlan],
    cfg: PretrainConfig,
) -> tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]:
    """total = alpha * L_dtc + beta * L_value + gamma * L_description.

    Each term is the mean cross-entropy over its own stream's masked
    positions (pooled across the batch); a stream with nothing masked
    contributes a constant zero.
    """
    bt, bm = _batch_targets(plans, base_logits.shape[-2], "dtc_positions", "dtc_targets")
    l_dtc = T.cross_entropy_masked(base_logits, bt, bm)
    if value_logits is not None:
        vt, vm = _batch_targets(plans, value_logits.shape[-2], "env_positions", "env_value_targets")
        l_value = T.cross_entropy_masked(value_logits, vt, vm)
        dt, dm = _batch_targets(plans, desc_logits.shape[-2], "env_positions", "env_desc_targets")
        l_desc = T.cross_entropy_masked(desc_logits, dt, dm)
    else:
        l_value = T.Tensor(0.0)
        l_desc = T.Tensor(0.0)
    total = T.scale(l_dtc, cfg.alpha) + T.scale(l_value, cfg.beta) + T.scale(l_desc, cfg.gamma)
    return total, l_dtc, l_value, l_desc


# -- optimizer ---------------------------------------------------------------------


def lr_schedule(step: int, cfg: PretrainConfig) -> float:
    """Linear ramp to ``lr`` over the warmup, cosine decay to 0 at the end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Global 2-norm clipping in place; returns the pre-clip norm."""
    if threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if math.isfinite(norm) and norm > threshold:
        factor = threshold / norm
        for g in grads.values():
            g *= factor
    return norm


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Parameters whose ``grad`` is None on a step are left untouched (their
    moments do not advance either), so lookup tables outside the active
    graph never drift.
    """

    def __init__(self, params: dict[str, T.Tensor], cfg: PretrainConfig):
        self.params = dict(sorted(params.items()))
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.adam_beta1**t
        bc2 = 1.0 - cfg.adam_beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def optimizer_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


# -- pretraining models -------------------------------------------------------------


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        self.w = T.param(np.zeros((d_in, d_out))) if zero else T.param((d_in, d_out), rng, d_in**-0.5)
        self.b = T.param(np.zeros(d_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return x @ self.w + self.b

    def parameters(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MultimodalPretrainModel:
    """Co-attention encoder plus the three reconstruction heads."""

    def __init__(self, sizes: VocabSizes, cfg: EncoderConfig, seed: int = 0, env_fusion: str = "concat"):
        self.sizes = sizes
        self.encoder = MultimodalEncoder(sizes, cfg, seed=seed, env_fusion=env_fusion)
        rng = np.random.default_rng(seed + 1)
        self.base_head = Linear(cfg.d, sizes.base_rows, rng)
        self.value_head = Linear(cfg.d, sizes.value_rows, rng)
        self.desc_head = Linear(cfg.d, sizes.description_rows, rng)

    def parameters(self) -> dict[str, T.Tensor]:
        out = self.encoder.parameters()
        out.update(self.base_head.parameters("head.base"))
        out.update(self.value_head.parameters("head.value"))
        out.update(self.desc_head.parameters("head.desc"))
        return out

    def loss(self, batch: Batch, plans: list[MaskPlan], cfg: PretrainConfig):
        h_d, h_e, _ = self.encoder.encode_batch(batch)
        return joint_loss(self.base_head(h_d), self.value_head(h_e), self.desc_head(h_e), plans, cfg)


class UnimodalPretrainModel:
    """Baseline self-attention encoder with only the base-code head."""

    def __init__(self, sizes: VocabSizes, cfg: EncoderConfig, seed: int = 0):
        self.sizes = sizes
        self.encoder = UnimodalEncoder(sizes, cfg, seed=seed)
        rng = np.random.default_rng(seed + 1)
        self.base_head = Linear(cfg.d, sizes.base_rows, rng)

    def parameters(self) -> dict[str, T.Tensor]:
        out = self.encoder.parameters()
        out.update(self.base_head.parameters("head.base"))
        return out

    def loss(self, batch: Batch, plans: list[MaskPlan], cfg: PretrainConfig):
        h, _ = self.encoder.encode_batch(batch)
        return joint_loss(self.base_head(h), None, None, plans, cfg)


LOG_COLUMNS = ["step", "l_total", "l_dtc", "l_value", "l_desc", "lr", "grad_norm"]


@dataclass
class PretrainResult:
    rows: list[dict] = field(default_factory=list)
    aborted: bool = False

    @property
    def final_l_dtc(self) -> float:
        return self.rows[-1]["l_dtc"] if self.rows else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)


def pretrain(
    sequences: list[TokenizedSequence],
    model: MultimodalPretrainModel | UnimodalPretrainModel,
    cfg: PretrainConfig,
    snapshot_every: int = 50,
    progress: bool = False,
) -> PretrainResult:
    """Run the masked-reconstruction loop.

    Batches cycle through seeded permutations of the corpus; one RNG drives
    shuffling, mask plans, and replacement draws in a fixed order, so a run
    is bit-reproducible from (seed, corpus, config). On a non-finite loss
    the last snapshot of the parameters is restored and the run aborts; a
    non-finite gradient only skips that step.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg)
    result = PretrainResult()
    snapshot = {k: p.data.copy() for k, p in params.items()}

    order = rng.permutation(len(sequences))
    cursor = 0
    for step in range(cfg.total_steps):
        idx = []
        for _ in range(min(cfg.batch_size, len(sequences))):
            if cursor >= len(order):
                order = rng.permutation(len(sequences))
                cursor = 0
            idx.append(order[cursor])
            cursor += 1
        chosen = [sequences[i] for i in idx]
        plans = [make_mask_plan(s, cfg, rng) for s in chosen]
        masked = [
            apply_mask_plan(s, p, cfg, rng, model.sizes) for s, p in zip(chosen, plans)
        ]
        batch = collate(masked)

        opt.zero_grad()
        total, l_dtc, l_value, l_desc = model.loss(batch, plans, cfg)
        if not math.isfinite(total.item()):
            for k, p in params.items():
                p.data[:] = snapshot[k]
            result.aborted = True
            break
        total.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = clip_gradients(grads, cfg.clip_threshold)
        lr = lr_schedule(step, cfg)
        if math.isfinite(norm):
            opt.step(lr)
        result.rows.append(
            {
                "step": step,
                "l_total": total.item(),
                "l_dtc": l_dtc.item(),
                "l_value": l_value.item(),
                "l_desc": l_desc.item(),
                "lr": lr,
                "grad_norm": norm,
            }
        )
        if (step + 1) % snapshot_every == 0:
            for k, p in params.items():
                snapshot[k][:] = p.data
        if progress and (step % 100 == 0 or step == cfg.total_steps - 1):
            print(
                f"step {step}: total {total.item():.4f} dtc {l_dtc.item():.4f} "
                f"value {l_value.item():.4f} desc {l_desc.item():.4f}"
            )
    return result
