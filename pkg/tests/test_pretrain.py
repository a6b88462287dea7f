import math

import numpy as np
import pytest

from faultseq import tensor as T
from faultseq.encoder import EncoderConfig
from faultseq.pretrain import (
    AdamW,
    MaskPlan,
    MultimodalPretrainModel,
    PretrainConfig,
    UnimodalPretrainModel,
    clip_gradients,
    joint_loss,
    lr_schedule,
    make_mask_plan,
    pretrain,
)
from faultseq.tokens import MASK_ID, TokenizedSequence, VocabSizes

SIZES = VocabSizes(ecu=4, base=6, description=5, unit=3, value_tokens=12)


def random_sequence(rng, l=6, le=12, labels=frozenset()):
    return TokenizedSequence(
        ecu=rng.integers(3, SIZES.ecu_rows, size=l),
        base=rng.integers(3, SIZES.base_rows, size=l),
        fault=rng.integers(0, 2, size=l),
        t=np.sort(rng.uniform(0, 1e4, size=l)),
        m=np.sort(rng.uniform(0, 50, size=l)),
        desc=rng.integers(3, SIZES.description_rows, size=le),
        value=rng.integers(3, SIZES.value_rows, size=le),
        unit=rng.integers(3, SIZES.unit_rows, size=le),
        labels=labels,
    )


class TestConfig:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            PretrainConfig(alpha=0.5, beta=0.5, gamma=0.5)

    def test_unknown_json_field_rejected(self):
        with pytest.raises(ValueError, match="warmup"):
            PretrainConfig.from_json('{"warmup": 10}')

    def test_json_roundtrip(self):
        cfg = PretrainConfig(lr=0.01, total_steps=5)
        again = PretrainConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_paper_preset(self):
        cfg = PretrainConfig.paper_preset()
        assert cfg.lr == 1e-4 and cfg.warmup_steps == 2000 and cfg.batch_size == 32


class TestMaskPlan:
    def test_rate_zero_empty_plan(self):
        rng = np.random.default_rng(0)
        seq = random_sequence(rng)
        plan = make_mask_plan(seq, PretrainConfig(mask_rate=0.0), rng)
        assert plan.dtc_positions.size == 0 and plan.env_positions.size == 0

    def test_rate_one_masks_everything(self):
        rng = np.random.default_rng(1)
        seq = random_sequence(rng)
        plan = make_mask_plan(seq, PretrainConfig(mask_rate=1.0), rng)
        assert plan.dtc_positions.size == seq.dtc_len
        assert plan.env_positions.size == seq.env_len

    def test_empirical_rate_matches(self):
        rng = np.random.default_rng(2)
        seq = random_sequence(rng, l=10_000, le=10_000)
        plan = make_mask_plan(seq, PretrainConfig(mask_rate=0.15), rng)
        assert 0.14 <= plan.dtc_positions.size / 10_000 <= 0.16
        assert 0.14 <= plan.env_positions.size / 10_000 <= 0.16

    def test_masking_leaves_ecu_fault_unit_untouched(self):
        rng = np.random.default_rng(3)
        seq = random_sequence(rng)
        plan = make_mask_plan(seq, PretrainConfig(mask_rate=1.0), rng)
        masked = seq.with_masks(plan.dtc_positions, plan.env_positions)
        np.testing.assert_array_equal(masked.ecu, seq.ecu)
        np.testing.assert_array_equal(masked.fault, seq.fault)
        np.testing.assert_array_equal(masked.unit, seq.unit)
        np.testing.assert_array_equal(masked.t, seq.t)
        assert np.all(masked.base == MASK_ID)
        assert np.all(masked.desc == MASK_ID)
        assert np.all(masked.value == MASK_ID)

    def test_targets_record_original_ids(self):
        rng = np.random.default_rng(4)
        seq = random_sequence(rng)
        plan = make_mask_plan(seq, PretrainConfig(mask_rate=0.5), rng)
        np.testing.assert_array_equal(plan.dtc_targets, seq.base[plan.dtc_positions])
        np.testing.assert_array_equal(plan.env_desc_targets, seq.desc[plan.env_positions])


class TestJointLoss:
    def make_plan(self, l, le):
        return MaskPlan(
            dtc_positions=np.array([0, 2]),
            dtc_targets=np.array([3, 4]),
            env_positions=np.array([1]),
            env_desc_targets=np.array([3]),
            env_value_targets=np.array([5]),
        )

    def test_uniform_heads_closed_form(self):
        v1, v2, v3 = 7, 11, 5
        plan = self.make_plan(4, 6)
        base = T.Tensor(np.zeros((1, 5, v1)))
        value = T.Tensor(np.zeros((1, 7, v2)))
        desc = T.Tensor(np.zeros((1, 7, v3)))
        cfg = PretrainConfig()
        total, l_dtc, l_value, l_desc = joint_loss(base, value, desc, [plan], cfg)
        np.testing.assert_allclose(l_dtc.item(), math.log(v1))
        np.testing.assert_allclose(l_value.item(), math.log(v2))
        np.testing.assert_allclose(l_desc.item(), math.log(v3))
        expected = 0.5 * math.log(v1) + 0.3 * math.log(v2) + 0.2 * math.log(v3)
        np.testing.assert_allclose(total.item(), expected)

    def test_zero_env_weights_recover_dtc_term(self):
        plan = self.make_plan(4, 6)
        rng = np.random.default_rng(5)
        base = T.Tensor(rng.normal(size=(1, 5, 7)))
        value = T.Tensor(rng.normal(size=(1, 7, 11)))
        desc = T.Tensor(rng.normal(size=(1, 7, 5)))
        cfg = PretrainConfig(alpha=1.0, beta=0.0, gamma=0.0)
        total, l_dtc, _, _ = joint_loss(base, value, desc, [plan], cfg)
        np.testing.assert_allclose(total.item(), l_dtc.item())

    def test_matches_componentwise_oracle(self):
        rng = np.random.default_rng(6)
        plan = self.make_plan(4, 6)
        base = rng.normal(size=(1, 5, 7))
        value = rng.normal(size=(1, 7, 11))
        desc = rng.normal(size=(1, 7, 5))
        cfg = PretrainConfig()
        total, *_ = joint_loss(T.Tensor(base), T.Tensor(value), T.Tensor(desc), [plan], cfg)

        def ce(logits, positions, targets):
            acc = []
            for pos, tgt in zip(positions, targets):
                z = logits[0, pos + 1]
                p = np.exp(z - z.max())
                p /= p.sum()
                acc.append(-np.log(p[tgt]))
            return np.mean(acc)

        oracle = (
            0.5 * ce(base, plan.dtc_positions, plan.dtc_targets)
            + 0.3 * ce(value, plan.env_positions, plan.env_value_targets)
            + 0.2 * ce(desc, plan.env_positions, plan.env_desc_targets)
        )
        np.testing.assert_allclose(total.item(), oracle, atol=1e-10)

    def test_empty_stream_contributes_zero(self):
        plan = MaskPlan(
            dtc_positions=np.array([1]),
            dtc_targets=np.array([3]),
            env_positions=np.array([], dtype=np.int64),
            env_desc_targets=np.array([], dtype=np.int64),
            env_value_targets=np.array([], dtype=np.int64),
        )
        base = T.Tensor(np.zeros((1, 3, 4)))
        value = T.Tensor(np.zeros((1, 2, 4)))
        desc = T.Tensor(np.zeros((1, 2, 4)))
        total, _, l_value, l_desc = joint_loss(base, value, desc, [plan], PretrainConfig())
        assert l_value.item() == 0.0 and l_desc.item() == 0.0
        np.testing.assert_allclose(total.item(), 0.5 * math.log(4))

    def test_linear_in_weights(self):
        rng = np.random.default_rng(7)
        plan = self.make_plan(4, 6)
        args = (
            T.Tensor(rng.normal(size=(1, 5, 7))),
            T.Tensor(rng.normal(size=(1, 7, 11))),
            T.Tensor(rng.normal(size=(1, 7, 5))),
            [plan],
        )
        t1, d1, v1, s1 = joint_loss(*args, PretrainConfig(alpha=0.5, beta=0.3, gamma=0.2))
        t2, *_ = joint_loss(*args, PretrainConfig(alpha=0.2, beta=0.3, gamma=0.5))
        np.testing.assert_allclose(
            t2.item(), 0.2 * d1.item() + 0.3 * v1.item() + 0.5 * s1.item(), atol=1e-12
        )


class TestOptimizer:
    def test_zero_grad_zero_decay_unchanged(self):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW({"p": p}, PretrainConfig(weight_decay=0.0))
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr_sign(self):
        for g in (0.37, -2.0):
            p = T.Tensor(np.array([0.0]), requires_grad=True)
            p.grad = np.array([g])
            opt = AdamW({"p": p}, PretrainConfig(weight_decay=0.0))
            opt.step(0.01)
            np.testing.assert_allclose(p.data, [-0.01 * np.sign(g)], rtol=1e-4)

    def test_decay_only_shrinks_multiplicatively(self):
        p = T.Tensor(np.array([4.0]), requires_grad=True)
        p.grad = np.zeros(1)
        cfg = PretrainConfig(weight_decay=0.1)
        opt = AdamW({"p": p}, cfg)
        opt.step(0.5)
        np.testing.assert_allclose(p.data, [4.0 * (1 - 0.5 * 0.1)])

    def test_none_grad_skipped_entirely(self):
        p = T.Tensor(np.array([3.0]), requires_grad=True)
        q = T.Tensor(np.array([5.0]), requires_grad=True)
        q.grad = np.array([1.0])
        opt = AdamW({"p": p, "q": q}, PretrainConfig())
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [3.0])
        assert q.data[0] != 5.0


class TestSchedule:
    def test_step_zero(self):
        assert lr_schedule(0, PretrainConfig(lr=0.5, warmup_steps=10, total_steps=100)) == 0.0

    def test_warmup_end(self):
        cfg = PretrainConfig(lr=0.5, warmup_steps=10, total_steps=100)
        assert lr_schedule(10, cfg) == 0.5

    def test_final_step_zero(self):
        cfg = PretrainConfig(lr=0.5, warmup_steps=10, total_steps=100)
        assert abs(lr_schedule(100, cfg)) < 1e-12

    def test_monotone_warmup(self):
        cfg = PretrainConfig(lr=1.0, warmup_steps=5, total_steps=50)
        ramp = [lr_schedule(s, cfg) for s in range(6)]
        assert ramp == sorted(ramp)


class TestClip:
    def test_below_threshold_unchanged(self):
        g = {"a": np.array([0.3, 0.4])}
        norm = clip_gradients(g, threshold=5.0)
        np.testing.assert_allclose(norm, 0.5)
        np.testing.assert_array_equal(g["a"], [0.3, 0.4])

    def test_double_norm_halved(self):
        g = {"a": np.array([6.0, 8.0])}  # norm 10 = 2 * threshold
        clip_gradients(g, threshold=5.0)
        np.testing.assert_allclose(g["a"], [3.0, 4.0])

    def test_postclip_norm_is_min(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            g = {"a": rng.normal(size=7), "b": rng.normal(size=3)}
            before = math.sqrt(sum(float((x * x).sum()) for x in g.values()))
            clip_gradients(g, threshold=1.5)
            after = math.sqrt(sum(float((x * x).sum()) for x in g.values()))
            np.testing.assert_allclose(after, min(before, 1.5), atol=1e-12)


def tiny_model(seed=0):
    cfg = EncoderConfig(d=8, heads=2, layers=1, ffn_mult=2)
    return MultimodalPretrainModel(SIZES, cfg, seed=seed)


class TestPretrainLoop:
    def test_single_step_lr_zero_keeps_params(self):
        rng = np.random.default_rng(9)
        seqs = [random_sequence(rng) for _ in range(4)]
        model = tiny_model()
        before = {k: p.data.copy() for k, p in model.parameters().items()}
        cfg = PretrainConfig(lr=0.0, warmup_steps=0, total_steps=1, batch_size=4, weight_decay=0.0)
        result = pretrain(seqs, model, cfg)
        assert len(result.rows) == 1
        for k, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_loss_decreases_on_tiny_corpus(self):
        rng = np.random.default_rng(10)
        seqs = [random_sequence(rng) for _ in range(64)]
        model = tiny_model(seed=1)
        cfg = PretrainConfig(lr=3e-3, warmup_steps=20, total_steps=300, batch_size=8, seed=2)
        result = pretrain(seqs, model, cfg)
        assert not result.aborted
        first = result.rows[0]["l_dtc"]
        last = np.mean([r["l_dtc"] for r in result.rows[-10:]])
        assert last < first

    def test_bit_reproducible(self):
        rng = np.random.default_rng(11)
        seqs = [random_sequence(rng) for _ in range(8)]
        cfg = PretrainConfig(lr=1e-3, warmup_steps=2, total_steps=5, batch_size=4, seed=3)
        model_a = tiny_model(seed=4)
        res_a = pretrain(seqs, model_a, cfg)
        model_b = tiny_model(seed=4)
        res_b = pretrain(seqs, model_b, cfg)
        assert res_a.rows == res_b.rows
        for (ka, pa), (kb, pb) in zip(
            sorted(model_a.parameters().items()), sorted(model_b.parameters().items())
        ):
            assert ka == kb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_unimodal_variant_trains(self):
        rng = np.random.default_rng(12)
        seqs = [random_sequence(rng) for _ in range(8)]
        cfg_enc = EncoderConfig(d=8, heads=2, layers=1, ffn_mult=2)
        model = UnimodalPretrainModel(SIZES, cfg_enc, seed=5)
        cfg = PretrainConfig(lr=1e-3, warmup_steps=2, total_steps=5, batch_size=4, seed=6)
        result = pretrain(seqs, model, cfg)
        assert len(result.rows) == 5
        assert all(r["l_value"] == 0.0 for r in result.rows)

    def test_full_loss_gradient_check_at_tiny_scale(self):
        rng = np.random.default_rng(13)
        seqs = [random_sequence(rng, l=3, le=5) for _ in range(2)]
        model = tiny_model(seed=7)
        cfg = PretrainConfig(mask_rate=0.5, seed=8)
        mask_rng = np.random.default_rng(14)
        plans = [make_mask_plan(s, cfg, mask_rng) for s in seqs]
        masked = [s.with_masks(p.dtc_positions, p.env_positions) for s, p in zip(seqs, plans)]
        from faultseq.tokens import collate

        batch = collate(masked)
        params = model.parameters()

        def loss():
            return model.loss(batch, plans, cfg)[0]

        err = T.grad_check(loss, params.values(), max_coords=4, rng=np.random.default_rng(15))
        assert err < 1e-4
