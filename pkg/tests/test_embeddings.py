import numpy as np
import pytest

from faultseq import tensor as T
from faultseq.embeddings import (
    DtcEmbeddingTables,
    EnvEmbeddingTables,
    PositionalConfig,
    embed_dtc,
    embed_env,
    fuse_dtc_input,
    sinusoid_channel,
    time_mileage_embedding,
)
from faultseq.tokens import VocabSizes

SIZES = VocabSizes(ecu=5, base=9, description=6, unit=4, value_tokens=20)
D = 8


def make_dtc_tables(seed=0):
    return DtcEmbeddingTables(SIZES, D, np.random.default_rng(seed))


def make_env_tables(seed=0, fusion="concat"):
    return EnvEmbeddingTables(SIZES, D, np.random.default_rng(seed), fusion=fusion)


class TestEmbedDtc:
    def test_zero_fault_table_gives_pure_concat(self):
        tables = make_dtc_tables()
        tables.fault.data[:] = 0.0
        ecu = np.array([3, 4])
        base = np.array([5, 6])
        out = embed_dtc(ecu, base, np.array([0, 1]), tables).data
        expected = np.concatenate([tables.ecu.data[ecu], tables.base.data[base]], axis=-1)
        np.testing.assert_array_equal(out, expected)

    def test_fault_byte_shifts_by_fault_row_difference(self):
        tables = make_dtc_tables()
        a = embed_dtc(np.array([3]), np.array([5]), np.array([0]), tables).data
        b = embed_dtc(np.array([3]), np.array([5]), np.array([1]), tables).data
        np.testing.assert_allclose(b - a, (tables.fault.data[1] - tables.fault.data[0])[None, :])

    def test_matches_assembly_oracle(self):
        rng = np.random.default_rng(1)
        tables = make_dtc_tables(seed=2)
        ecu = rng.integers(0, SIZES.ecu_rows, size=7)
        base = rng.integers(0, SIZES.base_rows, size=7)
        fault = rng.integers(0, 2, size=7)
        out = embed_dtc(ecu, base, fault, tables).data
        for i in range(7):
            row = np.concatenate([tables.ecu.data[ecu[i]], tables.base.data[base[i]]])
            row = row + tables.fault.data[fault[i]]
            np.testing.assert_array_equal(out[i], row)

    def test_fault_scaling_is_linear(self):
        tables = make_dtc_tables()
        ecu, base, fault = np.array([1]), np.array([2]), np.array([1])
        base_out = embed_dtc(ecu, base, np.array([0]), tables).data.copy()
        one = embed_dtc(ecu, base, fault, tables).data - base_out
        tables.fault.data *= 3.0
        base_out3 = embed_dtc(ecu, base, np.array([0]), tables).data
        three = embed_dtc(ecu, base, fault, tables).data - base_out3
        np.testing.assert_allclose(three, 3.0 * one)


class TestTimeMileageEmbedding:
    def test_zero_time_and_mileage_alternating(self):
        out = time_mileage_embedding(np.zeros(3), np.zeros(3), D, PositionalConfig()).data
        np.testing.assert_array_equal(out, np.tile([0.0, 1.0], (3, D // 2)))

    def test_bounded(self):
        rng = np.random.default_rng(3)
        t = rng.uniform(0, 3e6, size=50)
        m = rng.uniform(0, 300, size=50)
        out = time_mileage_embedding(t, m, D, PositionalConfig()).data
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_spot_check_scalar_formula(self):
        cfg = PositionalConfig(base_time=100.0, base_mileage=50.0)
        t = np.array([7.0, 11.0, 0.5])
        m = np.array([3.0, 2.0, 9.0])
        out = time_mileage_embedding(t, m, D, cfg).data
        half = D // 2
        for i in range(3):
            for j in range(half):
                exp = (j if j % 2 == 0 else j - 1) / half
                angle = t[i] * 100.0 ** (-exp)
                want = np.sin(angle) if j % 2 == 0 else np.cos(angle)
                np.testing.assert_allclose(out[i, j], want)
                angle_m = m[i] * 50.0 ** (-exp)
                want_m = np.sin(angle_m) if j % 2 == 0 else np.cos(angle_m)
                np.testing.assert_allclose(out[i, half + j], want_m)

    def test_parameter_free_across_inits(self):
        a = time_mileage_embedding(np.array([5.0]), np.array([2.0]), D, PositionalConfig()).data
        b = time_mileage_embedding(np.array([5.0]), np.array([2.0]), D, PositionalConfig()).data
        np.testing.assert_array_equal(a, b)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            sinusoid_channel(np.zeros(2), 3, 100.0)


class TestFuseDtcInput:
    def test_zero_tables_leaves_positional_channel(self):
        tables = make_dtc_tables()
        for p in tables.parameters().values():
            p.data[:] = 0.0
        t = np.array([100.0, 200.0])
        m = np.array([1.0, 2.0])
        out = fuse_dtc_input(np.array([0, 1]), np.array([0, 1]), np.array([0, 0]), t, m,
                             tables, PositionalConfig()).data
        pos = time_mileage_embedding(t, m, D, PositionalConfig()).data
        np.testing.assert_array_equal(out[1:], pos)
        np.testing.assert_array_equal(out[0], np.tile([0.0, 1.0], D // 2))

    def test_cls_prepended_shape(self):
        tables = make_dtc_tables()
        out = fuse_dtc_input(np.array([1]), np.array([1]), np.array([0]),
                             np.array([0.0]), np.array([0.0]), tables, PositionalConfig())
        assert out.shape == (2, D)

    def test_matches_sum_of_parts_oracle(self):
        rng = np.random.default_rng(4)
        tables = make_dtc_tables(seed=5)
        cfg = PositionalConfig()
        ecu = rng.integers(0, SIZES.ecu_rows, size=6)
        base = rng.integers(0, SIZES.base_rows, size=6)
        fault = rng.integers(0, 2, size=6)
        t = rng.uniform(0, 1e5, size=6)
        m = rng.uniform(0, 100, size=6)
        out = fuse_dtc_input(ecu, base, fault, t, m, tables, cfg).data
        parts = embed_dtc(ecu, base, fault, tables).data + time_mileage_embedding(t, m, D, cfg).data
        np.testing.assert_array_equal(out[1:], parts)
        cls = tables.cls.data + np.tile([0.0, 1.0], D // 2)
        np.testing.assert_array_equal(out[0], cls)

    def test_batched_shapes(self):
        tables = make_dtc_tables()
        b, l = 3, 4
        out = fuse_dtc_input(
            np.zeros((b, l), dtype=np.int64), np.zeros((b, l), dtype=np.int64),
            np.zeros((b, l), dtype=np.int64), np.zeros((b, l)), np.zeros((b, l)),
            tables, PositionalConfig(),
        )
        assert out.shape == (b, l + 1, D)


class TestEmbedEnv:
    def test_zero_unit_table_gives_pure_concat(self):
        tables = make_env_tables()
        tables.unit.data[:] = 0.0
        tables.cls.data[:] = 0.0
        desc = np.array([2, 3])
        value = np.array([4, 5])
        out = embed_env(desc, value, np.array([1, 1]), tables).data
        expected = np.concatenate([tables.value.data[value], tables.desc.data[desc]], axis=-1)
        np.testing.assert_array_equal(out[1:], expected)

    def test_value_changes_touch_value_span_only(self):
        tables = make_env_tables()
        a = embed_env(np.array([2]), np.array([4]), np.array([1]), tables).data
        b = embed_env(np.array([2]), np.array([9]), np.array([1]), tables).data
        dv = tables.d_value
        assert not np.array_equal(a[1, :dv], b[1, :dv])
        np.testing.assert_array_equal(a[1, dv:], b[1, dv:])

    def test_matches_assembly_oracle(self):
        rng = np.random.default_rng(6)
        tables = make_env_tables(seed=7)
        desc = rng.integers(0, SIZES.description_rows, size=9)
        value = rng.integers(0, SIZES.value_rows, size=9)
        unit = rng.integers(0, SIZES.unit_rows, size=9)
        out = embed_env(desc, value, unit, tables).data
        for i in range(9):
            row = np.concatenate([tables.value.data[value[i]], tables.desc.data[desc[i]]])
            row = row + tables.unit.data[unit[i]]
            np.testing.assert_array_equal(out[i + 1], row)

    def test_sum_fusion_mode(self):
        tables = make_env_tables(fusion="sum")
        assert tables.d_value == D and tables.d_desc == D
        desc = np.array([1])
        value = np.array([2])
        unit = np.array([3])
        out = embed_env(desc, value, unit, tables).data
        expected = tables.value.data[2] + tables.desc.data[1] + tables.unit.data[3]
        np.testing.assert_array_equal(out[1], expected)

    def test_output_dim_is_d(self):
        for fusion in ("concat", "sum"):
            tables = make_env_tables(fusion=fusion)
            out = embed_env(np.array([1, 2]), np.array([1, 2]), np.array([1, 2]), tables)
            assert out.shape == (3, D)


class TestGradientsFlow:
    def test_embedding_gradients_reach_all_tables(self):
        tables = make_dtc_tables()
        out = fuse_dtc_input(np.array([1, 2]), np.array([3, 4]), np.array([0, 1]),
                             np.array([1.0, 2.0]), np.array([0.5, 1.5]),
                             tables, PositionalConfig())
        (out * np.ones(out.shape)).sum().backward()
        for name, p in tables.parameters().items():
            assert p.grad is not None, name

    def test_fuse_gradient_check(self):
        rng = np.random.default_rng(8)
        tables = make_dtc_tables(seed=9)
        w = rng.normal(size=(3, D))
        err = T.grad_check(
            lambda: (fuse_dtc_input(np.array([1, 2]), np.array([3, 4]), np.array([0, 1]),
                                    np.array([10.0, 20.0]), np.array([1.0, 2.0]),
                                    tables, PositionalConfig()) * w).sum(),
            tables.parameters().values(),
        )
        assert err < 1e-6
