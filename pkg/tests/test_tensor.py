import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultseq import tensor as T


def randt(rng, *shape, requires_grad=True):
    return T.Tensor(rng.normal(size=shape), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(4, 4)))
        eye = T.Tensor(np.eye(4))
        np.testing.assert_allclose((eye @ x).data, x.data)

    def test_scalar_product(self):
        out = T.Tensor([[2.0]]) @ T.Tensor([[3.0]])
        assert out.data[0, 0] == 6.0

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        a = randt(rng, 4, 5)
        b = randt(rng, 5, 3)
        err = T.grad_check(lambda: ((a @ b) * (a @ b)).sum(), [a, b])
        assert err < 1e-6

    def test_batched_matmul_gradient(self):
        rng = np.random.default_rng(2)
        a = randt(rng, 2, 3, 4)
        b = randt(rng, 4, 5)
        err = T.grad_check(lambda: ((a @ b) * (a @ b)).sum(), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    @given(st.floats(-50, 50), st.floats(-10, 10))
    def test_shift_invariance(self, x, c):
        out = T.softmax_rows(T.Tensor([[x, x + c]])).data[0]
        expected = 1.0 / (1.0 + np.exp(-c))
        np.testing.assert_allclose(out[1], expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = T.softmax_rows(T.Tensor(rng.normal(size=(6, 7)) * 5))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = randt(rng, 6, 7)
        w = rng.normal(size=(6, 7))
        err = T.grad_check(lambda: (T.softmax_rows(x) * w).sum(), [x])
        assert err < 1e-6


class TestEntmax15:
    def test_symmetric_pair(self):
        out = T.entmax15_rows(T.Tensor([[1.7, 1.7]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_extreme_margin_exact(self):
        out = T.entmax15_rows(T.Tensor([[10.0, -10.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_rows_sum_to_one_and_sparse_support(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(50, 9)) * 3
        out = T.entmax15_rows(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(50), atol=1e-9)
        assert (out == 0.0).any()

    def test_support_shrinks_as_one_logit_grows(self):
        base = np.array([0.3, -0.2, 0.1, 0.0, -0.5])
        supports = []
        for bump in [0.0, 1.0, 2.0, 4.0, 8.0]:
            row = base.copy()
            row[0] += bump
            y = T.entmax15_rows(T.Tensor(row[None, :])).data[0]
            supports.append(int((y > 0).sum()))
        assert all(a >= b for a, b in zip(supports, supports[1:]))
        assert supports[-1] == 1

    def test_agrees_with_bisection_oracle(self):
        # Dual: find tau with sum(max((x - tau)/2 after stabilization, 0)^2) = 1.
        rng = np.random.default_rng(6)
        for _ in range(20):
            row = rng.normal(size=7) * 2
            z = (row - row.max()) / 2.0
            lo, hi = z.min() - 1.0, z.max()
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                s = np.sum(np.maximum(z - mid, 0.0) ** 2)
                if s > 1.0:
                    lo = mid
                else:
                    hi = mid
            oracle = np.maximum(z - 0.5 * (lo + hi), 0.0) ** 2
            out = T.entmax15_rows(T.Tensor(row[None, :])).data[0]
            np.testing.assert_allclose(out, oracle, atol=1e-8)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = rng.normal(size=(4, 6))
        err = T.grad_check(lambda: (T.entmax15_rows(x) * w).sum(), [x])
        assert err < 1e-4


class TestNorms:
    def test_rms_constant_input(self):
        x = T.Tensor(np.full((1, 8), 3.0))
        out = T.rms_norm(x, T.Tensor(np.ones(8)))
        np.testing.assert_allclose(out.data, np.ones((1, 8)), atol=1e-6)

    @given(st.floats(0.1, 100.0))
    def test_rms_scale_invariance(self, alpha):
        x = np.linspace(-2, 3, 8)[None, :]
        g = T.Tensor(np.ones(8))
        a = T.rms_norm(T.Tensor(x), g).data
        b = T.rms_norm(T.Tensor(alpha * x), g).data
        np.testing.assert_allclose(a, b, atol=1e-4)

    def test_rms_gradient(self):
        rng = np.random.default_rng(8)
        x = randt(rng, 3, 8)
        g = T.Tensor(rng.normal(size=8) + 1.0, requires_grad=True)
        w = rng.normal(size=(3, 8))
        err = T.grad_check(lambda: (T.rms_norm(x, g) * w).sum(), [x, g])
        assert err < 1e-6

    def test_layer_norm_constant_row_is_bias(self):
        x = T.Tensor(np.full((2, 6), 4.0))
        bias = T.Tensor(np.arange(6.0))
        out = T.layer_norm(x, T.Tensor(np.ones(6)), bias)
        np.testing.assert_allclose(out.data, np.broadcast_to(np.arange(6.0), (2, 6)), atol=1e-2)

    def test_layer_norm_already_normalized(self):
        out = T.layer_norm(T.Tensor([[-1.0, 1.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(9)
        x = randt(rng, 3, 6)
        g = T.Tensor(rng.normal(size=6) + 1.0, requires_grad=True)
        b = T.Tensor(rng.normal(size=6), requires_grad=True)
        w = rng.normal(size=(3, 6))
        err = T.grad_check(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b])
        assert err < 1e-6


class TestLosses:
    def test_cross_entropy_uniform(self):
        logits = T.Tensor(np.zeros((3, 4)))
        loss = T.cross_entropy_masked(logits, np.array([1, 2, 3]), np.array([True, False, False]))
        np.testing.assert_allclose(loss.item(), np.log(4.0))

    def test_cross_entropy_confident(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1e6
        loss = T.cross_entropy_masked(T.Tensor(logits), np.array([2]), np.array([True]))
        assert loss.item() < 1e-9

    def test_cross_entropy_empty_mask(self):
        logits = T.Tensor(np.ones((2, 3)), requires_grad=True)
        loss = T.cross_entropy_masked(logits, np.array([0, 1]), np.array([False, False]))
        assert loss.item() == 0.0
        assert loss._parents == ()

    def test_cross_entropy_vs_direct_sum(self):
        rng = np.random.default_rng(10)
        z = rng.normal(size=(6, 5)) * 3
        targets = rng.integers(0, 5, size=6)
        mask = np.array([True, False, True, True, False, True])
        loss = T.cross_entropy_masked(T.Tensor(z), targets, mask)
        # direct formula oracle
        acc = []
        for i in range(6):
            if mask[i]:
                p = np.exp(z[i]) / np.exp(z[i]).sum()
                acc.append(-np.log(p[targets[i]]))
        np.testing.assert_allclose(loss.item(), np.mean(acc), atol=1e-10)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(11)
        x = randt(rng, 4, 6)
        targets = rng.integers(0, 6, size=4)
        mask = np.array([True, True, False, True])
        err = T.grad_check(lambda: T.cross_entropy_masked(x, targets, mask), [x])
        assert err < 1e-6

    def test_bce_at_zero_logits(self):
        loss = T.bce_multilabel(T.Tensor(np.zeros((3, 4))), np.zeros((3, 4)))
        np.testing.assert_allclose(loss.item(), np.log(2.0))

    def test_bce_confident_limit(self):
        loss = T.bce_multilabel(T.Tensor(np.full((2, 2), 50.0)), np.ones((2, 2)))
        assert loss.item() < 1e-9

    def test_bce_vs_direct_formula(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(5, 7)) * 4
        y = (rng.random(size=(5, 7)) < 0.4).astype(float)
        loss = T.bce_multilabel(T.Tensor(z), y)
        s = 1.0 / (1.0 + np.exp(-z))
        oracle = -(y * np.log(s) + (1 - y) * np.log(1 - s)).mean()
        np.testing.assert_allclose(loss.item(), oracle, atol=1e-10)

    def test_bce_gradient(self):
        rng = np.random.default_rng(13)
        x = randt(rng, 3, 5)
        y = (rng.random(size=(3, 5)) < 0.5).astype(float)
        err = T.grad_check(lambda: T.bce_multilabel(x, y), [x])
        assert err < 1e-6


class TestStructuralOps:
    def test_concat_backward_splits_exactly(self):
        rng = np.random.default_rng(14)
        a = randt(rng, 2, 3)
        b = randt(rng, 2, 5)
        w = rng.normal(size=(2, 8))
        out = (T.concat([a, b], axis=-1) * w).sum()
        out.backward()
        np.testing.assert_array_equal(a.grad, w[:, :3])
        np.testing.assert_array_equal(b.grad, w[:, 3:])

    def test_sum_fusion_duplicates_gradient(self):
        rng = np.random.default_rng(15)
        a = randt(rng, 2, 4)
        b = randt(rng, 2, 4)
        w = rng.normal(size=(2, 4))
        ((a + b) * w).sum().backward()
        np.testing.assert_array_equal(a.grad, w)
        np.testing.assert_array_equal(b.grad, w)

    def test_embedding_accumulates_repeated_ids(self):
        table = T.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([1, 1, 3])
        out = T.embedding(table, ids).sum()
        out.backward()
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_broadcast_add_unbroadcasts(self):
        a = T.Tensor(np.zeros((2, 3)), requires_grad=True)
        b = T.Tensor(np.zeros(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full(3, 2.0))

    def test_slice_axis_gradient_scatters(self):
        x = T.Tensor(np.arange(10.0).reshape(2, 5), requires_grad=True)
        T.slice_axis(x, 1, 1, 3).sum().backward()
        expected = np.zeros((2, 5))
        expected[:, 1:3] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_rotate_pairs_preserves_norm(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(5, 8))
        angles = rng.uniform(0, 2 * np.pi, size=(5, 4))
        out = T.rotate_pairs(T.Tensor(x), np.cos(angles), np.sin(angles))
        np.testing.assert_allclose(
            np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12
        )

    def test_rotate_pairs_gradient(self):
        rng = np.random.default_rng(17)
        x = randt(rng, 3, 4)
        angles = rng.uniform(0, 2 * np.pi, size=(3, 2))
        w = rng.normal(size=(3, 4))
        err = T.grad_check(
            lambda: (T.rotate_pairs(x, np.cos(angles), np.sin(angles)) * w).sum(), [x]
        )
        assert err < 1e-6

    def test_gelu_gradient(self):
        rng = np.random.default_rng(18)
        x = randt(rng, 4, 4)
        err = T.grad_check(lambda: T.gelu(x).sum(), [x])
        assert err < 1e-6


class TestGradCheckItself:
    def test_quadratic_is_near_exact(self):
        rng = np.random.default_rng(19)
        x = randt(rng, 5)
        err = T.grad_check(lambda: (x * x).sum(), [x])
        assert err < 1e-8

    def test_reused_node_accumulates(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = x * x  # dy/dx = 2x via two paths
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [4.0])


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_entmax_rows_always_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(rows, cols)) * 10)
    np.testing.assert_allclose(T.softmax_rows(x).data.sum(axis=-1), np.ones(rows), atol=1e-9)
    np.testing.assert_allclose(T.entmax15_rows(x).data.sum(axis=-1), np.ones(rows), atol=1e-9)
