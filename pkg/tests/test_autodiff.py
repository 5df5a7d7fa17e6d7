import numpy as np
import pytest

from matxfer import autodiff as ad
from fd import check_grads
from gradsweep import build_cases


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("float64"):
        yield


class TestConv2d:
    def test_toroidal_sum_of_ones(self):
        x = ad.Tensor(np.ones((1, 3, 3)))
        w = ad.Tensor(np.ones((1, 1, 3, 3)))
        b = ad.Tensor(np.zeros(1))
        y = ad.conv2d(x, w, b, "circular")
        assert np.allclose(y.data, 9.0)

    @pytest.mark.parametrize("padding", ["circular", "zero"])
    def test_identity_kernel(self, padding):
        rng = np.random.default_rng(1)
        x = ad.Tensor(rng.random((2, 6, 6)))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        y = ad.conv2d(x, ad.Tensor(w), ad.Tensor(np.zeros(2)), padding)
        assert np.array_equal(y.data, x.data)

    def test_commutes_with_cyclic_shift(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.random((2, 8, 8)))
        w = ad.Tensor(rng.normal(0, 0.5, (3, 2, 3, 3)))
        b = ad.Tensor(rng.normal(0, 0.1, 3))
        for dx, dy in [(1, 0), (0, 1), (3, 5), (-2, 7), (8, 8), (13, -1)]:
            a = ad.conv2d(ad.cyclic_shift(x, dx, dy), w, b, "circular")
            c = ad.cyclic_shift(ad.conv2d(x, w, b, "circular"), dx, dy)
            assert np.abs(a.data - c.data).max() <= 1e-6

    def test_shape_errors_name_operand(self):
        x = ad.Tensor(np.zeros((2, 4, 4)))
        w = ad.Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ad.ShapeError, match="input channels"):
            ad.conv2d(x, w, ad.Tensor(np.zeros(1)))
        with pytest.raises(ad.ShapeError, match="odd"):
            ad.conv2d(x, ad.Tensor(np.zeros((1, 2, 2, 2))), ad.Tensor(np.zeros(1)))
        with pytest.raises(ad.ShapeError, match="bias"):
            ad.conv2d(x, ad.Tensor(np.zeros((1, 2, 3, 3))), ad.Tensor(np.zeros(2)))


class TestUpsample2x:
    def test_nearest_replication(self):
        x = ad.Tensor([[[1.0, 2.0], [3.0, 4.0]]])
        y = ad.upsample2x(x, "nearest")
        expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        assert np.array_equal(y.data[0], expect)

    @pytest.mark.parametrize("mode", ["nearest", "bilinear_circular"])
    def test_constant_preserved(self, mode):
        x = ad.Tensor(np.full((3, 4, 4), 0.7))
        y = ad.upsample2x(x, mode)
        assert np.allclose(y.data, 0.7)

    def test_bilinear_shift_equivariance(self):
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.random((2, 5, 7)))
        a = ad.upsample2x(ad.cyclic_shift(x, 1, 0), "bilinear_circular")
        b = ad.cyclic_shift(ad.upsample2x(x, "bilinear_circular"), 2, 0)
        assert np.abs(a.data - b.data).max() <= 1e-12


class TestAvgpool2x:
    def test_mean_of_block(self):
        y = ad.avgpool2x(ad.Tensor([[[1.0, 3.0], [5.0, 7.0]]]))
        assert np.allclose(y.data, [[[4.0]]])

    def test_constant(self):
        y = ad.avgpool2x(ad.Tensor(np.full((2, 4, 4), 2.5)))
        assert np.allclose(y.data, 2.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.random((3, 4, 4))
        y = ad.avgpool2x(ad.Tensor(x)).data
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    block = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert abs(y[c, i, j] - block.mean()) < 1e-12

    def test_odd_dims_rejected(self):
        with pytest.raises(ad.ShapeError, match="even"):
            ad.avgpool2x(ad.Tensor(np.zeros((1, 3, 4))))


class TestSort1d:
    def test_basic(self):
        s, perm = ad.sort1d(ad.Tensor([3.0, 1.0, 2.0]))
        assert np.array_equal(s.data, [1.0, 2.0, 3.0])
        assert np.array_equal(perm, [1, 2, 0])

    def test_permutation_transport(self):
        x = ad.Tensor([3.0, 1.0, 2.0], requires_grad=True)
        s, _ = ad.sort1d(x)
        up = ad.Tensor([10.0, 20.0, 30.0])  # a, b, c on sorted [1, 2, 3]
        ad.backward(ad.sum_(ad.mul(s, up)))
        assert np.array_equal(x.grad, [30.0, 10.0, 20.0])  # c, a, b

    def test_inverse_permutation_roundtrip(self):
        rng = np.random.default_rng(5)
        x = rng.random(64)
        s, perm = ad.sort1d(ad.Tensor(x))
        restored = np.empty_like(x)
        restored[perm] = s.data
        assert np.array_equal(restored, x)

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(6)
        vals = np.arange(64) * 0.11 + rng.random(64) * 0.05
        rng.shuffle(vals)
        x = ad.Tensor(vals, requires_grad=True)
        w = ad.Tensor(rng.uniform(-1, 1, 64))
        check_grads(lambda ts: ad.sum_(ad.mul(ad.sort1d(ts[0])[0], w)), [x])


class TestElementwise:
    def test_l1_distance_zero(self):
        assert ad.l1_distance(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0])).item() == 0.0

    def test_leaky_relu_value_and_grad(self):
        x = ad.Tensor([-2.0], requires_grad=True)
        y = ad.leaky_relu(x, 0.2)
        assert np.allclose(y.data, [-0.4])
        ad.backward(ad.sum_(y))
        assert np.allclose(x.grad, [0.2])

    def test_composite_gradcheck(self):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.uniform(-1, 1, (2, 5, 5)), requires_grad=True)
        w = ad.Tensor(rng.normal(0, 0.4, (3, 2, 3, 3)), requires_grad=True)
        b = ad.Tensor(rng.normal(0, 0.2, 3), requires_grad=True)
        check_grads(lambda ts: ad.mean(ad.relu(ad.conv2d(ts[0], ts[1], ts[2], "circular"))),
                    [x, w, b])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError, match="identical shapes"):
            ad.add(ad.Tensor([1.0]), ad.Tensor([1.0, 2.0]))

    def test_debug_div_by_zero(self):
        ad.set_debug(True)
        try:
            with pytest.raises(ZeroDivisionError):
                ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
        finally:
            ad.set_debug(False)


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        ad.backward(ad.sum_(x))
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_mean_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.backward(ad.mean(ad.mul(x, x)))
        assert np.allclose(x.grad, [2 / 3, 4 / 3, 2.0])

    def test_three_op_chain_vs_fd(self):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.uniform(0.2, 1.0, 6), requires_grad=True)
        check_grads(lambda ts: ad.mean(ad.sqrt(ad.mul(ts[0], ts[0]))), [x])

    def test_fanout_accumulates_both_paths(self):
        rng = np.random.default_rng(9)
        x = ad.Tensor(rng.uniform(0.5, 1.5, 5), requires_grad=True)

        def fn(ts):
            a = ad.mul(ts[0], 2.0)
            return ad.sum_(ad.add(ad.mul(a, ts[0]), a))
        check_grads(fn, [x])

    def test_repeated_backward_accumulates(self):
        x = ad.Tensor([1.0, 1.0], requires_grad=True)
        loss = ad.sum_(x)
        ad.backward(loss)
        ad.backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(ad.mul(x, 2.0))

    def test_disconnected_loss_rejected(self):
        with pytest.raises(ValueError):
            ad.backward(ad.mean(ad.Tensor([1.0])))


class TestCyclicShift:
    def test_zero_shift_identity(self):
        x = ad.Tensor(np.arange(12.0).reshape(1, 3, 4))
        assert np.array_equal(ad.cyclic_shift(x, 0, 0).data, x.data)

    def test_full_period_identity(self):
        x = ad.Tensor(np.arange(12.0).reshape(1, 3, 4))
        assert np.array_equal(ad.cyclic_shift(x, 4, 3).data, x.data)

    def test_composition_inverse(self):
        rng = np.random.default_rng(10)
        x = ad.Tensor(rng.random((2, 6, 8)))
        y = ad.cyclic_shift(ad.cyclic_shift(x, 3, -2), -3, 2)
        assert np.array_equal(y.data, x.data)


def test_gradient_sweep_all_primitives():
    """Every primitive passes central finite-difference checks (20+ instances)."""
    for instance in range(20):
        rng = np.random.default_rng(1000 + instance)
        for name, fn, tensors in build_cases(rng):
            try:
                check_grads(fn, tensors)
            except AssertionError as exc:
                raise AssertionError(f"[{name} / instance {instance}] {exc}") from exc
