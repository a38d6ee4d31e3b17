import math

import numpy as np
import pytest

from cpgan import tensor as T
from cpgan.tensor import Adam, ShapeError, Tensor, no_grad

# frozen from a pure-Python nested-loop cross-correlation (4x4 ramp, pad 1)
CONV_RAMP_EXPECTED = [[-5, -5, -6, 5], [-5, -7, -5, 13], [3, 1, 3, 25], [29, 28, 31, 18]]
CONV_RAMP_KERNEL = [[1, 2, 0], [-1, 0, 1], [0, 1, -2]]
# frozen from the interpolation-formula oracle (half-pixel centres, clamped edges)
UPSAMPLE_EXPECTED = [[0.0, 0.25, 0.75, 1.0], [0.5, 0.75, 1.25, 1.5],
                     [1.5, 1.75, 2.25, 2.5], [2.0, 2.25, 2.75, 3.0]]
# frozen from a scalar Adam reference, gradients 0.5 then -0.2 from p=1
ADAM_TWO_STEPS = (0.99900000002, 0.9986543941811651)


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestConv:
    def test_identity_kernel(self):
        x = t(np.arange(9.0).reshape(1, 1, 3, 3))
        out = T.conv2d(x, t([[[[1.0]]]]), t([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weights_give_bias(self):
        x = t(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
        out = T.conv2d(x, t(np.zeros((4, 3, 3, 3))), t([1.0, -2.0, 0.5, 3.0]), pad=1)
        for o, b in enumerate([1.0, -2.0, 0.5, 3.0]):
            assert np.all(out.data[:, o] == b)

    def test_ramp_against_loop_oracle(self):
        x = t(np.arange(16.0).reshape(1, 1, 4, 4))
        w = t(np.array(CONV_RAMP_KERNEL, dtype=float).reshape(1, 1, 3, 3))
        out = T.conv2d(x, w, pad=1)
        np.testing.assert_allclose(out.data[0, 0], CONV_RAMP_EXPECTED, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_direct_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(t(x), t(w), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = (6 + 2 * pad - 3) // stride + 1
        ref = np.zeros((2, 4, oh, oh))
        for n in range(2):
            for o in range(4):
                for i in range(oh):
                    for j in range(oh):
                        patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            T.conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((1, 2, 3, 3))))
        with pytest.raises(ShapeError, match="bias"):
            T.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((2, 1, 3, 3))), t(np.zeros(3)))


class TestMatmulSoftmax:
    def test_identity_and_zero(self):
        m = t(np.random.default_rng(1).normal(size=(3, 3)))
        np.testing.assert_array_equal(T.matmul(t(np.eye(3)), m).data, m.data)
        np.testing.assert_array_equal(T.matmul(m, t(np.zeros((3, 2)))).data, np.zeros((3, 2)))

    def test_triple_loop_oracle(self):
        out = T.matmul(t([[1, 2, 3], [4, 5, 6]]), t([[7, 8], [9, 10], [11, 12]]))
        np.testing.assert_array_equal(out.data, [[58, 64], [139, 154]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_softmax_closed_form(self):
        out = T.softmax(t([[0.0, math.log(2.0)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-9)

    def test_softmax_constant_and_single(self):
        np.testing.assert_allclose(T.softmax(t(np.full((2, 5), 3.7))).data, 0.2)
        np.testing.assert_array_equal(T.softmax(t([[42.0], [-3.0]])).data, [[1.0], [1.0]])

    def test_softmax_large_logits_are_stable(self):
        out = T.softmax(t([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]])

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(2).normal(size=(4, 3))
        np.testing.assert_allclose(T.log_softmax(t(x), axis=1).data, np.log(T.softmax(t(x), axis=1).data))


class TestUpsample:
    def test_factor_one_identity(self):
        x = t(np.random.default_rng(3).normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(T.upsample(x, 1).data, x.data)

    def test_constant_stays_constant(self):
        out = T.upsample(t(np.full((1, 1, 3, 5), 2.5)), 2)
        assert out.shape == (1, 1, 6, 10)
        np.testing.assert_allclose(out.data, 2.5)

    def test_formula_oracle(self):
        out = T.upsample(t([[[[0.0, 1.0], [2.0, 3.0]]]]), 2)
        np.testing.assert_allclose(out.data[0, 0], UPSAMPLE_EXPECTED, atol=1e-12)


class TestPointwise:
    def test_values(self):
        assert T.relu(t([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
        assert T.sigmoid(t([0.0])).data[0] == 0.5
        assert T.mean(t([1.0, 2.0, 3.0, 4.0])).item() == 2.5
        np.testing.assert_allclose(T.leaky_relu(t([-1.0, 3.0]), 0.2).data, [-0.2, 3.0])

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(t([-800.0, 800.0]))
        assert out.data.tolist() == [0.0, 1.0]

    def test_log_rejects_nonpositive(self):
        with pytest.raises(FloatingPointError):
            T.log(t([1.0, 0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t(np.zeros(3)), t(np.zeros(4)))

    def test_nonfinite_input_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1.0, np.nan]))


class TestRotate:
    def test_single_pixel_unchanged(self):
        x = t(np.full((1, 1, 1, 1), 7.0))
        np.testing.assert_array_equal(T.rotate180(x).data, x.data)

    def test_definition(self):
        out = T.rotate180(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(out.data[0, 0], [[4.0, 3.0], [2.0, 1.0]])

    def test_involution_bitwise(self):
        x = np.random.default_rng(4).normal(size=(1, 1, 5, 7))
        assert T.rotate180(T.rotate180(t(x))).data.tobytes() == x.tobytes()


class TestBackward:
    def test_hand_gradient(self):
        x = t([1.0, 2.0], grad=True)
        T.mul(T.mean(T.square(x)), 1.0).backward()
        # d/dx mean(x^2) = 2x/2 = x
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_unused_leaf_gets_no_gradient(self):
        x = t([1.0, 2.0], grad=True)
        p = t([3.0], grad=True)
        T.sum(x).backward()
        assert p.grad is None or np.all(p.grad == 0)

    def test_gradients_accumulate_over_reuse(self):
        x = t([3.0], grad=True)
        T.sum(T.add(T.mul(x, x), x)).backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_non_scalar_backward_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ValueError):
            T.square(x).backward()

    def test_graph_consumed(self):
        x = t([1.0, 2.0], grad=True)
        y = T.sum(T.square(x))
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_no_grad_records_nothing(self):
        x = t([1.0], grad=True)
        with no_grad():
            y = T.square(x)
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        x = t([1.0], grad=True)
        y = x
        for _ in range(5000):
            y = T.add(y, 0.0)
        T.sum(y).backward()
        assert x.grad[0] == 1.0


class TestGroupNorm:
    def test_normalises_each_group(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(2, 4, 5, 5))
        out = T.group_norm(t(x), t(np.ones(4)), t(np.zeros(4)), groups=2).data
        g = out.reshape(2, 2, -1)
        np.testing.assert_allclose(g.mean(axis=2), 0.0, atol=1e-12)
        np.testing.assert_allclose(g.var(axis=2), 1.0, atol=1e-5)

    def test_bad_groups(self):
        with pytest.raises(ShapeError):
            T.group_norm(t(np.zeros((1, 3, 2, 2))), t(np.ones(3)), t(np.zeros(3)), groups=2)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = t([1.0, -2.0], grad=True)
        opt = Adam({"p": p})
        opt.step({"p": np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = t([1.0, 1.0, 1.0], grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        opt.step({"p": np.array([0.3, -5.0, 1e-3])})
        np.testing.assert_allclose(p.data, [1 - 1e-3, 1 + 1e-3, 1 - 1e-3], rtol=0, atol=1e-8)

    def test_two_steps_match_scalar_reference(self):
        p = t([1.0], grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        opt.step({"p": np.array([0.5])})
        assert p.data[0] == pytest.approx(ADAM_TWO_STEPS[0], abs=1e-15)
        opt.step({"p": np.array([-0.2])})
        assert p.data[0] == pytest.approx(ADAM_TWO_STEPS[1], abs=1e-15)

    def test_uses_stored_grads(self):
        p = t([2.0], grad=True)
        opt = Adam({"p": p}, lr=0.1)
        T.sum(T.square(p)).backward()
        opt.step()
        assert p.data[0] == pytest.approx(1.9)
        assert opt.step_count == 1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        params = {"a.w": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "b": np.zeros(4, np.float32),
                  "scalar": np.float32(1.5) * np.ones((), np.float32)}
        path = tmp_path / "x.ckpt"
        T.save_checkpoint(path, params)
        back = T.load_checkpoint(path)
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()
            assert back[k].shape == params[k].shape

    def test_bad_magic_names_path(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE1234")
        with pytest.raises(ValueError, match="bad.ckpt"):
            T.load_checkpoint(path)

    def test_truncated_reports_offset(self, tmp_path):
        path = tmp_path / "t.ckpt"
        T.save_checkpoint(path, {"w": np.ones((4, 4), np.float32)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="offset"):
            T.load_checkpoint(path)
