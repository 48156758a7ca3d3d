import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dashdetr.autograd import (
    Adam,
    AdamState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    elementwise,
    layer_norm,
    matmul,
    softmax,
)
from dashdetr.autograd import checkpoint as ckpt
from dashdetr.gradcheck import cases, check, numerical_gradient, run_suite


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_relu(self):
        np.testing.assert_array_equal(elementwise("relu", Tensor([-1, 0, 2])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert elementwise("sigmoid", Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = elementwise("sigmoid", Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) * 3.0).data, [[3.0, 6.0]])

    def test_trailing_broadcast(self):
        out = Tensor(np.zeros((2, 3, 4))) + Tensor(np.arange(4.0))
        assert out.shape == (2, 3, 4)
        np.testing.assert_array_equal(out.data[1, 2], np.arange(4.0))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_leading_axis_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 1)))

    def test_log_non_positive(self):
        with pytest.raises(ValueError, match="non-positive"):
            elementwise("log", Tensor([1.0, 0.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise("cosh", Tensor([1.0]))


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_row_times_column(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_of_sum(self):
        # frozen from central differences, h=1e-6: d sum(AB)/dA = row sums of B
        a = Tensor(np.eye(2), requires_grad=True)
        b = np.array([[2.0, 3.0], [4.0, 5.0]])
        backward(matmul(a, Tensor(b)).sum())
        numeric = numerical_gradient(lambda arrs: float((arrs[0] @ b).sum()), [np.eye(2)], h=1e-6)[0]
        np.testing.assert_allclose(numeric, [[5.0, 9.0], [5.0, 9.0]], atol=1e-8)
        np.testing.assert_allclose(a.grad, [[5.0, 9.0], [5.0, 9.0]], atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batch_axes_must_agree(self):
        with pytest.raises(ShapeError, match="batch"):
            matmul(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((3, 3, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])

    def test_large_inputs(self):
        with np.errstate(over="raise"):
            np.testing.assert_array_equal(softmax(Tensor([1000.0, 1000.0]), axis=0).data, [0.5, 0.5])

    def test_ln3(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, np.log(3.0)]), axis=0).data, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError, match="NaN"):
            softmax(Tensor([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = softmax(Tensor(x), axis=-1).data
        assert np.all(np.abs(out.sum(-1) - 1.0) < 1e-12)
        assert np.all((out >= 0) & (out <= 1))


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_two_values(self):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        # mean 2, variance 1, eps 1e-5 under the root
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)
        np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5), atol=1e-15)

    def test_mean_matches_bias_mean(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 16)) * 4 + 2
        bias = rng.normal(size=16)
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(bias)).data
        assert np.all(np.abs(out.mean(-1) - bias.mean()) < 1e-6)

    def test_pre_affine_mean_is_zero(self):
        x = np.random.default_rng(4).normal(size=(6, 10)) * 100
        out = layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10))).data
        assert np.all(np.abs(out.mean(-1)) < 1e-8)

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestBackward:
    def test_sum(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_shared_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        backward((y * y + y).sum())
        assert x.grad.tolist() == [2 * (2 * 6.0) + 2.0]

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(RuntimeError, match="already"):
            backward(loss)

    def test_new_forward_after_backward_works(self):
        x = Tensor([1.0], requires_grad=True)
        backward((x * 2.0).sum())
        x.zero_grad()
        backward((x * 3.0).sum())
        assert x.grad.tolist() == [3.0]

    def test_unrecorded_loss_rejected(self):
        with pytest.raises(RuntimeError):
            backward(Tensor(1.0))

    def test_tape_is_topologically_ordered(self):
        from dashdetr.autograd.tensor import current_tape

        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * 2.0).relu()
        z = (y + x).sum()
        tape = current_tape()
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                if inp._node is not None and inp._tape is tape:
                    assert id(inp._node) in produced
            produced.add(id(node))
        backward(z)

    def test_grads_are_finite(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        backward(softmax(matmul(x, w), axis=-1).log().sum())
        assert np.all(np.isfinite(w.grad))


@pytest.mark.parametrize("name", sorted(cases(0)))
def test_gradient_check(name):
    fn, arrays = cases(0)[name]
    assert check(fn, arrays) < 1e-4


def test_gradient_suite_other_seed():
    results = run_suite(seed=11)
    assert max(results.values()) < 1e-4, results


def test_determinism():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 6)))
        out = layer_norm(matmul(x, w), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        loss = softmax(out, axis=-1).sum() + out.sum()
        backward((out * out).sum())
        return out.data.tobytes(), w.grad.tobytes()

    assert run() == run()


class TestAdam:
    def test_zero_gradient_leaves_parameter(self):
        p = Tensor([1.5, -2.0], requires_grad=True)
        st_ = [AdamState.for_param(p)]
        adam_step([p], st_, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_step_counter_and_grad_zeroed(self):
        p = Tensor([1.0], requires_grad=True)
        st_ = [AdamState.for_param(p)]
        for t in range(1, 4):
            p.grad = np.array([0.5])
            adam_step([p], st_, lr=0.01)
            assert st_[0].step == t
            assert p.grad.tolist() == [0.0]

    def test_first_step_moves_by_lr(self):
        # bias correction makes the first update exactly lr * sign(g) up to eps
        p = Tensor([0.0], requires_grad=True)
        p.grad = np.array([3.0])
        adam_step([p], [AdamState.for_param(p)], lr=0.01)
        np.testing.assert_allclose(p.data, [-0.01], rtol=1e-8)

    def test_constant_gradient_moves_monotonically(self):
        # scalar simulation oracle of the bias-corrected rule
        g, lr, b1, b2, eps = -0.7, 0.05, 0.9, 0.999, 1e-8
        m = v = 0.0
        x_ref = [2.0]
        for t in range(1, 31):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x_ref.append(x_ref[-1] - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
        p = Tensor([2.0], requires_grad=True)
        st_ = [AdamState.for_param(p)]
        xs = [2.0]
        for _ in range(30):
            p.grad = np.array([g])
            adam_step([p], st_, lr)
            xs.append(float(p.data[0]))
        np.testing.assert_allclose(xs, x_ref, rtol=1e-12)
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_missing_grad_names_parameter(self):
        p = Tensor([1.0], requires_grad=True, name="query_embed")
        p.grad = None
        with pytest.raises(ValueError, match="query_embed"):
            adam_step([p], [AdamState.for_param(p)], lr=0.1)

    def test_groups_use_their_own_lr(self):
        a = Tensor([0.0], requires_grad=True)
        b = Tensor([0.0], requires_grad=True)
        opt = Adam([([a], 1e-6), ([b], 1e-5)])
        for _ in range(5):
            a.grad, b.grad = np.array([1.0]), np.array([1.0])
            opt.step()
        np.testing.assert_allclose(b.data / a.data, 10.0, rtol=1e-6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array([np.pi]), "s": np.array(2.5)}
        ckpt.save(tmp_path / "x.ckpt", tensors, {"step": 3})
        back, meta = ckpt.load(tmp_path / "x.ckpt")
        assert meta == {"step": 3}
        assert list(back) == ["a", "b.c", "s"]
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
            assert back[k].shape == tensors[k].shape

    def test_layout(self):
        raw = ckpt.dumps({"w": np.array([1.0, -2.0])})
        assert raw[:8] == b"DDTRCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1
        assert raw[-16:] == np.array([1.0, -2.0], dtype="<f8").tobytes()

    def test_bad_magic(self):
        with pytest.raises(ckpt.CheckpointError, match="magic"):
            ckpt.loads(b"NOTACKPT" + b"\0" * 16)

    def test_truncated(self):
        raw = ckpt.dumps({"w": np.ones(4)})
        with pytest.raises(ckpt.CheckpointError):
            ckpt.loads(raw[:-8])
