"""Tensor engine: forward semantics, reverse mode, error surface."""

import numpy as np
import pytest

from _gradcheck import PRIMITIVE_CASES, TOLERANCE, max_rel_error
from bridgeflow import tensor as T
from bridgeflow.tensor import NonFinite, NonScalarLoss, ShapeMismatch, Tensor


# ---------------------------------------------------------------- forward

def test_matmul_identity_unchanged():
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, T.constant(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_matches_loop_reference():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    out = T.matmul(T.constant(a), T.constant(b)).data
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_output_length_oracle():
    # floor((500 + 2 - 3) / 2) + 1 = 250
    assert T.conv1d_output_length(500, 3, 2, 1) == 250
    x = T.constant(np.zeros((1, 1, 500)))
    w = T.constant(np.zeros((16, 1, 3)))
    assert T.conv1d(x, w, stride=2, padding=1).shape == (1, 16, 250)


def test_conv1d_matches_loop_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(4, 3, 3))
    bias = rng.normal(size=4)
    stride, padding = 2, 1
    out = T.conv1d(T.constant(x), T.constant(w), T.constant(bias),
                   stride=stride, padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    length = (9 + 2 * padding - 3) // stride + 1
    ref = np.zeros((2, 4, length))
    for b in range(2):
        for o in range(4):
            for l in range(length):
                acc = bias[o]
                for c in range(3):
                    for k in range(3):
                        acc += w[o, c, k] * xp[b, c, l * stride + k]
                ref[b, o, l] = acc
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_softmax_equal_scores_uniform():
    ids = np.array([0, 0, 0, 1, 1])
    out = T.softmax_segmented(T.constant([2.0, 2.0, 2.0, -1.0, -1.0]), ids).data
    np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3, 0.5, 0.5], atol=1e-12)


def test_softmax_segments_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(2)
    ids = np.sort(rng.integers(0, 5, size=40))
    scores = rng.normal(size=40)
    p = T.softmax_segmented(T.constant(scores), ids).data
    sums = np.zeros(5)
    np.add.at(sums, ids, p)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    shifts = rng.normal(size=5)  # constant per segment
    p2 = T.softmax_segmented(T.constant(scores + shifts[ids]), ids).data
    np.testing.assert_allclose(p2, p, atol=1e-12)


def test_softmax_matches_per_segment_reference():
    rng = np.random.default_rng(3)
    ids = np.array([0, 1, 0, 2, 1, 0])
    scores = rng.normal(size=(6, 3))
    out = T.softmax_segmented(T.constant(scores), ids).data
    for seg in range(3):
        rows = scores[ids == seg]
        e = np.exp(rows - rows.max(axis=0))
        np.testing.assert_allclose(out[ids == seg], e / e.sum(axis=0), atol=1e-12)


def test_elementwise_and_reductions_forward():
    x = T.constant([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_allclose(T.square(x).data, x.data**2)
    np.testing.assert_allclose(T.exp(x).data, np.exp(x.data))
    np.testing.assert_allclose(T.mean_axis(x, 0).data, [2.0, -0.75])
    np.testing.assert_allclose(T.sum_axis(x, 1).data, [-1.0, 3.5])
    np.testing.assert_allclose(T.leaky_relu(x, 0.2).data,
                               [[1.0, -0.4], [3.0, 0.5]])
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(T.silu(x).data, x.data * s, atol=1e-15)


def test_leading_axis_broadcast_only():
    a, b = T.constant(np.ones((2, 3))), T.constant(np.ones(3))
    assert T.add(a, b).shape == (2, 3)
    assert T.mul(b, a).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        T.add(T.constant(np.ones((3, 1))), T.constant(np.ones(3)))
    with pytest.raises(ShapeMismatch):
        T.add(a, T.constant(np.ones(2)))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.matmul(T.constant(np.ones(3)), T.constant(np.ones((3, 1))))
    with pytest.raises(ShapeMismatch):
        T.concat([T.constant(np.ones((2, 3))), T.constant(np.ones((2, 2)))], axis=0)
    with pytest.raises(ShapeMismatch):
        T.gather_rows(T.constant(np.ones((3, 2))), np.array([0, 3]))
    with pytest.raises(ShapeMismatch):
        T.scatter_rows(T.constant(np.ones((3, 2))), np.array([0, 1]), 4)
    with pytest.raises(ShapeMismatch):
        T.conv1d(T.constant(np.ones((1, 2, 5))), T.constant(np.ones((3, 4, 3))))
    with pytest.raises(ShapeMismatch):
        Tensor([1.0, 2.0]).item()


def test_non_finite_rejected():
    with pytest.raises(NonFinite):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFinite):
        T.exp(T.constant([1000.0]))
    with pytest.raises(NonFinite):
        T.log(T.constant([-1.0]))
    with pytest.raises(NonFinite):
        T.log(T.constant([0.0]))


# ---------------------------------------------------------------- backward

def test_grad_of_sum_is_ones():
    x = T.parameter(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum_axis(T.sum_axis(x, 0), 0))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_x_times_x_is_2x():
    x = T.parameter([1.5, -2.0, 0.25])
    loss = T.sum_axis(T.mul(x, x), 0)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)


def test_grad_accumulates_across_reuse():
    x = T.parameter([1.0, 2.0, 3.0])
    y = T.add(x, x)  # diamond: x enters twice
    loss = T.sum_axis(T.mul(y, y), 0)  # sum (2x)^2 -> d/dx = 8x
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 8 * x.data, atol=1e-15)


def test_backward_requires_scalar():
    x = T.parameter([1.0, 2.0])
    with pytest.raises(NonScalarLoss):
        T.backward(T.mul(x, x))


def test_constants_get_no_grad():
    x, c = T.parameter([1.0, 2.0]), T.constant([3.0, 4.0])
    out = T.mul(x, c)
    T.backward(T.sum_axis(out, 0))
    assert c.grad is None and out.grad is not None
    np.testing.assert_array_equal(x.grad, c.data)


def test_backward_deterministic_and_repeatable():
    rng = np.random.default_rng(7)
    x = T.parameter(rng.normal(size=(4, 3)))
    w = T.parameter(rng.normal(size=(3, 2)))

    def run():
        loss = T.mean_axis(T.mean_axis(T.square(T.matmul(x, w)), 0), 0)
        T.backward(loss)
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    np.testing.assert_array_equal(g1[0], g2[0])
    np.testing.assert_array_equal(g1[1], g2[1])


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(name, seed):
    fn, params = PRIMITIVE_CASES[name](np.random.default_rng([seed, hash(name) % 2**32]))
    assert max_rel_error(fn, params) < TOLERANCE


def test_three_layer_composite_gradcheck():
    rng = np.random.default_rng(11)
    x = T.constant(rng.normal(size=(5, 6)))
    w1, b1 = T.parameter(rng.normal(size=(6, 8)) * 0.5), T.parameter(np.zeros(8))
    w2, b2 = T.parameter(rng.normal(size=(8, 8)) * 0.5), T.parameter(np.zeros(8))
    w3, b3 = T.parameter(rng.normal(size=(8, 2)) * 0.5), T.parameter(np.zeros(2))

    def fn():
        h = T.silu(T.add(T.matmul(x, w1), b1))
        h = T.silu(T.add(T.matmul(h, w2), b2))
        out = T.add(T.matmul(h, w3), b3)
        return T.mean_axis(T.mean_axis(T.square(out), 0), 0)

    params = [w1, b1, w2, b2, w3, b3]
    assert sum(p.size for p in params) <= 1000
    assert max_rel_error(fn, params) < TOLERANCE


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    params = {
        "encoder.w": T.parameter(rng.normal(size=(4, 3))),
        "encoder.b": rng.normal(size=3),
    }
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, params, meta={"variant": "fe_mlp", "epoch": 7})
    arrays, meta = T.load_checkpoint(path)
    assert meta == {"variant": "fe_mlp", "epoch": 7}
    np.testing.assert_array_equal(arrays["encoder.w"], params["encoder.w"].data)
    np.testing.assert_array_equal(arrays["encoder.b"], params["encoder.b"])
