import numpy as np
import pytest

from advrep.numerics import (
    Checkpoint,
    CheckpointError,
    ConfigurationError,
    ParamSet,
    SgdState,
    ShapeError,
    Tensor,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    grad_check,
    interpolate_nearest,
    leaky_relu,
    load_checkpoint,
    maxpool2d,
    mse_loss,
    no_grad,
    save_checkpoint,
    sgd_step,
    softmax_cross_entropy,
    tensor_sum,
)
from advrep.numerics import ops
from advrep.numerics.verify import adjoint_error, run_suite


def t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, f, h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i : i + 3, j : j + 3]
            out[:, :, i, j] = np.einsum("ncij,fcij->nf", patch, w)
    return out + b[None, :, None, None]


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(t(x), t(w), t(b)).data
    np.testing.assert_allclose(got, naive_conv(x, w, b), atol=1e-12)


def test_conv_transpose_is_adjoint(rng):
    for _ in range(20):
        assert adjoint_error(rng) < 1e-10


def test_conv_transpose_shape(rng):
    y = conv_transpose2d(t(rng.standard_normal((2, 4, 6, 5))), t(rng.standard_normal((4, 3, 3, 3))))
    assert y.shape == (2, 3, 6, 5)


def test_maxpool_floor_and_first_tie():
    x = np.zeros((1, 1, 5, 5))
    out, idx = maxpool2d(t(x))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(idx == 0)
    x = t(np.array([[[[1.0, 3.0], [3.0, 2.0]]]]))
    out, idx = maxpool2d(x)
    assert idx[0, 0, 0, 0] == 1
    tensor_sum(out).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])


def test_maxpool_rejects_tiny_input():
    with pytest.raises(ShapeError):
        maxpool2d(t(np.zeros((1, 1, 1, 4))))


def test_nearest_interpolation_index_rule():
    x = t(np.arange(6.0).reshape(1, 1, 2, 3))
    y = interpolate_nearest(x, (5, 7)).data[0, 0]
    rows = (np.arange(5) * 2) // 5
    cols = (np.arange(7) * 3) // 7
    np.testing.assert_array_equal(y, x.data[0, 0][np.ix_(rows, cols)])


def test_batchnorm_running_stats(rng):
    x = rng.standard_normal((8, 3, 4, 4)) * 2 + 1
    g, b = t(np.ones(3)), t(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = batchnorm2d(t(x), g, b, rm, rv, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    mean = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mean)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_zero_momentum_leaves_buffers(rng):
    rm, rv = np.zeros(3), np.ones(3)
    batchnorm2d(t(rng.standard_normal((4, 3, 2, 2))), t(np.ones(3)), t(np.zeros(3)), rm, rv, True, momentum=0.0)
    np.testing.assert_array_equal(rm, 0)
    np.testing.assert_array_equal(rv, 1)


def test_leaky_relu_values():
    y = leaky_relu(t([-2.0, 0.0, 3.0])).data
    np.testing.assert_allclose(y, [-0.02, 0.0, 3.0])


def test_cross_entropy_matches_reference(rng):
    logits = rng.standard_normal((5, 4))
    y = np.array([0, 3, 1, 1, 2])
    ref = -np.mean(logits[np.arange(5), y] - np.log(np.exp(logits).sum(axis=1)))
    assert softmax_cross_entropy(t(logits), y).item() == pytest.approx(ref, rel=1e-12)


def test_cross_entropy_stable_for_large_logits():
    v = softmax_cross_entropy(t([[1000.0, -1000.0]]), np.array([1])).item()
    assert v == pytest.approx(2000.0)


def test_mse_mean(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert mse_loss(t(a), b).item() == pytest.approx(np.mean((a - b) ** 2))


def test_no_grad_records_nothing(rng):
    x = t(rng.standard_normal((2, 3)))
    with no_grad():
        y = leaky_relu(x)
    assert y._backward is None


def test_gradient_accumulates_over_shared_use(rng):
    x = t(rng.standard_normal(4))
    y = tensor_sum(ops.add(x, x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_grad_check_detects_wrong_gradient(rng):
    from advrep.numerics.tensor import make_result

    x = t(rng.standard_normal(5))

    def bad_square(a):
        return make_result(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

    err = grad_check(lambda: tensor_sum(bad_square(x)), [x])
    assert err > 0.1


def test_grad_check_rejects_untracked_params():
    with pytest.raises(ValueError):
        grad_check(lambda: tensor_sum(t([1.0])), [t([1.0], grad=False)])


def test_grad_check_eps_range():
    x = t([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: tensor_sum(x), [x], eps=1e-2)


def test_verification_suite_small():
    rep = run_suite(layer_trials=3, graph_trials=1, adjoint_trials=5, seed=7)
    assert rep.passed(), rep.errors


def test_sgd_respects_groups():
    a, b = ParamSet("theta_e"), ParamSet("theta_id")
    pa = a.add("w", Tensor(np.ones(2), requires_grad=True))
    pb = b.add("w", Tensor(np.ones(2), requires_grad=True))
    pa.grad = np.ones(2)
    pb.grad = np.ones(2)
    sgd_step([a, b], SgdState(0.5).only("theta_e"))
    np.testing.assert_allclose(pa.data, 0.5)
    np.testing.assert_allclose(pb.data, 1.0)
    assert pa.grad is None and pb.grad is None


def test_sgd_rejects_nonpositive_rate():
    with pytest.raises(ValueError):
        SgdState(0.0)


def test_checkpoint_roundtrip(tmp_path, rng):
    ps = ParamSet("theta_e")
    ps.add("w", Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True))
    ps.add_buffer("running_mean", np.arange(3, dtype=np.float32))
    ck = Checkpoint.from_paramsets([ps], meta={"epoch": 4})
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.meta["epoch"] == 4
    other = ParamSet("theta_e")
    other.add("w", Tensor(np.zeros((3, 2), dtype=np.float32), requires_grad=True))
    other.add_buffer("running_mean", np.zeros(3, dtype=np.float32))
    back.apply([other])
    np.testing.assert_array_equal(other.params["w"].data, ps.params["w"].data)
    np.testing.assert_array_equal(other.buffers["running_mean"], [0, 1, 2])
    assert back.to_bytes() == ck.to_bytes()


def test_checkpoint_detects_corruption(tmp_path):
    ps = ParamSet("theta_e")
    ps.add("w", Tensor(np.ones(4, dtype=np.float32), requires_grad=True))
    blob = bytearray(Checkpoint.from_paramsets([ps]).to_bytes())
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob[:-3]))
    blob[-1] ^= 0xFF
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob))


def test_checkpoint_rejects_mismatched_model():
    ps = ParamSet("theta_e")
    ps.add("w", Tensor(np.ones(4, dtype=np.float32), requires_grad=True))
    ck = Checkpoint.from_paramsets([ps])
    other = ParamSet("theta_e")
    other.add("w", Tensor(np.ones(5, dtype=np.float32), requires_grad=True))
    with pytest.raises(CheckpointError):
        ck.apply([other])


def test_configuration_error_is_value_error():
    assert issubclass(ConfigurationError, ValueError)


# -- documented edge cases ----------------------------------------------------


def test_conv2d_edge_cases(rng):
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_allclose(conv2d(x, t(np.ones((1, 1, 3, 3))), t([0.0])).data, 10.0)
    w = rng.standard_normal((2, 3, 3, 3))
    assert not conv2d(t(np.zeros((1, 3, 4, 4))), t(w), t(np.zeros(2))).data.any()
    delta = np.zeros((3, 3, 3, 3))
    for c in range(3):
        delta[c, c, 1, 1] = 1.0
    xr = rng.standard_normal((2, 3, 5, 4))
    np.testing.assert_array_equal(conv2d(t(xr), t(delta)).data, xr)
    np.testing.assert_array_equal(conv_transpose2d(t(xr), t(delta)).data, xr)
    out = conv_transpose2d(t(np.zeros((1, 3, 2, 2))), t(delta), t([1.0, 2.0, 3.0])).data
    np.testing.assert_array_equal(out[0, :, 0, 0], [1.0, 2.0, 3.0])


def test_maxpool_examples():
    out, _ = maxpool2d(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.data.item() == 4.0
    out, _ = maxpool2d(t(np.zeros((1, 1, 126, 125))))
    assert out.shape == (1, 1, 63, 62)
    x = t(np.full((2, 3, 6, 6), 7.0))
    tensor_sum(maxpool2d(x)[0]).backward()
    assert x.grad.sum() == 2 * 3 * 9 and set(np.unique(x.grad)) == {0.0, 1.0}


def test_batchnorm_examples():
    x = t(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    y = batchnorm2d(x, t([1.0]), t([0.0]), np.zeros(1), np.ones(1), True).data.ravel()
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-5)
    y = batchnorm2d(x, t([0.0]), t([0.5]), np.zeros(1), np.ones(1), True).data
    np.testing.assert_array_equal(y, 0.5)
    z = np.arange(8.0).reshape(2, 1, 2, 2)
    y = batchnorm2d(t(z), t([1.0]), t([0.0]), np.zeros(1), np.ones(1), False).data
    np.testing.assert_allclose(y, z / np.sqrt(1 + 1e-5))


def test_interpolation_examples():
    y = interpolate_nearest(t([[[[1.0, 2.0]]]]), (1, 4)).data
    np.testing.assert_array_equal(y.ravel(), [1, 1, 2, 2])
    x = np.arange(49.0).reshape(1, 1, 7, 7)
    idx = (np.arange(15) * 7) // 15
    np.testing.assert_array_equal(interpolate_nearest(t(x), (15, 15)).data[0, 0], x[0, 0][np.ix_(idx, idx)])
    np.testing.assert_array_equal(interpolate_nearest(t(x), (7, 7)).data, x)


def test_linear_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ops.linear(t(x), t(np.eye(4)), t(np.zeros(4))).data, x)
    assert ops.linear(t([[1.0, 1.0]]), t([[1.0, 2.0]]), t([0.0])).data.item() == 3.0


def test_dropout_rates():
    x = t(np.ones(100_000))
    np.testing.assert_array_equal(ops.dropout(x, 0.0, True, np.random.default_rng(0)).data, 1.0)
    np.testing.assert_array_equal(ops.dropout(x, 0.5, False).data, 1.0)
    y = ops.dropout(x, 0.2, True, np.random.default_rng(0)).data
    assert abs(np.mean(y == 0) - 0.2) < 0.01
    assert abs(y.mean() - 1.0) < 0.01


def test_softmax_and_uniform_cross_entropy(rng):
    p = ops.softmax(rng.standard_normal((10, 7)) * 10)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert softmax_cross_entropy(t([[0.0, 0.0]]), np.array([0])).item() == np.log(2.0)
    assert softmax_cross_entropy(t([[1000.0, 0.0]]), np.array([0])).item() == pytest.approx(0.0, abs=1e-12)


def test_backward_examples():
    x = t(np.ones((2, 3)))
    tensor_sum(x).backward()
    np.testing.assert_array_equal(x.grad, 1.0)
    x = t([2.0])
    mse_loss(x, np.zeros(1)).backward()
    np.testing.assert_allclose(x.grad, [4.0])
    x = t([[0.0, 0.0]])
    softmax_cross_entropy(x, np.array([0])).backward()
    np.testing.assert_allclose(x.grad, [[-0.5, 0.5]])


def test_sgd_example():
    ps = ParamSet("theta_e")
    p = ps.add("w", Tensor(np.array([1.0]), requires_grad=True))
    p.grad = np.array([2.0])
    sgd_step([ps], SgdState(0.1))
    np.testing.assert_allclose(p.data, [0.8])
    p.grad = np.array([2.0])
    sgd_step([ps], SgdState(0.1).only("theta_d"))
    np.testing.assert_allclose(p.data, [0.8])


def test_grad_check_examples(rng):
    x = rng.standard_normal((5, 4))
    w, b = t(rng.standard_normal((3, 4))), t(rng.standard_normal(3))
    target = rng.standard_normal((5, 3))
    assert grad_check(lambda: mse_loss(ops.linear(t(x, False), w, b), target), [w, b]) < 1e-6
    assert grad_check(lambda: tensor_sum(t([1.0], False)), []) == 0.0
