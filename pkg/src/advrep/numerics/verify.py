"""Randomised gradient and adjoint checks for every layer and the full model graphs.

All checks run in float64. Inputs are built away from the non-differentiable
points: leaky-ReLU arguments stay clear of zero and every max-pool window has a
unique, well-separated maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import grad_check
from .tensor import Tensor

GRAD_TOLERANCE = 1e-4
ADJOINT_TOLERANCE = 1e-10


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _off_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * (margin + rng.random(shape))


def _pool_friendly(rng, shape):
    """Values whose 2x2 windows have a maximum at least 0.05 above the runner-up."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.05 + rng.random(shape) * 0.01) / max(n * 0.05, 1.0) * 4 - 2


def _weights(rng, shape):
    return rng.standard_normal(shape) * 0.5


def _case_conv(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 6), rng.integers(2, 6)
    x, wt, b = _t(rng.standard_normal((n, c, h, w))), _t(_weights(rng, (f, c, 3, 3))), _t(rng.standard_normal(f))
    r = _t(rng.standard_normal((n, f, h, w)))
    return (lambda: _dot(ops.conv2d(x, wt, b), r)), [x, wt, b]


def _case_deconv(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 6), rng.integers(2, 6)
    x, wt, b = _t(rng.standard_normal((n, c, h, w))), _t(_weights(rng, (c, f, 3, 3))), _t(rng.standard_normal(f))
    r = _t(rng.standard_normal((n, f, h, w)))
    return (lambda: _dot(ops.conv_transpose2d(x, wt, b), r)), [x, wt, b]


def _case_pool(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    x = _t(_pool_friendly(rng, shape))
    h2, w2 = shape[2] // 2, shape[3] // 2
    r = _t(rng.standard_normal((shape[0], shape[1], h2, w2)))
    return (lambda: _dot(ops.maxpool2d(x)[0], r)), [x]


def _case_bn_train(rng):
    shape = (int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4)))
    x = _t(rng.standard_normal(shape) * 2 + 1)
    g, b = _t(rng.random(shape[1]) + 0.5), _t(rng.standard_normal(shape[1]))
    r = _t(rng.standard_normal(shape))

    def f():
        rm, rv = np.zeros(shape[1]), np.ones(shape[1])
        return _dot(ops.batchnorm2d(x, g, b, rm, rv, True), r)

    return f, [x, g, b]


def _case_bn_eval(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    x = _t(rng.standard_normal(shape))
    g, b = _t(rng.random(shape[1]) + 0.5), _t(rng.standard_normal(shape[1]))
    rm, rv = rng.standard_normal(shape[1]), rng.random(shape[1]) + 0.5
    r = _t(rng.standard_normal(shape))
    return (lambda: _dot(ops.batchnorm2d(x, g, b, rm, rv, False), r)), [x, g, b]


def _case_lrelu(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
    x = _t(_off_zero(rng, shape))
    r = _t(rng.standard_normal(shape))
    slope = float(rng.uniform(0.01, 0.3))
    return (lambda: _dot(ops.leaky_relu(x, slope), r)), [x]


def _case_interp(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    big = (h + int(rng.integers(0, 5)), w + int(rng.integers(0, 5)))
    x = _t(rng.standard_normal((n, c, h, w)))
    r = _t(rng.standard_normal((n, c) + big))
    return (lambda: _dot(ops.interpolate_nearest(x, big), r)), [x]


def _case_linear(rng):
    n, d, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
    x, wt, b = _t(rng.standard_normal((n, d))), _t(rng.standard_normal((k, d))), _t(rng.standard_normal(k))
    target = rng.standard_normal((n, k))
    return (lambda: ops.mse_loss(ops.linear(x, wt, b), target)), [x, wt, b]


def _case_dropout(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 8)))
    x = _t(rng.standard_normal(shape))
    r = _t(rng.standard_normal(shape))
    seed = int(rng.integers(2**31))
    # the same mask on every evaluation, as the check requires
    return (lambda: _dot(ops.dropout(x, 0.2, True, np.random.default_rng(seed)), r)), [x]


def _case_xent(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = _t(rng.standard_normal((n, k)) * 3)
    y = rng.integers(0, k, size=n)
    return (lambda: ops.softmax_cross_entropy(logits, y)), [logits]


def _case_mse(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    x = _t(rng.standard_normal(shape))
    y = rng.standard_normal(shape)
    return (lambda: ops.mse_loss(x, y)), [x]


def _case_reshape(rng):
    n, c, h, w = (int(s) for s in rng.integers(1, 4, size=4))
    x = _t(rng.standard_normal((n, c, h, w)))
    r = _t(rng.standard_normal((n, c * h * w)))
    return (lambda: _dot(ops.flatten(x), r)), [x]


def _dot(a: Tensor, r: Tensor) -> Tensor:
    """<a, r> as a scalar tensor, with r a constant (projects any output to a loss)."""
    return ops.tensor_sum(_mul_const(a, r.data))


def _mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    from .tensor import make_result

    return make_result(a.data * c, (a,), lambda g: (g * c,))


LAYER_CASES: dict[str, Callable] = {
    "conv2d": _case_conv,
    "conv_transpose2d": _case_deconv,
    "maxpool2d": _case_pool,
    "batchnorm2d_train": _case_bn_train,
    "batchnorm2d_eval": _case_bn_eval,
    "leaky_relu": _case_lrelu,
    "interpolate_nearest": _case_interp,
    "linear": _case_linear,
    "dropout": _case_dropout,
    "softmax_cross_entropy": _case_xent,
    "mse_loss": _case_mse,
    "flatten": _case_reshape,
}


def _small_model(rng, with_heads: bool):
    from ..models import AutoEncoder, EncoderSpec

    spec = EncoderSpec(maps=(2, 3, 3, 4), fc_hidden=6, bottleneck=5, input_shape=(18, 17))
    model = AutoEncoder.build(rng, n_speakers=3 if with_heads else 0, with_pc=with_heads, spec=spec, dtype=np.float64)
    # non-trivial batch-norm affine parameters
    for ps in model.paramsets():
        for name, t in ps.items():
            if name.endswith("gamma"):
                t.data[...] = rng.random(t.shape) + 0.5
            elif name.endswith("beta") or name.endswith("bias"):
                t.data[...] = rng.standard_normal(t.shape) * 0.1
    return model, spec


def _case_autoencoder(rng):
    model, spec = _small_model(rng, False)
    x = rng.standard_normal((3, 1) + spec.input_shape)

    def f():
        # batch statistics only, so repeated evaluations see identical buffers
        z = model.encode(Tensor(x), training=True, track_stats=False)
        return ops.mse_loss(model.decode(z, training=True), x)

    params = [t for ps in model.paramsets() for t in ps]
    return f, params


def _case_full_graph(rng):
    model, spec = _small_model(rng, True)
    x = rng.standard_normal((4, 1) + spec.input_shape)
    x_id = rng.standard_normal((3, 1) + spec.input_shape)
    y_pd = rng.integers(0, 2, size=4)
    y_id = rng.integers(0, 3, size=3)
    seeds = [int(s) for s in rng.integers(2**31, size=2)]

    def f():
        z = model.encode(Tensor(x), training=True, track_stats=False)
        l_ae = ops.mse_loss(model.decode(z, training=True), x)
        l_pc = ops.softmax_cross_entropy(model.pc_head(z, True, np.random.default_rng(seeds[0])), y_pd)
        z_id = model.encode(Tensor(x_id), training=True, track_stats=False)
        l_id = ops.softmax_cross_entropy(model.id_head(z_id, True, np.random.default_rng(seeds[1])), y_id)
        return ops.scale(l_ae, 0.9) + ops.scale(l_pc, 0.07) + ops.scale(l_id, -0.03)

    params = [t for ps in model.paramsets() for t in ps]
    return f, params


def _case_eval_graph(rng):
    model, spec = _small_model(rng, True)
    for ps in model.paramsets():
        for name, b in ps.buffers.items():
            b[...] = rng.standard_normal(b.shape) * 0.1 if name.endswith("mean") else rng.random(b.shape) + 0.5
    x = rng.standard_normal((2, 1) + spec.input_shape)
    y = rng.integers(0, 2, size=2)

    def f():
        z = model.encode(Tensor(x), training=False)
        return ops.mse_loss(model.decode(z, training=False), x) + ops.softmax_cross_entropy(model.pc_head(z, False), y)

    params = [t for ps in model.paramsets() for t in ps]
    return f, params


GRAPH_CASES: dict[str, Callable] = {
    "autoencoder_graph": _case_autoencoder,
    "full_training_graph": _case_full_graph,
    "eval_graph": _case_eval_graph,
}


@dataclass
class SuiteReport:
    errors: dict[str, float] = field(default_factory=dict)  # worst relative error per case
    trials: dict[str, int] = field(default_factory=dict)
    adjoint_error: float = 0.0
    adjoint_trials: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = GRAD_TOLERANCE, adj_tol: float = ADJOINT_TOLERANCE) -> bool:
        return self.max_error < tol and self.adjoint_error <= adj_tol


def adjoint_error(rng: np.random.Generator) -> float:
    """|<conv(x, w), y> - <x, conv_transpose(y, w)>| for one random case."""
    n, c, f = (int(v) for v in rng.integers(1, 5, size=3))
    h, w = (int(v) for v in rng.integers(1, 9, size=2))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((f, c, 3, 3))
    y = rng.standard_normal((n, f, h, w))
    lhs = float(np.sum(ops.conv2d(_t(x), _t(wt)).data * y))
    rhs = float(np.sum(x * ops.conv_transpose2d(_t(y), _t(wt)).data))
    return abs(lhs - rhs)


def run_suite(layer_trials: int = 100, graph_trials: int = 5, adjoint_trials: int = 50, seed: int = 0,
              samples_per_param: int = 4, eps: float = 1e-6) -> SuiteReport:
    rng = np.random.default_rng(seed)
    rep = SuiteReport()
    cases = [(name, fn, layer_trials) for name, fn in LAYER_CASES.items()]
    cases += [(name, fn, graph_trials) for name, fn in GRAPH_CASES.items()]
    for name, fn, trials in cases:
        worst = 0.0
        for _ in range(trials):
            loss_fn, params = fn(rng)
            worst = max(worst, grad_check(loss_fn, params, eps=eps, samples_per_param=samples_per_param, rng=rng))
        rep.errors[name] = worst
        rep.trials[name] = trials
    rep.adjoint_error = max((adjoint_error(rng) for _ in range(adjoint_trials)), default=0.0)
    rep.adjoint_trials = adjoint_trials
    return rep
