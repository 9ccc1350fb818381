"""Gradient verification suite covering every differentiable operation.

Each check builds a small random instance, scalarises the operation through
a fixed random linear functional, and compares the analytic gradient against
central finite differences via :func:`oaknet.metrics.grad_check`.

At 64-bit both sides run in float64.  At 32-bit the analytic gradient is
computed by the float32 kernels while the finite-difference reference runs
through the float64 kernels on the same values: this verifies the 32-bit
backward implementation against an accurate numerical derivative instead of
drowning the comparison in float32 rounding noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .metrics import grad_check
from .nn.layers import OrdinalHead
from .nn.losses import loss_bce, loss_cce, loss_joint, loss_mse
from .nn.specs import LayerSpec

TOL_F64 = 1e-6
TOL_F32 = 1e-4


def _run(make_loss_grad, x0, dtype, eps=1e-5):
    """Max relative FD error for one tensor argument.

    ``make_loss_grad(v, compute_dtype)`` returns (scalar loss, grad wrt v)
    with all kernels running at ``compute_dtype``.
    """
    if dtype == np.float64:
        def fn(v):
            return make_loss_grad(v, np.float64)
    else:
        def fn(v):
            value, _ = make_loss_grad(v, np.float64)
            _, g = make_loss_grad(v, np.float32)
            return value, g.astype(np.float64)
    return grad_check(fn, np.asarray(x0, dtype=np.float64), eps=eps).max_rel_error


def check_conv2d(seed, dtype):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    padding = "same" if seed % 2 else "valid"
    x = rng.normal(size=(2, 2, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y, _ = T.conv2d_forward(x, w, b, stride=stride, padding=padding)
    r = rng.normal(size=y.shape)

    def wrt(which):
        def make(v, dt):
            args = {"x": x, "w": w, "b": b}
            args[which] = v
            yy, cache = T.conv2d_forward(args["x"].astype(dt), args["w"].astype(dt),
                                         args["b"].astype(dt), stride=stride,
                                         padding=padding)
            grads = T.conv2d_backward(r.astype(dt), cache)
            g = {"x": grads[0], "w": grads[1], "b": grads[2]}[which]
            return float((yy.astype(np.float64) * r).sum()), g
        return make

    return max(_run(wrt("x"), x, dtype), _run(wrt("w"), w, dtype),
               _run(wrt("b"), b, dtype))


def check_maxpool2d(seed, dtype):
    rng = np.random.default_rng(seed)
    # distinct values keep the argmax stable under the probe epsilon
    x = rng.permutation(np.arange(2 * 2 * 36, dtype=np.float64)).reshape(2, 2, 6, 6)
    y, _ = T.maxpool2d_forward(x, (3, 3), 2)
    r = rng.normal(size=y.shape)

    def make(v, dt):
        yy, cache = T.maxpool2d_forward(v.astype(dt), (3, 3), 2)
        return float((yy.astype(np.float64) * r).sum()), T.maxpool2d_backward(r.astype(dt), cache)

    return _run(make, x, dtype, eps=1e-3)


def check_upsample(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 5))
    factor = int(rng.integers(1, 5))
    y, _ = T.upsample_nearest_forward(x, factor)
    r = rng.normal(size=y.shape)

    def make(v, dt):
        yy, cache = T.upsample_nearest_forward(v.astype(dt), factor)
        return float((yy.astype(np.float64) * r).sum()), T.upsample_nearest_backward(r.astype(dt), cache)

    return _run(make, x, dtype)


def check_dense(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    r = rng.normal(size=(4, 4))

    def wrt(which):
        def make(v, dt):
            args = {"x": x, "w": w, "b": b}
            args[which] = v
            yy, cache = T.dense_forward(args["x"].astype(dt), args["w"].astype(dt),
                                        args["b"].astype(dt))
            grads = T.dense_backward(r.astype(dt), cache)
            g = {"x": grads[0], "w": grads[1], "b": grads[2]}[which]
            return float((yy.astype(np.float64) * r).sum()), g
        return make

    return max(_run(wrt("x"), x, dtype), _run(wrt("w"), w, dtype),
               _run(wrt("b"), b, dtype))


def check_batchnorm(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 2, 4, 4))
    gamma = rng.normal(size=2) + 1.5
    beta = rng.normal(size=2)
    r = rng.normal(size=x.shape)

    def wrt(which):
        def make(v, dt):
            args = {"x": x, "gamma": gamma, "beta": beta}
            args[which] = v
            yy, cache = T.batchnorm_forward(
                args["x"].astype(dt), args["gamma"].astype(dt),
                args["beta"].astype(dt), np.zeros(2, dt), np.ones(2, dt),
                training=True)
            grads = T.batchnorm_backward(r.astype(dt), cache)
            g = {"x": grads[0], "gamma": grads[1], "beta": grads[2]}[which]
            return float((yy.astype(np.float64) * r).sum()), g
        return make

    return max(_run(wrt("x"), x, dtype), _run(wrt("gamma"), gamma, dtype),
               _run(wrt("beta"), beta, dtype))


def check_relu(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    x += np.where(np.abs(x) < 0.1, 0.2 * np.sign(x + 1e-9), 0.0)  # step off the kink
    r = rng.normal(size=x.shape)

    def make(v, dt):
        yy, cache = T.relu_forward(v.astype(dt))
        return float((yy.astype(np.float64) * r).sum()), T.relu_backward(r.astype(dt), cache)

    return _run(make, x, dtype, eps=1e-6)


def check_sigmoid(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    r = rng.normal(size=x.shape)

    def make(v, dt):
        yy, cache = T.sigmoid_forward(v.astype(dt))
        return float((yy.astype(np.float64) * r).sum()), T.sigmoid_backward(r.astype(dt), cache)

    return _run(make, x, dtype)


def check_softmax(seed, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    r = rng.normal(size=x.shape)

    def make(v, dt):
        yy, cache = T.softmax_forward(v.astype(dt), axis=1)
        return float((yy.astype(np.float64) * r).sum()), T.softmax_backward(r.astype(dt), cache)

    return _run(make, x, dtype)


def check_loss_bce(seed, dtype):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.05, 0.95, size=(2, 1, 6, 6))
    target = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)

    def make(v, dt):
        value, grad = loss_bce(v.astype(dt), target.astype(dt))
        return value, grad

    return _run(make, pred, dtype, eps=1e-6)


def check_loss_cce(seed, dtype):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 5))
    probs, _ = T.softmax_forward(logits, axis=1)
    labels = rng.integers(0, 5, size=6)

    def make(v, dt):
        value, grad = loss_cce(v.astype(dt), labels)
        return value, grad

    return _run(make, probs, dtype, eps=1e-6)


def check_loss_mse(seed, dtype):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(8, 1))
    target = rng.normal(size=(8, 1))

    def make(v, dt):
        value, grad = loss_mse(v.astype(dt), target.astype(dt))
        return value, grad

    return _run(make, pred, dtype)


def check_loss_joint(seed, dtype):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 5))
    probs, _ = T.softmax_forward(logits, axis=1)
    labels = rng.integers(0, 5, size=6)
    reg = rng.normal(size=(6, 1))
    grades = rng.uniform(0, 4, size=(6, 1))
    w_reg = float(rng.uniform(0.2, 0.8))

    def wrt_probs(v, dt):
        total, _, _, dprobs, _ = loss_joint(v.astype(dt), labels,
                                            reg.astype(dt), grades.astype(dt), w_reg)
        return total, dprobs

    def wrt_reg(v, dt):
        total, _, _, _, dreg = loss_joint(probs.astype(dt), labels,
                                          v.astype(dt), grades.astype(dt), w_reg)
        return total, dreg

    return max(_run(wrt_probs, probs, dtype, eps=1e-6), _run(wrt_reg, reg, dtype))


def check_ordinal_head(seed, dtype):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(6, 5))
    probs, _ = T.softmax_forward(logits, axis=1)
    r = rng.normal(size=(6, 1))
    scale_w = float(rng.normal()) + 1.0
    scale_b = float(rng.normal())

    def make_layer(dt):
        layer = OrdinalHead(LayerSpec("head", "ordinal_head",
                                      {"fixed_weights": (0, 1, 2, 3, 4)}))
        layer.init_params((5,), rng, dt)
        layer.weights["scale_w"][:] = scale_w
        layer.weights["scale_b"][:] = scale_b
        return layer

    def wrt_probs(v, dt):
        layer = make_layer(dt)
        y = layer.forward(v.astype(dt), False, None)
        g = layer.backward(r.astype(dt))
        return float((y.astype(np.float64) * r).sum()), g

    def wrt_scale(which):
        def make(v, dt):
            layer = make_layer(dt)
            layer.weights[which][:] = v.astype(dt)
            y = layer.forward(probs.astype(dt), False, None)
            layer.backward(r.astype(dt))
            return float((y.astype(np.float64) * r).sum()), layer.grads[which]
        return make

    return max(_run(wrt_probs, probs, dtype),
               _run(wrt_scale("scale_w"), np.array([scale_w]), dtype),
               _run(wrt_scale("scale_b"), np.array([scale_b]), dtype))


CHECKS = {
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool2d,
    "upsample": check_upsample,
    "dense": check_dense,
    "batchnorm": check_batchnorm,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "loss_bce": check_loss_bce,
    "loss_cce": check_loss_cce,
    "loss_mse": check_loss_mse,
    "loss_joint": check_loss_joint,
    "ordinal_head": check_ordinal_head,
}


def run_suite(ops=None, seeds=20, dtypes=(np.float64, np.float32)):
    """Run the checks; yields (op, dtype name, worst error, tolerance, passed)."""
    names = list(CHECKS) if ops is None else list(ops)
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown op {name!r}; available: {', '.join(CHECKS)}")
        fn = CHECKS[name]
        for dtype in dtypes:
            tol = TOL_F64 if dtype == np.float64 else TOL_F32
            worst = max(fn(seed, dtype) for seed in range(seeds))
            yield name, np.dtype(dtype).name, worst, tol, worst < tol
