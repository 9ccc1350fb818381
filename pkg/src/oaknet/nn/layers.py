"""Layer objects wrapping the tensor kernels, built from LayerSpecs."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from .specs import BuildError, LayerSpec


class Layer:
    """Stateful wrapper around a forward/backward kernel pair.

    ``weights`` holds trainable arrays, ``state`` non-trainable arrays
    (batch-norm running statistics, the ordinal head's fixed weights).
    ``grads`` is filled by ``backward``.
    """

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.name = spec.name
        self.kind = spec.kind
        self.l2 = float(spec.params.get("l2", 0.0))
        self.weights = {}
        self.state = {}
        self.grads = {}
        self._cache = None

    def init_params(self, in_shape, rng, dtype):
        """Allocate weights for ``in_shape`` (no batch axis). Default: none."""

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {}


def _xavier(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Conv(Layer):
    def init_params(self, in_shape, rng, dtype):
        c = in_shape[0]
        k = self.spec.params["kernels"]
        kh, kw = self.spec.params["kernel_size"]
        self.weights["w"] = _xavier(rng, (k, c, kh, kw), c * kh * kw, k * kh * kw, dtype)
        self.weights["b"] = np.zeros(k, dtype=dtype)

    def forward(self, x, training, rng):
        y, self._cache = T.conv2d_forward(
            x, self.weights["w"], self.weights["b"],
            stride=self.spec.params.get("stride", 1),
            padding=self.spec.params.get("padding", "same"))
        return y

    def backward(self, dy):
        dx, dw, db = T.conv2d_backward(dy, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx


class MaxPool(Layer):
    def forward(self, x, training, rng):
        y, self._cache = T.maxpool2d_forward(
            x, self.spec.params["kernel_size"], self.spec.params["stride"])
        return y

    def backward(self, dy):
        return T.maxpool2d_backward(dy, self._cache)


class Upsample(Layer):
    def forward(self, x, training, rng):
        y, self._cache = T.upsample_nearest_forward(x, self.spec.params["factor"])
        return y

    def backward(self, dy):
        return T.upsample_nearest_backward(dy, self._cache)


class Dense(Layer):
    def init_params(self, in_shape, rng, dtype):
        d = in_shape[0]
        m = self.spec.params["units"]
        self.weights["w"] = _xavier(rng, (d, m), d, m, dtype)
        self.weights["b"] = np.zeros(m, dtype=dtype)

    def forward(self, x, training, rng):
        y, self._cache = T.dense_forward(x, self.weights["w"], self.weights["b"])
        return y

    def backward(self, dy):
        dx, dw, db = T.dense_backward(dy, self._cache)
        self.grads = {"w": dw, "b": db}
        return dx


class SoftmaxDense(Layer):
    """Dense layer fused with a row softmax (the classification heads)."""

    def init_params(self, in_shape, rng, dtype):
        d = in_shape[0]
        m = self.spec.params["units"]
        self.weights["w"] = _xavier(rng, (d, m), d, m, dtype)
        self.weights["b"] = np.zeros(m, dtype=dtype)

    def forward(self, x, training, rng):
        z, dense_cache = T.dense_forward(x, self.weights["w"], self.weights["b"])
        p, sm_cache = T.softmax_forward(z, axis=1)
        self._cache = (dense_cache, sm_cache)
        return p

    def backward(self, dy):
        dense_cache, sm_cache = self._cache
        dz = T.softmax_backward(dy, sm_cache)
        dx, dw, db = T.dense_backward(dz, dense_cache)
        self.grads = {"w": dw, "b": db}
        return dx


class BatchNorm(Layer):
    def init_params(self, in_shape, rng, dtype):
        c = in_shape[0]
        self.weights["gamma"] = np.ones(c, dtype=dtype)
        self.weights["beta"] = np.zeros(c, dtype=dtype)
        self.state["running_mean"] = np.zeros(c, dtype=dtype)
        self.state["running_var"] = np.ones(c, dtype=dtype)

    def forward(self, x, training, rng):
        y, self._cache = T.batchnorm_forward(
            x, self.weights["gamma"], self.weights["beta"],
            self.state["running_mean"], self.state["running_var"],
            momentum=self.spec.params.get("momentum", 0.9),
            eps=self.spec.params.get("eps", 1e-5),
            training=training)
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = T.batchnorm_backward(dy, self._cache)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx


class ReLU(Layer):
    def forward(self, x, training, rng):
        y, self._cache = T.relu_forward(x)
        return y

    def backward(self, dy):
        return T.relu_backward(dy, self._cache)


class Sigmoid(Layer):
    def forward(self, x, training, rng):
        y, self._cache = T.sigmoid_forward(x)
        return y

    def backward(self, dy):
        return T.sigmoid_backward(dy, self._cache)


class Dropout(Layer):
    def forward(self, x, training, rng):
        y, self._cache = T.dropout_forward(x, self.spec.params["rate"], rng,
                                           training=training)
        return y

    def backward(self, dy):
        return T.dropout_backward(dy, self._cache)


class Flatten(Layer):
    def forward(self, x, training, rng):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._cache)


class OrdinalHead(Layer):
    """Expected grade under the class probabilities, then a trainable 1->1
    affine map (initialised to the identity)."""

    def init_params(self, in_shape, rng, dtype):
        fixed = self.spec.params.get("fixed_weights", (0, 1, 2, 3, 4))
        self.state["fixed_weights"] = np.asarray(fixed, dtype=dtype)
        self.weights["scale_w"] = np.ones(1, dtype=dtype)
        self.weights["scale_b"] = np.zeros(1, dtype=dtype)

    def forward(self, x, training, rng):
        fixed = self.state["fixed_weights"]
        expected = x @ fixed  # (N,)
        self._cache = (x, expected)
        return (expected * self.weights["scale_w"][0]
                + self.weights["scale_b"][0])[:, None]

    def backward(self, dy):
        x, expected = self._cache
        d = dy[:, 0]
        self.grads = {
            "scale_w": np.array([float((d * expected).sum())], dtype=dy.dtype),
            "scale_b": np.array([float(d.sum())], dtype=dy.dtype),
        }
        dexpected = d * self.weights["scale_w"][0]
        return dexpected[:, None] * self.state["fixed_weights"][None, :]


_LAYER_CLASSES = {
    "conv": Conv,
    "maxpool": MaxPool,
    "upsample": Upsample,
    "dense": Dense,
    "softmax_dense": SoftmaxDense,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "dropout": Dropout,
    "flatten": Flatten,
    "ordinal_head": OrdinalHead,
}


def make_layer(spec: LayerSpec) -> Layer:
    try:
        cls = _LAYER_CLASSES[spec.kind]
    except KeyError:
        raise BuildError(f"{spec.name}: unknown layer kind {spec.kind!r}") from None
    return cls(spec)
