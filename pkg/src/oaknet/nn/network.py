"""Network assembly, initialisation and forward/backward plumbing."""

from __future__ import annotations

import numpy as np

from .layers import make_layer
from .specs import NetworkSpec


class NonFiniteActivationError(RuntimeError):
    """Raised when training produces a non-finite loss; names the first layer
    whose activations went non-finite."""

    def __init__(self, layer_name, loss_value):
        self.layer_name = layer_name
        self.loss_value = loss_value
        super().__init__(f"non-finite loss ({loss_value}); first non-finite "
                         f"activation at layer {layer_name!r}")


class Network:
    """An ordered trunk plus named output heads.

    Heads consume either the trunk output or another head's output (the
    ordinal regression head reads the classification probabilities).
    A network with no heads exposes its trunk output under ``"out"``.
    """

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.trunk = [make_layer(s) for s in spec.trunk]
        self.heads = {name: (head.source, [make_layer(s) for s in head.layers])
                      for name, head in spec.heads.items()}
        self.rng = np.random.default_rng(seed)  # dropout noise during training

        init_rng = np.random.default_rng(seed)
        shapes = dict(spec.shape_chain())
        shape = tuple(spec.input_shape)
        for layer in self.trunk:
            layer.init_params(shape, init_rng, self.dtype)
            shape = shapes[layer.name]
        for name, (source, layers) in self.heads.items():
            shape = shapes[self.trunk[-1].name] if source == "trunk" else \
                shapes[self.heads[source][1][-1].name]
            for layer in layers:
                layer.init_params(shape, init_rng, self.dtype)
                shape = shapes[layer.name]

    # -- traversal ----------------------------------------------------------

    def all_layers(self):
        layers = list(self.trunk)
        for _, head_layers in self.heads.values():
            layers.extend(head_layers)
        return layers

    def layer(self, name):
        for layer in self.all_layers():
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def parameters(self):
        """Trainable arrays in declaration order as (layer, param, array)."""
        out = []
        for layer in self.all_layers():
            for pname, arr in layer.weights.items():
                out.append((layer.name, pname, arr))
        return out

    def state_tensors(self):
        """Non-trainable arrays (running statistics, fixed weights)."""
        out = []
        for layer in self.all_layers():
            for pname, arr in layer.state.items():
                out.append((layer.name, pname, arr))
        return out

    def parameter_count(self, trainable_only=True):
        n = sum(arr.size for _, _, arr in self.parameters())
        if not trainable_only:
            n += sum(arr.size for _, _, arr in self.state_tensors())
        return n

    # -- execution ----------------------------------------------------------

    def forward(self, x, training=False, probe=None):
        """Run the network; returns a dict of head outputs.

        ``probe``, when given, is a list collecting ``(layer_name, finite)``
        pairs for non-finite diagnostics.
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        expected = (x.shape[0],) + tuple(self.spec.input_shape)
        if x.shape != expected:
            raise ValueError(f"input shape {x.shape} does not match "
                             f"network input {expected}")
        for layer in self.trunk:
            x = layer.forward(x, training, self.rng)
            if probe is not None:
                probe.append((layer.name, bool(np.isfinite(x).all())))
        trunk_out = x
        outputs = {}
        for name, (source, layers) in self.heads.items():
            h = trunk_out if source == "trunk" else outputs[source]
            for layer in layers:
                h = layer.forward(h, training, self.rng)
                if probe is not None:
                    probe.append((layer.name, bool(np.isfinite(h).all())))
            outputs[name] = h
        if not self.heads:
            outputs["out"] = trunk_out
        return outputs

    def backward(self, output_grads):
        """Backpropagate ``{head_name: grad}``; fills layer grads, returns
        the gradient w.r.t. the network input."""
        for layer in self.all_layers():
            layer.zero_grads()
        if not self.heads:
            g = output_grads["out"]
            for layer in reversed(self.trunk):
                g = layer.backward(g)
            return g

        pending = dict(output_grads)
        trunk_grad = None
        for name in reversed(list(self.heads)):
            source, layers = self.heads[name]
            g = pending.pop(name, None)
            if g is None:
                continue
            for layer in reversed(layers):
                g = layer.backward(g)
            if source == "trunk":
                trunk_grad = g if trunk_grad is None else trunk_grad + g
            else:
                pending[source] = pending.get(source, 0) + g
        if trunk_grad is None:
            raise ValueError("no gradient reached the trunk")
        g = trunk_grad
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def l2_penalty(self):
        """Sum of l2 * sum(w^2) over flagged layers (kernel weights only)."""
        total = 0.0
        for layer in self.all_layers():
            if layer.l2 > 0.0 and "w" in layer.weights:
                w = layer.weights["w"]
                total += layer.l2 * float((w.astype(np.float64) ** 2).sum())
        return total

    def add_l2_gradients(self):
        for layer in self.all_layers():
            if layer.l2 > 0.0 and "w" in layer.weights and "w" in layer.grads:
                layer.grads["w"] = layer.grads["w"] + 2.0 * layer.l2 * layer.weights["w"]


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """Construct and Xavier-initialise a network from its spec.

    Conv and dense weights draw from uniform(-a, a) with
    a = sqrt(6 / (fan_in + fan_out)); biases start at zero.  The same seed
    always produces identical weights.
    """
    return Network(spec, seed=seed, dtype=dtype)
