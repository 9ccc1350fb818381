"""Single training step: forward, loss with L2 terms, backward, update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import loss_bce, loss_cce, loss_joint, loss_mse
from .network import Network, NonFiniteActivationError
from .optim import Optimizer

LOSS_KINDS = ("bce", "cce", "mse", "joint", "ordinal")


@dataclass(frozen=True)
class LossSpec:
    """Which objective drives training and, for two-headed modes, the
    regression weight of the convex combination."""

    kind: str
    w_reg: float = 0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.w_reg <= 1.0:
            raise ValueError(f"w_reg must be in [0, 1], got {self.w_reg}")


def compute_loss(outputs, batch, loss_spec: LossSpec):
    """Loss value, per-component report and per-head gradients."""
    kind = loss_spec.kind
    if kind == "bce":
        value, grad = loss_bce(outputs["out"], batch["mask"])
        return value, {"bce": value}, {"out": grad}
    if kind == "cce":
        value, grad = loss_cce(outputs["clsf"], batch["labels"])
        return value, {"cce": value}, {"clsf": grad}
    if kind == "mse":
        value, grad = loss_mse(outputs["reg"], batch["grades"])
        return value, {"mse": value}, {"reg": grad}
    # joint and ordinal: (1 - w) * CCE on the softmax head + w * MSE on the
    # regression head; for ordinal the regression head reads the probabilities
    total, cce_v, mse_v, dprobs, dreg = loss_joint(
        outputs["clsf"], batch["labels"], outputs["reg"], batch["grades"],
        loss_spec.w_reg)
    return total, {"cce": cce_v, "mse": mse_v}, {"clsf": dprobs, "reg": dreg}


def train_step(network: Network, batch, loss_spec: LossSpec,
               optimizer: Optimizer):
    """One forward + backward + parameter update in training mode.

    ``batch`` maps "x" to the input block and the targets required by the
    loss ("mask", "labels", "grades").  Returns the loss report including
    any L2 penalty.  A non-finite loss aborts with the first offending layer.
    """
    rng_state = network.rng.bit_generator.state
    outputs = network.forward(batch["x"], training=True)
    value, parts, grads = compute_loss(outputs, batch, loss_spec)
    l2 = network.l2_penalty()
    total = value + l2

    if not np.isfinite(total):
        network.rng.bit_generator.state = rng_state
        probe = []
        network.forward(batch["x"], training=True, probe=probe)
        bad = next((name for name, ok in probe if not ok), "<loss>")
        raise NonFiniteActivationError(bad, total)

    network.backward(grads)
    network.add_l2_gradients()
    named = network.parameters()
    named_grads = [layer_grads(network, lname, pname) for lname, pname, _ in named]
    optimizer.step(named, named_grads)

    report = {"total": total, "l2": l2}
    report.update(parts)
    return report


def layer_grads(network: Network, layer_name, param_name):
    layer = network.layer(layer_name)
    g = layer.grads.get(param_name)
    if g is None:
        g = np.zeros_like(layer.weights[param_name])
    return g


def evaluate_loss(network: Network, batch, loss_spec: LossSpec):
    """Loss report without any update (inference mode, dropout off)."""
    outputs = network.forward(batch["x"], training=False)
    value, parts, _ = compute_loss(outputs, batch, loss_spec)
    report = {"total": value + network.l2_penalty()}
    report.update(parts)
    return report, outputs
