"""SGD with Nesterov momentum and Adam, as pure step functions plus a thin
stateful wrapper for training loops.

SGD follows the classic recurrence with a multiplicative learning-rate decay
lr_t = lr / (1 + decay * t), t counted from 1:

    v <- momentum * v - lr_t * g
    p <- p + momentum * v - lr_t * g      (nesterov)
    p <- p + v                            (plain momentum)

Adam is the standard bias-corrected first/second moment update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"            # "sgd" | "adam"
    lr: float = 0.01
    decay: float = 0.0
    momentum: float = 0.0
    nesterov: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in (0, 1)")


# paper-reported defaults for the two training regimes
SGD_FCN = OptimizerConfig(kind="sgd", lr=0.01, decay=1e-6, momentum=0.9, nesterov=True)
ADAM_DEFAULT = OptimizerConfig(kind="adam", lr=0.001, beta1=0.9, beta2=0.999,
                               epsilon=1e-8)


def init_state(params, cfg: OptimizerConfig):
    if cfg.kind == "sgd":
        return {"t": 0, "velocity": [np.zeros_like(p) for p in params]}
    return {"t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params]}


def sgd_step(params, grads, state, cfg: OptimizerConfig):
    """One Nesterov-momentum step; mutates ``state``, returns updated params."""
    if cfg.kind != "sgd":
        raise ValueError("sgd_step requires cfg.kind == 'sgd'")
    state["t"] += 1
    lr_t = cfg.lr / (1.0 + cfg.decay * state["t"])
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state["velocity"][i]
        v_new = cfg.momentum * v - lr_t * g
        state["velocity"][i] = v_new
        if cfg.nesterov:
            out.append(p + cfg.momentum * v_new - lr_t * g)
        else:
            out.append(p + v_new)
    return out


def adam_step(params, grads, state, cfg: OptimizerConfig):
    """One bias-corrected Adam step; mutates ``state``, returns updated params."""
    if cfg.kind != "adam":
        raise ValueError("adam_step requires cfg.kind == 'adam'")
    state["t"] += 1
    t = state["t"]
    lr_t = cfg.lr / (1.0 + cfg.decay * t) if cfg.decay else cfg.lr
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i] = cfg.beta1 * state["m"][i] + (1.0 - cfg.beta1) * g
        v = state["v"][i] = cfg.beta2 * state["v"][i] + (1.0 - cfg.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        out.append(p - lr_t * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
    return out


class Optimizer:
    """Applies steps in place to a network's parameter arrays."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.state = None

    def step(self, named_params, named_grads):
        params = [arr for _, _, arr in named_params]
        grads = [g for g in named_grads]
        if self.state is None:
            self.state = init_state(params, self.cfg)
        fn = sgd_step if self.cfg.kind == "sgd" else adam_step
        updated = fn(params, grads, self.state, self.cfg)
        for (_, _, arr), new in zip(named_params, updated):
            arr[...] = new.astype(arr.dtype, copy=False)

    def state_tensors(self):
        """Slot arrays in a stable order, for checkpointing."""
        if self.state is None:
            return []
        keys = ["velocity"] if self.cfg.kind == "sgd" else ["m", "v"]
        out = []
        for key in keys:
            for i, arr in enumerate(self.state[key]):
                out.append((f"{key}[{i}]", arr))
        return out
