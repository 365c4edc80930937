"""First-order optimizers over a ``dict[str, ndarray]`` of parameters."""

from __future__ import annotations

import numpy as np

KINDS = ("sgd", "adam", "adamw", "rmsprop")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
RMSPROP_ALPHA = 0.99
RMSPROP_EPS = 1e-8


def optimizer_step(params: dict, grads: dict, state: dict, kind: str, lr: float, weight_decay: float = 0.0):
    """Apply one update in place and return ``(params, state)``.

    ``state`` holds per-parameter moments plus the step counter ``"t"``.
    Weight decay is an L2 term added to the gradient, except for AdamW where
    it is decoupled from the adaptive step.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
    state["t"] = t = state.get("t", 0) + 1
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {np.shape(p)}")
        if weight_decay and kind != "adamw":
            g = g + weight_decay * p
        if kind == "sgd":
            params[name] = p - lr * g
        elif kind == "rmsprop":
            v = state.setdefault(("v", name), np.zeros_like(g))
            v *= RMSPROP_ALPHA
            v += (1.0 - RMSPROP_ALPHA) * g * g
            params[name] = p - lr * g / (np.sqrt(v) + RMSPROP_EPS)
        else:
            b1, b2 = ADAM_BETAS
            m = state.setdefault(("m", name), np.zeros_like(g))
            v = state.setdefault(("v", name), np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            if kind == "adamw" and weight_decay:
                p = p * (1.0 - lr * weight_decay)
            params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params, state


class Optimizer:
    def __init__(self, kind: str = "rmsprop", lr: float = 1e-3, weight_decay: float = 0.0):
        if kind not in KINDS:
            raise ValueError(f"unknown optimizer {kind!r}; expected one of {KINDS}")
        self.kind, self.lr, self.weight_decay = kind, lr, weight_decay
        self.state: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        return optimizer_step(params, grads, self.state, self.kind, self.lr, self.weight_decay)[0]
