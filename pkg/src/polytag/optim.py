"""SGD and Adam over named Parameters.

Frozen parameters are skipped entirely: the optimizer never touches their
Tensor, so their bytes are bit-identical across any number of steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class Optimizer:
    """Applies one update per `step`; Adam state is keyed by parameter name."""

    def __init__(self, params, config):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.config = config
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, grads):
        cfg = self.config
        self._t += 1
        for p in self.params:
            if not p.trainable:
                continue
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.value.data.shape:
                raise ValueError(f"gradient shape mismatch for {p.name}")
            if cfg.kind == "sgd":
                new = p.value.data - cfg.lr * g
            else:
                m = self._m.get(p.name)
                v = self._v.get(p.name)
                if m is None:
                    m = np.zeros_like(g)
                    v = np.zeros_like(g)
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
                self._m[p.name] = m
                self._v[p.name] = v
                mhat = m / (1.0 - cfg.beta1 ** self._t)
                vhat = v / (1.0 - cfg.beta2 ** self._t)
                new = p.value.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            p.value = Tensor(new)


def optimizer_step(params, grads, config, optimizer=None):
    """One functional update step; returns the (stateful) optimizer."""
    if optimizer is None:
        optimizer = Optimizer(params, config)
    optimizer.step(grads)
    return optimizer
