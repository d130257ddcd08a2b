"""Plain SGD and Adam over dictionaries of numpy arrays (updated in place)."""
from __future__ import annotations

import numpy as np


class Optimizer:
    """``kind`` is ``"adam"`` or ``"sgd"``; moments are kept per parameter name."""

    def __init__(self, kind="adam", lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        if self.lr == 0.0:
            return
        if self.kind == "sgd":
            for k, g in grads.items():
                params[k] -= self.lr * g
            return
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
