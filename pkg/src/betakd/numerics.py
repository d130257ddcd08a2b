"""Stable primitives over logit and probability vectors.

Every function works on the last axis, so a ``(..., V)`` array is treated as
a batch of vectors. Everything is float64 and natural-log based.
"""
from __future__ import annotations

import numpy as np

PROB_EPS = 1e-12


def log_sum_exp(z):
    """Max-shifted ``log(sum(exp(z)))`` over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    return out[..., 0] if out.ndim > 1 else float(out[0])


def log_softmax(z, tau=1.0):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    m = np.max(s, axis=-1, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(z, tau=1.0):
    """Temperature-scaled softmax, ``exp(z/tau - LSE(z/tau))``."""
    return np.exp(log_softmax(z, tau))


def entropy(p):
    """Shannon entropy in nats with ``0 * log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -np.sum(terms, axis=-1)
    # rounding can leave a one-hot at -0.0 or a hair below zero
    return np.maximum(h, 0.0) if np.ndim(h) else max(float(h), 0.0)


def clamp_prob(p, eps=PROB_EPS):
    """Floor entries at ``eps`` and renormalise each vector to sum to one."""
    if not 0 < eps <= 1e-6:
        raise ValueError(f"eps must lie in (0, 1e-6], got {eps}")
    q = np.maximum(np.asarray(p, dtype=np.float64), eps)
    return q / np.sum(q, axis=-1, keepdims=True)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.logaddexp(0.0, x)
    return float(out) if out.ndim == 0 else out


def inverse_softplus(y):
    """Inverse of :func:`softplus` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    out = y + np.log(-np.expm1(-y))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def softmax_vjp(q, g, tau=1.0):
    """Pull a gradient ``g`` w.r.t. ``q = softmax(z / tau)`` back onto ``z``."""
    return q * (g - np.sum(q * g, axis=-1, keepdims=True)) / tau
