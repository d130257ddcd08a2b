"""Gibbs-prior weighting of distillation channels.

The teacher signal on a channel is treated as a prior
``p(a_s | a_t, beta) = exp(-beta * l(a_s; a_t)) / Z_beta``. With a Laplace
estimate of ``Z_beta`` the negative log-prior becomes
``beta * l - (d / 2) * log(beta)`` up to a constant, so each channel carries a
learnable precision ``beta`` whose optimum for a frozen loss is ``d / (2 l)``.

``beta`` is either a fixed weight, one learnable scalar per channel
(task level), or the output of a small network on pooled student features
(instance level).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    NonPositiveBetaError,
    NonPositiveDeterminantError,
    NonPositiveLossError,
    WrongModeError,
)
from .numerics import inverse_softplus, sigmoid, softplus

BETA_MIN = 1e-4
BETA_MAX = 1e4


class Mode(str, enum.Enum):
    FIXED = "fixed"
    TASK = "task"
    INSTANCE = "instance"


class BetaNet:
    """Two-layer perceptron ``x -> tanh(x W1 + b1) W2 + b2 -> softplus + beta_min``.

    Parameters live in ``self.params`` (``w1``, ``b1``, ``w2``, ``b2``) so an
    optimizer can update them in place.
    """

    def __init__(self, input_dim, hidden_dim=32, seed=0, init_std=0.08, init_beta=1.0, beta_min=BETA_MIN):
        rng = np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.beta_min = float(beta_min)
        self.params = {
            "w1": rng.normal(0.0, init_std, size=(self.input_dim, self.hidden_dim)),
            "b1": np.zeros(self.hidden_dim),
            "w2": rng.normal(0.0, init_std, size=(self.hidden_dim, 1)),
            "b2": np.array([inverse_softplus(init_beta - self.beta_min)]),
        }

    @classmethod
    def zeros(cls, input_dim, hidden_dim=32, beta_min=BETA_MIN):
        net = cls(input_dim, hidden_dim, beta_min=beta_min)
        for v in net.params.values():
            v[...] = 0.0
        return net

    @property
    def n_params(self):
        return self.input_dim * self.hidden_dim + 2 * self.hidden_dim + 1

    def forward(self, x):
        """Return ``(beta, cache)`` for inputs of shape ``(B, D)`` or ``(D,)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        p = self.params
        h = np.tanh(x @ p["w1"] + p["b1"])
        raw = (h @ p["w2"])[..., 0] + p["b2"][0]
        beta = softplus(raw) + self.beta_min
        return beta, (x, h, raw)

    def backward(self, cache, dbeta):
        """Gradients of ``sum(dbeta * beta)`` w.r.t. parameters and input."""
        x, h, raw = cache
        p = self.params
        draw = np.asarray(dbeta, dtype=np.float64) * sigmoid(raw)
        x2 = np.atleast_2d(x)
        h2 = np.atleast_2d(h)
        draw2 = np.atleast_1d(draw)
        dh = draw2[:, None] * p["w2"][:, 0][None, :]
        da = dh * (1.0 - h2 * h2)
        grads = {
            "w1": x2.T @ da,
            "b1": da.sum(axis=0),
            "w2": (h2.T @ draw2)[:, None],
            "b2": np.array([draw2.sum()]),
        }
        dx = da @ p["w1"].T
        return grads, dx.reshape(np.shape(x))


@dataclass
class BetaChannel:
    """Uncertainty state of one supervision channel.

    ``dim_d`` is the effective dimension in the ``-(d/2) log beta`` term.
    """

    name: str
    mode: Mode
    dim_d: float
    fixed_value: float | None = None
    raw_param: np.ndarray | None = None
    net: BetaNet | None = None
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if not self.dim_d > 0:
            raise ValueError("dim_d must be positive")
        if self.mode is Mode.FIXED and not (self.fixed_value and self.fixed_value > 0):
            raise NonPositiveBetaError(f"channel {self.name}: fixed beta must be positive")
        if self.mode is Mode.TASK and self.raw_param is None:
            self.raw_param = np.array([inverse_softplus(1.0 - self.beta_min)])
        if self.mode is Mode.INSTANCE and self.net is None:
            raise ValueError(f"channel {self.name}: instance mode needs a BetaNet")

    @classmethod
    def fixed(cls, name, value, dim_d):
        return cls(name, Mode.FIXED, dim_d, fixed_value=float(value))

    @classmethod
    def task(cls, name, dim_d, init_beta=1.0, beta_min=BETA_MIN):
        raw = np.array([inverse_softplus(init_beta - beta_min)])
        return cls(name, Mode.TASK, dim_d, raw_param=raw, beta_min=beta_min)

    @classmethod
    def instance(cls, name, dim_d, net):
        return cls(name, Mode.INSTANCE, dim_d, net=net, beta_min=net.beta_min)

    @property
    def learnable(self):
        return self.mode is not Mode.FIXED

    def parameters(self):
        if self.mode is Mode.TASK:
            return {"raw": self.raw_param}
        if self.mode is Mode.INSTANCE:
            return self.net.params
        return {}


def beta_task(channel):
    """Task-level ``beta = softplus(raw) + beta_min`` and ``d beta / d raw``.

    The effective value is clipped at ``beta_max``; the derivative is zero there.
    """
    if channel.mode is not Mode.TASK:
        raise WrongModeError(f"channel {channel.name} is in {channel.mode.value} mode")
    raw = float(channel.raw_param[0])
    beta = softplus(raw) + channel.beta_min
    if beta > channel.beta_max:
        return channel.beta_max, 0.0
    return beta, sigmoid(raw)


def beta_instance(net, pooled_features):
    """Instance-level beta for one pooled feature vector.

    Returns ``(beta, param_grads, input_grad)`` where the gradients are of
    ``beta`` itself. Training code detaches the input, so ``input_grad`` is
    informational.
    """
    x = np.asarray(pooled_features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("expected a single feature vector")
    beta, cache = net.forward(x)
    grads, dx = net.backward(cache, 1.0)
    return float(beta), grads, dx


def gibbs_prior_density(a_s, a_t, beta, energy_fn, normalizer):
    """``exp(-beta * l(a_s; a_t)) / normalizer``.

    ``energy_fn(a_s, a_t)`` returns the energy; a
    :class:`~betakd.divergences.DivergenceSpec` is accepted as well.
    """
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    value = _energy_value(energy_fn, a_s, a_t)
    return np.exp(-beta * value) / normalizer


def _energy_value(energy_fn, a_s, a_t):
    if callable(energy_fn):
        return energy_fn(a_s, a_t)
    from .divergences import energy

    return energy(a_t, a_s, energy_fn)[0]


def laplace_log_z(beta, hessian_det, d, min_energy=0.0):
    """Laplace estimate of ``log Z_beta`` around the energy minimiser."""
    if not hessian_det > 0:
        raise NonPositiveDeterminantError(f"Hessian determinant must be positive, got {hessian_det}")
    return (
        -beta * min_energy
        - 0.5 * d * math.log(beta)
        + 0.5 * d * math.log(2.0 * math.pi)
        - 0.5 * math.log(hessian_det)
    )


def beta_closed_form(loss, d):
    """Minimiser ``d / (2 l)`` of ``beta * l - (d/2) log beta`` over ``beta > 0``."""
    if not loss > 0:
        raise NonPositiveLossError("optimal beta diverges when the loss is not positive")
    return d / (2.0 * loss)


@dataclass
class ChannelTerm:
    name: str
    loss: float
    beta: float
    weighted: float
    regularizer: float
    # d total / d beta, per sample when beta was per sample
    dtotal_dbeta: np.ndarray = field(repr=False)


@dataclass
class ObjectiveBreakdown:
    ce: float
    per_channel: list
    total: float

    @property
    def unregularized_total(self):
        return self.ce + sum(t.weighted for t in self.per_channel)

    def multipliers(self):
        return {t.name: t.beta for t in self.per_channel}


def _mean(x):
    return float(np.mean(x))


def assemble_objective(ce, channels, drop_fixed_regularizer=False):
    """Combine CE with weighted channel losses and log-beta regularisers.

    ``ce`` is a LossResult, a float, or per-sample array. Each entry of
    ``channels`` is ``(BetaChannel, loss, beta)`` where ``loss`` and ``beta``
    are scalars or matching per-sample arrays. Per-sample inputs are averaged:
    ``weighted = mean(beta * l)`` and ``regularizer = mean(-(d/2) log beta)``.

    With ``drop_fixed_regularizer`` fixed channels contribute ``lambda * l``
    only, which is the classic ``CE + lambda * KD`` objective.
    """
    ce_value = _mean(getattr(ce, "value", ce))
    terms = []
    for channel, loss, beta in channels:
        loss = np.asarray(getattr(loss, "value", loss), dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        if np.any(beta <= 0):
            raise NonPositiveBetaError(f"channel {channel.name}: beta must be positive")
        d = channel.dim_d
        reg = -0.5 * d * np.log(beta)
        if drop_fixed_regularizer and channel.mode is Mode.FIXED:
            reg = np.zeros_like(reg)
        if beta.ndim:
            dbeta = (np.broadcast_to(loss, beta.shape) - d / (2.0 * beta)) / beta.shape[0]
        else:
            dbeta = np.asarray(_mean(loss) - d / (2.0 * beta))
        terms.append(
            ChannelTerm(
                name=channel.name,
                loss=_mean(loss),
                beta=_mean(beta),
                weighted=_mean(beta * loss),
                regularizer=_mean(reg),
                dtotal_dbeta=dbeta,
            )
        )
    total = ce_value + sum(t.weighted + t.regularizer for t in terms)
    return ObjectiveBreakdown(ce=ce_value, per_channel=terms, total=total)
