"""Teacher/student discrepancy energies with analytic student-side gradients.

Every energy is evaluated on the last axis and broadcasts over any leading
batch axes. Probability-level kinds see ``p = softmax(z_t / tau_t)`` and
``q = softmax(z_s / tau_s)``; their gradient w.r.t. ``q`` is pulled back onto
the student logits through the softmax Jacobian. Logit-level kinds act on the
raw logits, feature kinds on (already projected) feature vectors.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatchError, TokenOutOfRangeError, ZeroVectorError
from .numerics import PROB_EPS, clamp_prob, log_softmax, softmax, softmax_vjp

DEFAULT_SKEW_LAMBDA = 0.1
NORM_FLOOR = 1e-12


class Kind(str, enum.Enum):
    FKL = "fkl"
    RKL = "rkl"
    SKEW_FKL = "skew_fkl"
    SKEW_RKL = "skew_rkl"
    JS = "js"
    TVD = "tvd"
    MSE_LOGITS = "mse_logits"
    MSE_PROBS = "mse_probs"
    COSINE_LOGITS = "cosine_logits"
    COSINE_PROBS = "cosine_probs"
    FEATURE_COSINE = "feature_cosine"
    FEATURE_MSE = "feature_mse"

    @property
    def is_skew(self):
        return self in (Kind.SKEW_FKL, Kind.SKEW_RKL)

    @property
    def is_feature(self):
        return self in (Kind.FEATURE_COSINE, Kind.FEATURE_MSE)

    @property
    def is_logit(self):
        return self in (Kind.MSE_LOGITS, Kind.COSINE_LOGITS)

    @property
    def is_prob(self):
        return not (self.is_feature or self.is_logit)


# the ten token-level energies that take part in sweeps
TOKEN_KINDS = tuple(k for k in Kind if not k.is_feature)
FEATURE_KINDS = (Kind.FEATURE_COSINE, Kind.FEATURE_MSE)


@dataclass(frozen=True)
class DivergenceSpec:
    """Which energy to use and with which temperatures / skew weight."""

    kind: Kind
    skew_lambda: float | None = None
    teacher_temp: float = 1.0
    student_temp: float = 1.0

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind.is_skew:
            lam = DEFAULT_SKEW_LAMBDA if self.skew_lambda is None else float(self.skew_lambda)
            if not 0.0 <= lam <= 1.0:
                raise ValueError(f"skew_lambda must lie in [0, 1], got {lam}")
            object.__setattr__(self, "skew_lambda", lam)
        elif self.skew_lambda is not None:
            raise ValueError(f"skew_lambda only applies to skew kinds, not {kind.value}")
        for name in ("teacher_temp", "student_temp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# probability-level energies: value and d value / d q


def _kl_terms(a, b):
    # a * (ln a - ln b); both arguments are clamped so the logs are finite
    return a * (np.log(a) - np.log(b))


def prob_energy(kind, p, q, skew_lambda=None):
    """Energy between teacher probs ``p`` and student probs ``q``.

    Returns ``(value, dvalue/dq)``; both broadcast over leading axes.
    """
    kind = Kind(kind)
    if kind is Kind.COSINE_PROBS:
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        return _cosine(p, q)
    p = clamp_prob(p, PROB_EPS)
    q = clamp_prob(q, PROB_EPS)
    if kind is Kind.FKL:
        value = np.sum(_kl_terms(p, q), axis=-1)
        g = -p / q
    elif kind is Kind.RKL:
        value = np.sum(_kl_terms(q, p), axis=-1)
        g = np.log(q) - np.log(p) + 1.0
    elif kind is Kind.SKEW_FKL:
        lam = DEFAULT_SKEW_LAMBDA if skew_lambda is None else skew_lambda
        m = lam * p + (1.0 - lam) * q
        value = np.sum(_kl_terms(p, m), axis=-1)
        g = -(1.0 - lam) * p / m
    elif kind is Kind.SKEW_RKL:
        lam = DEFAULT_SKEW_LAMBDA if skew_lambda is None else skew_lambda
        m = lam * q + (1.0 - lam) * p
        value = np.sum(_kl_terms(q, m), axis=-1)
        g = np.log(q) - np.log(m) + 1.0 - lam * q / m
    elif kind is Kind.JS:
        m = 0.5 * (p + q)
        value = 0.5 * np.sum(_kl_terms(p, m), axis=-1) + 0.5 * np.sum(_kl_terms(q, m), axis=-1)
        g = 0.5 * (np.log(q) - np.log(m))
    elif kind is Kind.TVD:
        diff = q - p
        value = 0.5 * np.sum(np.abs(diff), axis=-1)
        g = 0.5 * np.sign(diff)
    elif kind is Kind.MSE_PROBS:
        diff = q - p
        v = p.shape[-1]
        value = np.sum(diff * diff, axis=-1) / v
        g = 2.0 * diff / v
    else:
        raise ValueError(f"{kind.value} is not a probability-level energy")
    return value, g


def _cosine(a, b):
    """``1 - cos(a, b)`` and its gradient w.r.t. ``b``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na < NORM_FLOOR) or np.any(nb < NORM_FLOOR):
        raise ZeroVectorError("cosine distance is undefined for a (numerically) zero vector")
    ua = a / na
    ub = b / nb
    cos = np.sum(ua * ub, axis=-1, keepdims=True)
    grad = -(ua - cos * ub) / nb
    # 1 - cos == |ua - ub|^2 / 2, without the cancellation near a match
    diff = ua - ub
    return 0.5 * np.sum(diff * diff, axis=-1), grad


def _mse(a, b):
    diff = b - a
    n = a.shape[-1]
    return np.sum(diff * diff, axis=-1) / n, 2.0 * diff / n


# ---------------------------------------------------------------------------
# batched evaluation


def energy(teacher, student, spec):
    """Batched energy and gradient w.r.t. the student activation.

    ``teacher`` and ``student`` are logits for token kinds and feature vectors
    for feature kinds; shapes must match.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise LengthMismatchError(f"teacher shape {teacher.shape} != student shape {student.shape}")
    kind = spec.kind
    if kind in (Kind.MSE_LOGITS, Kind.FEATURE_MSE):
        return _mse(teacher, student)
    if kind in (Kind.COSINE_LOGITS, Kind.FEATURE_COSINE):
        return _cosine(teacher, student)
    p = softmax(teacher, spec.teacher_temp)
    q = softmax(student, spec.student_temp)
    value, gq = prob_energy(kind, p, q, spec.skew_lambda)
    return value, softmax_vjp(q, gq, spec.student_temp)


def _per_token(kind, teacher_logits, student_logits, spec=None, **kw):
    spec = spec if spec is not None else DivergenceSpec(kind, **kw)
    if spec.kind is not Kind(kind):
        raise ValueError(f"spec kind {spec.kind.value} does not match {Kind(kind).value}")
    value, grad = energy(teacher_logits, student_logits, spec)
    return LossResult(float(value), grad)


def fkl(teacher_logits, student_logits, spec=None, **kw):
    """Forward KL ``sum p ln(p/q)``; gradient ``(q - p) / tau_s``."""
    return _per_token(Kind.FKL, teacher_logits, student_logits, spec, **kw)


def rkl(teacher_logits, student_logits, spec=None, **kw):
    """Reverse KL ``sum q ln(q/p)``."""
    return _per_token(Kind.RKL, teacher_logits, student_logits, spec, **kw)


def skew_fkl(teacher_logits, student_logits, spec=None, **kw):
    """``KL(p || lam p + (1 - lam) q)``."""
    return _per_token(Kind.SKEW_FKL, teacher_logits, student_logits, spec, **kw)


def skew_rkl(teacher_logits, student_logits, spec=None, **kw):
    """``KL(q || lam q + (1 - lam) p)``, the student-side mirror of :func:`skew_fkl`."""
    return _per_token(Kind.SKEW_RKL, teacher_logits, student_logits, spec, **kw)


def js(teacher_logits, student_logits, spec=None, **kw):
    return _per_token(Kind.JS, teacher_logits, student_logits, spec, **kw)


def tvd(teacher_logits, student_logits, spec=None, **kw):
    """Total variation; the subgradient at ties is zero."""
    return _per_token(Kind.TVD, teacher_logits, student_logits, spec, **kw)


def mse_logits(teacher_logits, student_logits, spec=None, **kw):
    return _per_token(Kind.MSE_LOGITS, teacher_logits, student_logits, spec, **kw)


def mse_probs(teacher_logits, student_logits, spec=None, **kw):
    return _per_token(Kind.MSE_PROBS, teacher_logits, student_logits, spec, **kw)


def cosine_logits(teacher_logits, student_logits, spec=None, **kw):
    return _per_token(Kind.COSINE_LOGITS, teacher_logits, student_logits, spec, **kw)


def cosine_probs(teacher_logits, student_logits, spec=None, **kw):
    """Cosine distance between unclamped teacher and student probabilities."""
    return _per_token(Kind.COSINE_PROBS, teacher_logits, student_logits, spec, **kw)


def feature_loss(f_t, f_s, kind):
    """Cosine or MSE between projected teacher and student features."""
    kind = Kind(kind)
    if not kind.is_feature:
        raise ValueError(f"{kind.value} is not a feature energy")
    value, grad = energy(f_t, f_s, DivergenceSpec(kind))
    return LossResult(float(value), grad)


def sequence_loss(teacher_logits, student_logits, spec):
    """Mean per-token energy over ``L_y`` target positions."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise LengthMismatchError(
            f"expected equal (L, V) sequences, got {teacher_logits.shape} and {student_logits.shape}"
        )
    n = teacher_logits.shape[0]
    if n < 1:
        raise LengthMismatchError("sequence must contain at least one position")
    values, grads = energy(teacher_logits, student_logits, spec)
    return LossResult(float(np.mean(values)), grads / n)


def per_sequence_loss(teacher_logits, student_logits, spec):
    """Batched :func:`sequence_loss` over ``(B, L, V)`` arrays.

    Returns per-sequence values ``(B,)`` and gradients ``(B, L, V)`` of each
    sequence's own mean.
    """
    values, grads = energy(teacher_logits, student_logits, spec)
    n = values.shape[-1]
    return np.mean(values, axis=-1), grads / n


def _check_targets(targets, vocab):
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenOutOfRangeError(f"target ids must lie in [0, {vocab})")
    return targets.astype(np.int64)


def per_sequence_cross_entropy(student_logits, targets, tau=1.0):
    """Hard-label CE for ``(B, L, V)`` logits; returns ``(B,)`` and grads."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    targets = _check_targets(targets, student_logits.shape[-1])
    logq = log_softmax(student_logits, tau)
    picked = np.take_along_axis(logq, targets[..., None], axis=-1)[..., 0]
    n = targets.shape[-1]
    grad = np.exp(logq)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return -np.mean(picked, axis=-1), grad / (tau * n)


def cross_entropy(student_logits, targets, tau=1.0):
    """``-(1/L) sum_n log softmax(z_n / tau)[y_n]`` for one sequence."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if student_logits.ndim != 2 or len(targets) != student_logits.shape[0]:
        raise LengthMismatchError("need one target id per logit vector")
    values, grad = per_sequence_cross_entropy(student_logits[None], np.asarray(targets)[None], tau)
    return LossResult(float(values[0]), grad[0])


# ---------------------------------------------------------------------------
# simplex surfaces


def barycentric_grid(grid_n):
    """All points ``(i, j, k) / n`` with ``i + j + k = n``; ``(n+1)(n+2)/2`` rows."""
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    rows = [(i, j, grid_n - i - j) for i in range(grid_n + 1) for j in range(grid_n + 1 - i)]
    return np.asarray(rows, dtype=np.float64) / grid_n


def surface_energy(kind, anchor, points, skew_lambda=None):
    """Energy of each student distribution in ``points`` against ``anchor``.

    Logit-level kinds use centred log-probabilities as the logits.
    """
    kind = Kind(kind)
    anchor = np.broadcast_to(np.asarray(anchor, dtype=np.float64), np.shape(points))
    if kind.is_prob:
        lam = skew_lambda
        if kind.is_skew and lam is None:
            lam = DEFAULT_SKEW_LAMBDA
        return prob_energy(kind, anchor, points, lam)[0]
    if kind.is_logit:
        zt = np.log(clamp_prob(anchor))
        zs = np.log(clamp_prob(points))
        zt = zt - zt.mean(axis=-1, keepdims=True)
        zs = zs - zs.mean(axis=-1, keepdims=True)
        return energy(zt, zs, DivergenceSpec(kind))[0]
    raise ValueError(f"{kind.value} has no simplex surface")


def simplex_surface(spec, anchor, grid_n=60):
    """Evaluate the energy over a barycentric grid of the 2-simplex.

    ``anchor`` is the fixed teacher distribution (length 3). Returns
    ``(points, values)`` with ``points`` of shape ``(N, 3)``.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != (3,) or abs(anchor.sum() - 1.0) > 1e-9 or np.any(anchor < 0):
        raise ValueError("anchor must be a probability vector of length 3")
    points = barycentric_grid(grid_n)
    return points, surface_energy(spec.kind, anchor, points, spec.skew_lambda)


def write_surface_csv(path, points, values):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["b0", "b1", "b2", "loss"])
        for b, v in zip(points, values):
            writer.writerow([repr(float(b[0])), repr(float(b[1])), repr(float(b[2])), repr(float(v))])
