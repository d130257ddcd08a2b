"""Brute-force checks of the Gibbs-prior derivation.

* :func:`verify_posterior_mode` scans a discretised activation space and confirms
  that the posterior mode coincides with the minimiser of
  ``-log p(y | a) + beta * l(a; a_t)``.
* :func:`verify_laplace` compares the Laplace estimate of ``log Z_beta`` with
  adaptive quadrature in one or two dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .beta import laplace_log_z
from .divergences import DivergenceSpec, Kind, energy
from .errors import QuadratureNotConvergedError
from .numerics import log_softmax, softmax

# relative gap under which two scores count as the same optimum; the
# softmax objectives are constant along the all-ones direction, so every
# optimum on a logit grid comes with exact (up to rounding) ties
TIE_RTOL = 1e-9


def logit_grid(vocab=3, n=51, low=-4.0, high=4.0):
    """Cartesian grid of ``n ** vocab`` logit vectors."""
    axis = np.linspace(low, high, n)
    mesh = np.meshgrid(*([axis] * vocab), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _first_within(scores, best, maximise):
    scale = max(abs(best), 1e-300)
    if maximise:
        hits = np.flatnonzero(scores >= best - TIE_RTOL * scale)
    else:
        hits = np.flatnonzero(scores <= best + TIE_RTOL * scale)
    return int(hits[0])


def verify_posterior_mode(grid, y, a_t, beta, spec):
    """Return ``(argmax posterior, argmin objective)`` over ``grid``.

    The posterior is evaluated in probability space as
    ``softmax(a)[y] * exp(-beta * l(a; a_t))``; the objective in log space.
    Ties (shift-equivalent logits) resolve to the lowest grid index on both
    sides.
    """
    grid = np.asarray(grid, dtype=np.float64)
    a_t = np.broadcast_to(np.asarray(a_t, dtype=np.float64), grid.shape)
    ell = energy(a_t, grid, spec)[0]
    likelihood = softmax(grid)[:, y]
    posterior = likelihood * np.exp(-beta * ell)
    objective = -log_softmax(grid)[:, y] + beta * ell
    i_post = _first_within(posterior, posterior.max(), maximise=True)
    i_obj = _first_within(objective, objective.min(), maximise=False)
    return i_post, i_obj


# ---------------------------------------------------------------------------
# Laplace check


@dataclass(frozen=True)
class QuadraticEnergy:
    """``l(a) = 0.5 (a - c)^T H (a - c) + offset`` in one or two dimensions."""

    hessian: tuple
    center: tuple = None
    offset: float = 0.0

    @property
    def H(self):
        return np.atleast_2d(np.asarray(self.hessian, dtype=np.float64))

    @property
    def dim(self):
        return self.H.shape[0]

    @property
    def minimizer(self):
        if self.center is None:
            return np.zeros(self.dim)
        return np.atleast_1d(np.asarray(self.center, dtype=np.float64))

    def __call__(self, a):
        diff = np.atleast_1d(np.asarray(a, dtype=np.float64)) - self.minimizer
        return 0.5 * float(diff @ self.H @ diff) + self.offset

    def hessian_at_min(self):
        return self.H

    @property
    def min_energy(self):
        return self.offset

    def tail_slope(self):
        return None


@dataclass(frozen=True)
class LogitGapEnergy:
    """Forward KL restricted to the free logits of a small vocabulary.

    The student logits are ``(a_1, ..., a_{V-1}, 0)`` and the teacher logits
    ``(g_1, ..., g_{V-1}, 0)``; the energy is minimised (at zero) when
    ``a == g``. It is evaluated with exact log-probabilities rather than the
    clamped training kernel: the clamp caps the energy far from the minimiser,
    and a bounded energy has no finite partition function on an unbounded
    domain. Reverse KL and JS are bounded even without the clamp, so only the
    forward direction is offered.
    """

    teacher_gaps: tuple = (1.0,)

    @property
    def dim(self):
        return len(self.teacher_gaps)

    @property
    def minimizer(self):
        return np.asarray(self.teacher_gaps, dtype=np.float64)

    def _logits(self, a):
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        return np.concatenate([a, np.zeros(a.shape[:-1] + (1,))], axis=-1)

    def __call__(self, a):
        # plain floats: quadrature calls this hundreds of thousands of times
        a = [float(x) for x in np.atleast_1d(a)] + [0.0]
        g = list(self.teacher_gaps) + [0.0]
        ma, mg = max(a), max(g)
        lse_a = ma + math.log(sum(math.exp(x - ma) for x in a))
        lse_g = mg + math.log(sum(math.exp(x - mg) for x in g))
        return sum(math.exp(gi - lse_g) * ((gi - lse_g) - (ai - lse_a)) for gi, ai in zip(g, a))

    @property
    def min_energy(self):
        return 0.0

    def hessian_at_min(self):
        # Fisher information diag(q) - q q^T over the free logits
        q = softmax(self._logits(self.minimizer))[:-1]
        return np.diag(q) - np.outer(q, q)


@dataclass
class LaplaceCheck:
    quadrature_log_z: float
    laplace_log_z: float
    abs_error: float


def _bounds(energy_fn, center, beta, tail=1e-10):
    """Half-widths per axis where ``exp(-beta * (l - l_min))`` is negligible."""
    dim = len(center)
    l0 = energy_fn(center)
    widths = []
    for k in range(dim):
        half = 1.0
        for _ in range(60):
            ok = True
            for sign in (-1.0, 1.0):
                a = center.copy()
                a[k] += sign * half
                if beta * (energy_fn(a) - l0) < -math.log(tail) + 10.0:
                    ok = False
            if ok:
                break
            half *= 2.0
        else:
            raise QuadratureNotConvergedError(
                f"energy does not grow enough along axis {k} to bound the tail mass below {tail:g}"
            )
        widths.append(half)
    return widths


def quadrature_log_z(energy_fn, beta, center, rtol=1e-11):
    """``log int exp(-beta * l(a)) da`` by adaptive quadrature (1-D or 2-D)."""
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    l0 = energy_fn(center)
    widths = _bounds(energy_fn, center, beta)
    # factor out exp(-beta * l0) so the integrand peaks at one
    if len(center) == 1:
        f = lambda a: math.exp(-beta * (energy_fn(np.array([a])) - l0))  # noqa: E731
        lo, hi = center[0] - widths[0], center[0] + widths[0]
        val, err = integrate.quad(f, lo, hi, points=[center[0]], epsabs=0.0, epsrel=rtol, limit=500)
    elif len(center) == 2:
        f = lambda a2, a1: math.exp(-beta * (energy_fn(np.array([a1, a2])) - l0))  # noqa: E731
        val, err = integrate.dblquad(
            f,
            center[0] - widths[0],
            center[0] + widths[0],
            center[1] - widths[1],
            center[1] + widths[1],
            epsabs=0.0,
            epsrel=rtol,
        )
    else:
        raise ValueError("quadrature is limited to one or two dimensions")
    if not val > 0 or err > 1e-7 * val:
        raise QuadratureNotConvergedError(f"quadrature estimate {val} with error {err}")
    return math.log(val) - beta * l0


def verify_laplace(energy_fn, beta):
    """Compare quadrature and Laplace values of ``log Z_beta``."""
    H = energy_fn.hessian_at_min()
    det = float(np.linalg.det(H))
    quad = quadrature_log_z(energy_fn, beta, energy_fn.minimizer)
    lap = laplace_log_z(beta, det, energy_fn.dim, energy_fn.min_energy)
    return LaplaceCheck(quad, lap, abs(quad - lap))


# ---------------------------------------------------------------------------
# canned cases for the command line


@dataclass
class CaseResult:
    check: str
    case: str
    value: float
    tolerance: str
    passed: bool


POSTERIOR_MODE_KINDS = (Kind.FKL, Kind.RKL, Kind.JS)
LAPLACE_BETAS = (1.0, 10.0, 100.0)


def posterior_mode_cases(seed=0, n_random=10, grid_n=51):
    """Random ``(y, a_t, beta, kind)`` draws plus the two beta limits.

    Teacher logits are drawn from the grid itself so the ``beta -> inf`` case
    has an exact zero-energy point to collapse onto.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    axis = np.linspace(-4.0, 4.0, grid_n)
    cases = []
    for i in range(n_random):
        kind = POSTERIOR_MODE_KINDS[i % len(POSTERIOR_MODE_KINDS)]
        cases.append((f"random-{i}", kind, int(rng.integers(3)), axis[rng.integers(grid_n, size=3)],
                      float(10.0 ** rng.uniform(-1.0, 2.0))))
    a_t = axis[rng.integers(grid_n, size=3)]
    cases.append(("beta=0", Kind.FKL, 0, a_t, 0.0))
    cases.append(("beta=1e4", Kind.FKL, 1, a_t, 1e4))
    return cases


def laplace_cases():
    """``(name, energy, betas, mode)``; mode ``abs`` bounds the error, ``decreasing`` orders it."""
    return [
        ("quadratic-1d", QuadraticEnergy((2.5,), (0.3,), 0.2), (3.0,), "abs"),
        ("quadratic-2d", QuadraticEnergy(((2.0, 0.5), (0.5, 1.0)), (0.1, -0.4), 0.3), (1.7,), "abs"),
        ("fkl-1d", LogitGapEnergy((0.7,)), LAPLACE_BETAS, "decreasing"),
        ("fkl-2d", LogitGapEnergy((0.5, -0.3)), LAPLACE_BETAS, "decreasing"),
    ]


QUADRATIC_TOL = 1e-6


def run_canned(seed=0, grid_n=51):
    """Run every canned case and return a list of :class:`CaseResult`."""
    rows = []
    grid = logit_grid(3, grid_n)
    for name, kind, y, a_t, beta in posterior_mode_cases(seed, grid_n=grid_n):
        i_post, i_obj = verify_posterior_mode(grid, y, a_t, beta, DivergenceSpec(kind))
        gap = float(np.max(np.abs(grid[i_post] - grid[i_obj])))
        label = f"{name} {kind.value} y={y} beta={beta:.4g}"
        rows.append(CaseResult("mode", label, gap, "argmax == argmin", i_post == i_obj))
    for name, fn, betas, mode in laplace_cases():
        errors = []
        for beta in betas:
            try:
                errors.append(verify_laplace(fn, beta).abs_error)
            except QuadratureNotConvergedError:
                errors.append(float("nan"))
        if mode == "abs":
            for beta, err in zip(betas, errors):
                rows.append(CaseResult("laplace", f"{name} beta={beta:g}", err, f"< {QUADRATIC_TOL:g}",
                                       bool(err < QUADRATIC_TOL)))
        else:
            ok = all(b < a for a, b in zip(errors, errors[1:]))
            for i, (beta, err) in enumerate(zip(betas, errors)):
                passed = ok and bool(np.isfinite(err))
                rows.append(CaseResult("laplace", f"{name} beta={beta:g}", err,
                                       "strictly decreasing in beta", passed))
    return rows
