import math

import numpy as np
import pytest

from betakd.divergences import DivergenceSpec, Kind, energy
from betakd.errors import QuadratureNotConvergedError
from betakd.numerics import log_softmax
from betakd.verify import (
    LogitGapEnergy,
    QuadraticEnergy,
    laplace_cases,
    logit_grid,
    quadrature_log_z,
    run_canned,
    posterior_mode_cases,
    verify_laplace,
    verify_posterior_mode,
)


@pytest.fixture(scope="module")
def grid():
    return logit_grid(3, 51)


def test_grid_shape():
    g = logit_grid(3, 51)
    assert g.shape == (51 ** 3, 3)
    assert g.min() == -4 and g.max() == 4


def test_posterior_mode_beta_zero_is_maximum_likelihood(grid):
    a_t = np.array([1.0, 0.0, -1.0])
    i_post, i_obj = verify_posterior_mode(grid, 2, a_t, 0.0, DivergenceSpec(Kind.FKL))
    assert i_post == i_obj
    ll = log_softmax(grid)[:, 2]
    assert ll[i_obj] == pytest.approx(ll.max(), abs=1e-12)


def test_posterior_mode_large_beta_collapses_onto_teacher(grid):
    a_t = grid[12345]
    i_post, i_obj = verify_posterior_mode(grid, 0, a_t, 1e4, DivergenceSpec(Kind.FKL))
    assert i_post == i_obj
    ell = energy(np.broadcast_to(a_t, grid.shape), grid, DivergenceSpec(Kind.FKL))[0]
    assert ell[i_obj] == pytest.approx(ell.min(), abs=1e-12)
    # shift-equivalent logits tie; the chosen point is a shift of the teacher
    d = grid[i_obj] - a_t
    assert np.ptp(d) < 1e-12


def test_posterior_mode_fkl_beta_1_5(grid):
    i_post, i_obj = verify_posterior_mode(grid, 1, np.array([0.3, -1.2, 2.0]), 1.5, DivergenceSpec(Kind.FKL))
    assert i_post == i_obj


def test_posterior_mode_independent_scan(grid):
    # an independent brute-force loop over a thinned grid
    sub = grid[::97]
    a_t = np.array([0.4, 1.1, -0.5])
    beta = 2.5
    best_post, best_obj = None, None
    for k, a in enumerate(sub):
        lse = math.log(sum(math.exp(x) for x in a))
        lse_t = math.log(sum(math.exp(x) for x in a_t))
        p = [math.exp(x - lse_t) for x in a_t]
        q = [math.exp(x - lse) for x in a]
        rkl = sum(qi * (math.log(qi) - math.log(pi)) for pi, qi in zip(p, q))
        post = q[0] * math.exp(-beta * rkl)
        obj = -math.log(q[0]) + beta * rkl
        if best_post is None or post > best_post[0]:
            best_post = (post, k)
        if best_obj is None or obj < best_obj[0]:
            best_obj = (obj, k)
    i_post, i_obj = verify_posterior_mode(sub, 0, a_t, beta, DivergenceSpec(Kind.RKL))
    assert i_post == i_obj == best_post[1] == best_obj[1]


def test_canned_posterior_mode_cases_cover_spec():
    cases = posterior_mode_cases(0)
    assert len(cases) == 12
    assert {c[1] for c in cases[:10]} == {Kind.FKL, Kind.RKL, Kind.JS}
    assert cases[10][4] == 0.0 and cases[11][4] == 1e4


@pytest.mark.parametrize("beta,h", [(2.0, 1.0), (1.0, 4.0)])
def test_laplace_quadratic_examples(beta, h):
    check = verify_laplace(QuadraticEnergy((h,)), beta)
    assert check.laplace_log_z == pytest.approx(math.log(math.sqrt(2 * math.pi / (beta * h))), abs=1e-14)
    assert check.abs_error < 1e-6
    if beta == 2.0:
        assert check.quadrature_log_z == pytest.approx(0.5 * math.log(math.pi), abs=1e-6)


def test_laplace_quadratic_two_dim_with_offset():
    e = QuadraticEnergy(((3.0, -0.7), (-0.7, 1.5)), (0.2, -1.0), 0.4)
    check = verify_laplace(e, 2.2)
    assert check.abs_error < 1e-6


def test_laplace_fkl_error_shrinks_with_beta():
    e = LogitGapEnergy((0.9,))
    errors = [verify_laplace(e, b).abs_error for b in (1.0, 10.0, 100.0)]
    assert errors[0] > errors[1] > errors[2]
    # the leading correction is O(1/beta)
    assert errors[2] < 0.02


def test_logit_gap_energy_matches_library_fkl():
    e = LogitGapEnergy((0.5, -0.3))
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=2)
        zt = np.array([0.5, -0.3, 0.0])
        zs = np.array([a[0], a[1], 0.0])
        assert e(a) == pytest.approx(float(energy(zt, zs, DivergenceSpec(Kind.FKL))[0]), abs=1e-12)
    assert e(e.minimizer) == pytest.approx(0.0, abs=1e-15)


def test_logit_gap_hessian_matches_finite_differences():
    e = LogitGapEnergy((0.5, -0.3))
    h = 1e-4
    x0 = e.minimizer
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            di, dj = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (e(x0 + di + dj) - e(x0 + di - dj) - e(x0 - di + dj) + e(x0 - di - dj)) / (4 * h * h)
    np.testing.assert_allclose(e.hessian_at_min(), H, atol=1e-6)


def test_quadrature_rejects_divergent_integral():
    class Bounded:
        # bounded energy: exp(-beta * l) never decays, so there is no partition function
        def __call__(self, a):
            return min(float(np.sum(np.asarray(a) ** 2)), 1.0)

    with pytest.raises(QuadratureNotConvergedError):
        quadrature_log_z(Bounded(), 1.0, np.zeros(1))


def test_laplace_case_catalogue():
    names = [c[0] for c in laplace_cases()]
    assert "quadratic-1d" in names and "fkl-1d" in names


def test_run_canned_all_pass():
    rows = run_canned(0)
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]
    assert sum(r.check == "mode" for r in rows) == 12
