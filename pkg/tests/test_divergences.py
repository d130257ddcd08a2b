import math
import time

import numpy as np
import pytest

from betakd import divergences as dv
from betakd.divergences import DivergenceSpec, Kind, LossResult, energy
from betakd.errors import LengthMismatchError, TokenOutOfRangeError, ZeroVectorError
from betakd.numerics import softmax

from conftest import fd_gradient, rel_err

ONE_HOT = np.array([0.0, -60.0])  # softmax puts ~1e-26 on the second entry, below the clamp
FLIP = ONE_HOT[::-1].copy()
HALF = np.zeros(2)


def _value(kind, t, spec):
    return lambda s: float(np.sum(energy(t, s, spec)[0]))


def _tvd_instance(rng, v, tau):
    """Logits with every ``|p_k - q_k| >= 1e-3`` so no FD step crosses a kink.

    Offending student coordinates are redrawn; an instance that will not
    settle (both sides near zero mass on some entry) is discarded.
    """
    while True:
        t = rng.normal(size=v)
        s = rng.normal(size=v)
        p = softmax(t, tau)
        for _ in range(200):
            bad = np.abs(p - softmax(s, tau)) < 1e-3
            if not bad.any():
                return t, s
            s[bad] = rng.normal(size=int(bad.sum())) * 2


def gradient_fidelity_errors(n_instances=100, seed=0):
    """Worst FD relative error per kind across V in {2,8,32}, tau in {0.5,1,2}."""
    rng = np.random.default_rng(seed)
    worst = {}
    combos = [(v, tau) for v in (2, 8, 32) for tau in (0.5, 1.0, 2.0)]
    for kind in Kind:
        errs = []
        for i in range(n_instances):
            v, tau = combos[i % len(combos)]
            if kind is Kind.TVD:
                t, s = _tvd_instance(rng, v, tau)
            else:
                t = rng.normal(size=v)
                s = rng.normal(size=v)
            if kind.is_feature or kind.is_logit:
                spec = DivergenceSpec(kind)
            else:
                spec = DivergenceSpec(kind, None, tau, tau)
            g = energy(t, s, spec)[1]
            errs.append(rel_err(g, fd_gradient(_value(kind, t, spec), s)))
        worst[kind] = max(errs)
    return worst


def test_gradient_fidelity_every_kind():
    start = time.perf_counter()
    worst = gradient_fidelity_errors()
    assert time.perf_counter() - start < 30
    for kind, err in worst.items():
        assert err < 1e-5, f"{kind.value}: {err}"


@pytest.mark.parametrize("kind", [Kind.FKL, Kind.RKL, Kind.SKEW_FKL, Kind.SKEW_RKL, Kind.JS, Kind.MSE_PROBS,
                                  Kind.COSINE_PROBS, Kind.MSE_LOGITS, Kind.COSINE_LOGITS])
def test_fd_match_at_v8(kind, rng):
    t, s = rng.normal(size=8), rng.normal(size=8)
    spec = DivergenceSpec(kind)
    assert rel_err(energy(t, s, spec)[1], fd_gradient(_value(kind, t, spec), s)) < 1e-6


def test_fkl_examples():
    r = dv.fkl(HALF, HALF)
    assert r.value == 0.0 and np.all(r.grad == 0.0)
    assert dv.fkl(ONE_HOT, HALF).value == pytest.approx(math.log(2), abs=1e-9)
    assert isinstance(r, LossResult)


def test_fkl_gradient_formula(rng):
    t, s = rng.normal(size=6), rng.normal(size=6)
    tau = 1.7
    r = dv.fkl(t, s, teacher_temp=tau, student_temp=tau)
    np.testing.assert_allclose(r.grad, (softmax(s, tau) - softmax(t, tau)) / tau, atol=1e-14)


def test_rkl_examples():
    assert dv.rkl(np.zeros(4), np.zeros(4)).value == pytest.approx(0.0, abs=1e-15)
    assert dv.rkl(HALF, ONE_HOT).value == pytest.approx(math.log(2), abs=1e-9)


def test_skew_reductions(rng):
    for _ in range(20):
        t, s = rng.normal(size=8) * 2, rng.normal(size=8) * 2
        assert abs(dv.skew_fkl(t, s, skew_lambda=0.0).value - dv.fkl(t, s).value) <= 1e-14
        assert abs(dv.skew_rkl(t, s, skew_lambda=0.0).value - dv.rkl(t, s).value) <= 1e-14
        assert dv.skew_fkl(t, s, skew_lambda=1.0).value == pytest.approx(0.0, abs=1e-15)
        assert dv.skew_rkl(t, s, skew_lambda=1.0).value == pytest.approx(0.0, abs=1e-15)


def test_skew_default_lambda_and_validation():
    assert DivergenceSpec(Kind.SKEW_FKL).skew_lambda == 0.1
    with pytest.raises(ValueError):
        DivergenceSpec(Kind.FKL, 0.1)
    with pytest.raises(ValueError):
        DivergenceSpec(Kind.SKEW_RKL, 1.5)
    with pytest.raises(ValueError):
        DivergenceSpec(Kind.FKL, None, 0.0)


def test_js_and_tvd_examples_and_symmetry(rng):
    assert dv.js(HALF, HALF).value == pytest.approx(0.0, abs=1e-15)
    assert dv.js(ONE_HOT, FLIP).value == pytest.approx(math.log(2), abs=1e-9)
    assert dv.tvd(HALF, HALF).value == 0.0
    assert dv.tvd(ONE_HOT, FLIP).value == pytest.approx(1.0, abs=1e-9)
    for _ in range(20):
        t, s = rng.normal(size=8), rng.normal(size=8)
        assert abs(dv.js(t, s).value - dv.js(s, t).value) <= 1e-14
        assert abs(dv.tvd(t, s).value - dv.tvd(s, t).value) <= 1e-14
        assert 0 <= dv.js(t, s).value <= math.log(2)


def test_kl_directions_differ():
    t, s = np.array([2.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.5])
    assert abs(dv.fkl(t, s).value - dv.rkl(t, s).value) > 1e-3


def test_tvd_tie_subgradient_is_zero():
    z = np.array([0.3, -0.2, 1.0])
    np.testing.assert_array_equal(dv.tvd(z, z).grad, 0.0)


def test_mse_examples():
    r = dv.mse_logits(np.array([0.0, 0.0]), np.array([1.0, -1.0]))
    assert r.value == 1.0
    np.testing.assert_array_equal(r.grad, [1.0, -1.0])
    r = dv.mse_logits(np.ones(3), np.ones(3))
    assert r.value == 0.0 and np.all(r.grad == 0)
    assert dv.mse_probs(ONE_HOT, FLIP).value == pytest.approx(1.0, abs=1e-9)
    assert dv.mse_probs(HALF, HALF).value == 0.0


def test_cosine_examples():
    z = np.array([0.5, -1.0, 2.0])
    assert dv.cosine_logits(z, 3 * z).value == pytest.approx(0.0, abs=1e-15)
    assert dv.cosine_logits(np.array([1.0, 0.0]), np.array([0.0, 1.0])).value == pytest.approx(1.0)
    with pytest.raises(ZeroVectorError):
        dv.cosine_logits(np.zeros(3), z)
    assert dv.cosine_probs(HALF, HALF).value == pytest.approx(0.0, abs=1e-15)
    assert dv.cosine_probs(ONE_HOT, FLIP).value == pytest.approx(1.0, abs=1e-12)


def test_cosine_probs_is_unclamped():
    # with a clamp the dot product of disjoint one-hots would be ~1e-12, not ~1e-26
    assert 1.0 - dv.cosine_probs(ONE_HOT, FLIP).value < 1e-20


def test_feature_loss(rng):
    f = rng.normal(size=32)
    for kind in (Kind.FEATURE_COSINE, Kind.FEATURE_MSE):
        r = dv.feature_loss(f, f, kind)
        assert r.value == pytest.approx(0.0, abs=1e-15)
    assert dv.feature_loss(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), "feature_cosine").value == pytest.approx(1.0)
    g = rng.normal(size=32)
    for kind in (Kind.FEATURE_COSINE, Kind.FEATURE_MSE):
        r = dv.feature_loss(f, g, kind)
        fd = fd_gradient(lambda x: dv.feature_loss(f, x, kind).value, g)
        assert rel_err(r.grad, fd) < 1e-6
    with pytest.raises(ZeroVectorError):
        dv.feature_loss(np.zeros(4), np.ones(4), "feature_cosine")
    with pytest.raises(ValueError):
        dv.feature_loss(f, g, "fkl")


@pytest.mark.parametrize("kind", list(Kind))
def test_zero_at_match_and_nonnegative(kind, rng):
    z = rng.normal(size=8)
    value, grad = energy(z, z, DivergenceSpec(kind))
    assert value < 1e-10
    assert np.linalg.norm(grad) < 1e-8
    for _ in range(20):
        t, s = rng.normal(size=8) * 3, rng.normal(size=8) * 3
        assert energy(t, s, DivergenceSpec(kind))[0] >= -1e-12


def test_temperature_consistency(rng):
    for _ in range(10):
        t, s = rng.normal(size=8), rng.normal(size=8)
        tau = rng.uniform(0.3, 3.0)
        a = dv.fkl(t, s, teacher_temp=tau, student_temp=tau).value
        b = dv.fkl(t / tau, s / tau).value
        assert abs(a - b) < 1e-12


def test_per_token_spec_kind_must_match():
    with pytest.raises(ValueError):
        dv.fkl(HALF, HALF, spec=DivergenceSpec(Kind.RKL))


def test_sequence_loss(rng):
    spec = DivergenceSpec(Kind.JS)
    t, s = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    r = dv.sequence_loss(t, s, spec)
    assert r.value == dv.js(t[0], s[0]).value
    t5, s5 = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    r = dv.sequence_loss(t5, s5, spec)
    manual = sum(dv.js(t5[i], s5[i]).value for i in range(5)) / 5
    assert abs(r.value - manual) <= 1e-14
    fd = fd_gradient(lambda x: dv.sequence_loss(t5, x, spec).value, s5)
    assert rel_err(r.grad, fd) < 1e-6
    same = np.tile(t[0], (4, 1))
    other = np.tile(s[0], (4, 1))
    assert dv.sequence_loss(same, other, spec).value == pytest.approx(dv.js(t[0], s[0]).value, abs=1e-15)
    with pytest.raises(LengthMismatchError):
        dv.sequence_loss(t5, s5[:4], spec)


def test_per_sequence_loss_matches_sequence_loss(rng):
    spec = DivergenceSpec(Kind.RKL)
    t, s = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    vals, grads = dv.per_sequence_loss(t, s, spec)
    for b in range(3):
        r = dv.sequence_loss(t[b], s[b], spec)
        assert vals[b] == pytest.approx(r.value, abs=1e-15)
        np.testing.assert_allclose(grads[b], r.grad, atol=1e-15)


def test_cross_entropy(rng):
    targets = np.array([0, 2, 1, 1])
    confident = np.full((4, 3), -60.0)
    confident[np.arange(4), targets] = 0.0
    assert dv.cross_entropy(confident, targets).value < 1e-20
    assert dv.cross_entropy(np.zeros((4, 3)), targets).value == pytest.approx(math.log(3), abs=1e-15)
    z = rng.normal(size=(4, 3))
    for tau in (0.5, 1.0, 2.0):
        r = dv.cross_entropy(z, targets, tau)
        fd = fd_gradient(lambda x: dv.cross_entropy(x, targets, tau).value, z)
        assert rel_err(r.grad, fd) < 1e-6
    with pytest.raises(TokenOutOfRangeError):
        dv.cross_entropy(z, np.array([0, 3, 1, 1]))
    with pytest.raises(TokenOutOfRangeError):
        dv.cross_entropy(z, np.array([0, -1, 1, 1]))


def test_barycentric_grid_counts():
    assert dv.barycentric_grid(2).shape == (6, 3)
    assert dv.barycentric_grid(60).shape == (1891, 3)
    np.testing.assert_allclose(dv.barycentric_grid(7).sum(axis=1), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        dv.barycentric_grid(1)


def _nearest(points, anchor):
    return int(np.argmin(np.abs(points - anchor).sum(axis=1)))


@pytest.mark.parametrize("kind", [Kind.FKL, Kind.RKL, Kind.SKEW_FKL, Kind.SKEW_RKL, Kind.JS])
def test_surface_uniform_anchor_minimum(kind):
    anchor = np.full(3, 1 / 3)
    pts, vals = dv.simplex_surface(DivergenceSpec(kind), anchor, 60)
    i = int(np.argmin(vals))
    assert vals[i] < 1e-10
    assert i == _nearest(pts, anchor)


def test_fkl_surface_monotone_along_rays():
    anchor = np.array([0.8, 0.1, 0.1])
    spec = DivergenceSpec(Kind.FKL)
    pts, vals = dv.simplex_surface(spec, anchor, 60)
    assert np.allclose(pts[np.argmin(vals)], anchor)
    ts = np.linspace(0, 1, 41)
    for vertex in np.eye(3):
        ray = anchor[None, :] + ts[:, None] * (vertex - anchor)[None, :]
        along = dv.surface_energy(Kind.FKL, anchor, ray)
        assert np.all(np.diff(along) > 0)


def test_js_surface_symmetry():
    anchor = np.array([0.5, 0.25, 0.25])
    pts, vals = dv.simplex_surface(DivergenceSpec(Kind.JS), anchor, 30)
    swapped = dv.surface_energy(Kind.JS, anchor, pts[:, [0, 2, 1]])
    np.testing.assert_allclose(vals, swapped, atol=1e-15)


def test_surface_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        dv.simplex_surface(DivergenceSpec(Kind.FKL), [0.5, 0.5], 4)
    pts, vals = dv.simplex_surface(DivergenceSpec(Kind.MSE_LOGITS), [0.2, 0.3, 0.5], 2)
    path = tmp_path / "s.csv"
    dv.write_surface_csv(path, pts, vals)
    lines = path.read_text().splitlines()
    assert lines[0] == "b0,b1,b2,loss"
    assert len(lines) == 7
    row = [float(x) for x in lines[1].split(",")]
    assert row[3] == vals[0]
