import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arft import autograd as ag
from arft import losses as L
from arft.errors import ConfigError, ContractError, ShapeError


def test_focal_known_value():
    fl = L.focal_loss(np.array([0.5]), L.FocalConfig(gamma=2.0, alpha=0.25)).item()
    assert fl == pytest.approx(0.25 * 0.25 * math.log(2.0), rel=1e-15)


def test_focal_floor_keeps_loss_finite():
    val = L.focal_loss(np.array([0.0]), L.FocalConfig(gamma=0.0)).item()
    assert val == pytest.approx(-math.log(1e-12))


def test_focal_config_ranges():
    with pytest.raises(ConfigError):
        L.FocalConfig(gamma=-1.0)
    with pytest.raises(ConfigError):
        L.FocalConfig(alpha=0.0)
    with pytest.raises(ContractError):
        L.focal_loss(np.array([]), L.FocalConfig())


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.0, 5.0))
def test_focal_decreases_with_gamma(p, gamma):
    lo = L.focal_terms(np.array([p]), L.FocalConfig(gamma=gamma)).item()
    hi = L.focal_terms(np.array([p]), L.FocalConfig(gamma=gamma + 0.5)).item()
    assert hi <= lo


def test_true_class_probability_picks_label_column():
    logits = np.array([[0.0, math.log(3.0)], [math.log(4.0), 0.0]])
    p = L.true_class_probability(logits, [1, 1]).data
    np.testing.assert_allclose(p, [0.75, 0.2], rtol=1e-14)


def test_median_sigma_matches_brute_force():
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    pts = np.vstack([xs, xt])
    d = [np.linalg.norm(pts[i] - pts[j]) for i in range(12) for j in range(i + 1, 12)]
    assert L.median_sigma(xs, xt) == pytest.approx(float(np.median(d)), rel=1e-12)
    assert L.median_sigma(np.zeros((2, 3)), np.zeros((2, 3))) == L.SIGMA_FLOOR


def test_mmd_matches_explicit_double_sum():
    rng = np.random.default_rng(1)
    xs, xt, s = rng.normal(size=(4, 2)), rng.normal(size=(3, 2)) + 1, 0.9
    k = lambda a, b: math.exp(-np.sum((a - b) ** 2) / (2 * s * s))
    kss = np.mean([k(a, b) for a in xs for b in xs])
    ktt = np.mean([k(a, b) for a in xt for b in xt])
    kst = np.mean([k(a, b) for a in xs for b in xt])
    assert L.mmd_rbf(xs, xt, s).item() == pytest.approx(kss + ktt - 2 * kst, abs=1e-14)


def test_mmd_errors():
    with pytest.raises(ShapeError):
        L.mmd_rbf(np.ones((2, 3)), np.ones((2, 4)), 1.0)
    with pytest.raises(ContractError):
        L.mmd_rbf(np.ones((2, 3)), np.ones((2, 3)), 0.0)


def test_mmd_grows_with_shift():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 2))
    vals = [L.mmd_rbf(x, x + d, 1.0).item() for d in (0.1, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals)


def test_lambda_schedule_endpoints_and_clamp():
    sched = L.LossSchedule(lambda_max=2.0)
    assert L.lambda_schedule(0.0, sched) == 0.0
    assert L.lambda_schedule(1.0, sched) == pytest.approx(2.0 * (2 / (1 + math.exp(-10)) - 1))
    with pytest.warns(UserWarning):
        assert L.lambda_schedule(1.5, sched) == L.lambda_schedule(1.0, sched)
    steps = [L.lambda_schedule(t, sched) for t in np.linspace(0, 1, 11)]
    assert steps == sorted(steps)


def test_composite_loss_combines_terms():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 0.9, 8)
    rs, rt = rng.normal(size=(8, 4)), rng.normal(size=(6, 4))
    fc, mc, sc = L.FocalConfig(), L.MMDConfig(sigma_policy="fixed", sigma=1.5), L.LossSchedule()
    total, focal, mmd, lam = L.composite_loss(p, rs, rt, 0.3, fc, mc, sc)
    assert total.item() == pytest.approx(focal.item() + lam * mmd.item(), rel=1e-14)
    assert mmd.item() == pytest.approx(L.mmd_rbf(rs, rt, 1.5).item())
    total0, focal0, mmd0, lam0 = L.composite_loss(p, rs, rt, 0.0, fc, mc, sc)
    assert lam0 == 0.0 and mmd0.item() == 0.0 and total0.item() == focal0.item()


def test_mmd_gradient_moves_domains_together():
    rng = np.random.default_rng(4)
    xs = ag.parameter(rng.normal(size=(10, 2)))
    xt = rng.normal(size=(10, 2)) + 2.0
    with ag.Tape() as tape:
        loss = L.mmd_rbf(xs, xt, 1.0)
    tape.backward(loss)
    # a small step against the gradient lowers the discrepancy
    stepped = L.mmd_rbf(xs.data - 0.5 * xs.grad, xt, 1.0).item()
    assert stepped < loss.item()


def test_mmd_config_validation():
    with pytest.raises(ConfigError):
        L.MMDConfig(sigma_policy="mean")
    with pytest.raises(ConfigError):
        L.MMDConfig(repr_choice="tokens")
    with pytest.raises(ConfigError):
        L.MMDConfig(estimator="unbiased")
