"""Contract tests for the sklearn-style estimator facades."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from closurelab.dynamics import DEFAULT_PARAMS, integrate_ode, lorenz_jacobian, lorenz_rhs
from closurelab.estimators import GuidedGenerator, ParametricClosure, ParametricStabilizer
from closurelab.filtering import FilterSpec
from closurelab.generative import sample_sde_batch
from closurelab.parametric import gen_pairs, gen_perturb, rollout_closure


def rhs(x):
    return lorenz_rhs(x, DEFAULT_PARAMS)


@pytest.fixture(scope="module")
def fine():
    warm = integrate_ode(rhs, np.array([1.0, 1.0, 1.0]), 0.01, 300).states[-1]
    return integrate_ode(rhs, warm, 0.01, 600)


@pytest.fixture(scope="module")
def pair_xy(fine):
    ds = gen_pairs(fine, FilterSpec.from_dt(fine.dt, 4), DEFAULT_PARAMS)
    return ds.xbar0, ds.xbarh, ds.h


@pytest.fixture(scope="module")
def perturb_xy(fine):
    ds = gen_perturb(fine, 1, 1e-2, DEFAULT_PARAMS, seed=2)
    return np.hstack([ds.xn, ds.xt0]), ds.xt1, ds.dt


# ---------------------------------------------------------------------------
# shared sklearn conventions


def test_get_params_roundtrip_and_clone():
    est = ParametricClosure(h=0.05, epochs=7, hidden=(4,), seed=3)
    params = est.get_params()
    assert params["h"] == 0.05 and params["epochs"] == 7 and params["hidden"] == (4,)
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(lr=0.5)
    assert twin.lr == 0.5 and est.lr == 1e-3


def test_unfitted_estimators_raise():
    X = np.zeros((4, 3))
    with pytest.raises(NotFittedError):
        ParametricClosure().predict(X)
    with pytest.raises(NotFittedError):
        ParametricStabilizer().predict(np.zeros((4, 6)))
    with pytest.raises(NotFittedError):
        GuidedGenerator().sample(X)


def test_input_validation_rejects_bad_shapes(pair_xy):
    X, y, h = pair_xy
    est = ParametricClosure(h=h, epochs=1)
    with pytest.raises(ValueError, match="3 columns"):
        est.fit(X[:, :2], y[:, :2])
    with pytest.raises(ValueError, match="same number of rows"):
        est.fit(X[:-1], y)


# ---------------------------------------------------------------------------
# ParametricClosure


def test_closure_fit_predict_sample(pair_xy):
    X, y, h = pair_xy
    est = ParametricClosure(h=h, epochs=3, batch_size=128, seed=1).fit(X, y)
    assert len(est.history_) == 3
    pred = est.predict(X[:10])
    lam, _ = est.model_.drift_diffusion(X[:10])
    assert np.allclose(pred, X[:10] + h * (lorenz_rhs(X[:10], DEFAULT_PARAMS) + lam))
    s1 = est.sample(X[:10], seed=5)
    s2 = est.sample(X[:10], seed=5)
    s3 = est.sample(X[:10], seed=6)
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, s3)


def test_closure_rollout_matches_functional_api(pair_xy):
    X, y, h = pair_xy
    est = ParametricClosure(h=h, epochs=2, batch_size=128, seed=1).fit(X, y)
    traj = est.rollout(X[0], 30, seed=4)
    ref = rollout_closure(est.model_, X[0], h, 30, DEFAULT_PARAMS, seed=4)
    assert np.array_equal(traj.states, ref.states)
    assert len(traj) == 31


def test_closure_refit_after_clone_is_deterministic(pair_xy):
    X, y, h = pair_xy
    est = ParametricClosure(h=h, epochs=2, batch_size=128, seed=9).fit(X, y)
    twin = clone(est).fit(X, y)
    assert np.array_equal(est.model_.net.params, twin.model_.net.params)


# ---------------------------------------------------------------------------
# ParametricStabilizer


def test_stabilizer_fit_predict_diffusion(perturb_xy):
    X, y, dt = perturb_xy
    est = ParametricStabilizer(dt=dt, epochs=2, batch_size=256, seed=1).fit(X, y)
    pred = est.predict(X[:5])
    for row, expect in zip(X[:5], pred):
        xn, xt = row[:3], row[3:]
        assert np.allclose(expect, xt + dt * (lorenz_jacobian(xn, DEFAULT_PARAMS) @ xt))
    sig = est.diffusion(X[:5])
    assert sig.shape == (5, 3)
    assert np.all(sig >= est.diffusion_floor)


def test_stabilizer_stabilize_returns_pair(fine, perturb_xy):
    X, y, dt = perturb_xy
    est = ParametricStabilizer(dt=dt, epochs=2, batch_size=256, seed=1).fit(X, y)
    tangent, recon = est.stabilize(fine, np.array([1e-3, 0.0, 0.0]), seed=3)
    assert len(tangent) == len(recon)
    assert np.allclose(recon.states, fine.states[: len(tangent)] + tangent.states)


# ---------------------------------------------------------------------------
# GuidedGenerator


@pytest.fixture(scope="module")
def gen_fit():
    rng = np.random.default_rng(0)
    cond = rng.normal(size=(256, 3))
    target = 0.5 * cond + 0.1 * rng.normal(size=(256, 3))
    est = GuidedGenerator(
        hidden_flow=(8,), epochs=2, batch_size=128, seed=1, w=1.0, d_gamma=0.05
    ).fit(cond, target)
    return est, cond


def test_generator_sample_shape_and_seeding(gen_fit):
    est, cond = gen_fit
    s1 = est.sample(cond[:12], seed=2)
    assert s1.shape == (12, 3)
    assert np.array_equal(s1, est.sample(cond[:12], seed=2))
    assert not np.array_equal(s1, est.sample(cond[:12], seed=3))


def test_generator_predict_averages_draws(gen_fit):
    est, cond = gen_fit
    pred = est.predict(cond[:4], n_draws=8, seed=7)
    manual = sample_sde_batch(
        est.pair_, np.repeat(cond[:4], 8, axis=0), est._guidance(), seed=7
    ).reshape(4, 8, 3).mean(axis=1)
    assert np.array_equal(pred, manual)


def test_generator_rejects_cond_dim_drift(gen_fit):
    est, _ = gen_fit
    with pytest.raises(ValueError, match="columns"):
        est.sample(np.zeros((3, 5)))
