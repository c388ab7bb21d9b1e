"""Scikit-learn style facades over the closure, stabilizer, and sampler.

Each estimator stores its constructor arguments verbatim (so get_params /
set_params / clone work), validates array inputs, and exposes the trained
model through fitted attributes with trailing underscores.  The functional
API in the sibling modules stays the primary surface; these wrappers exist
for pipeline and model-selection tooling.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import DEFAULT_PARAMS, Trajectory, lorenz_jacobian, lorenz_rhs
from .generative import CondDataset, GuidanceCfg, sample_sde_batch, train_pair
from .neural import MlpSpec, TrainConfig
from .parametric import (
    PairDataset,
    PerturbDataset,
    rollout_closure,
    rollout_stabilized,
    train_closure,
    train_stabilizer,
)


def _check_states(X, name, cols):
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {X.shape[1]}")
    return X


class ParametricClosure(BaseEstimator):
    """Coarse-state transition model xbar_k -> xbar_{k+1} over horizon h.

    fit(X, y) takes current filtered states X and their successors y one
    horizon later; the learned SDE adds a drift correction and a diagonal
    diffusion on top of the resolved vector field.
    """

    def __init__(
        self,
        h=0.01,
        hidden=(2,),
        activation="relu",
        epochs=200,
        batch_size=256,
        lr=1e-3,
        diffusion_floor=1e-4,
        seed=0,
        params=None,
    ):
        self.h = h
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.diffusion_floor = diffusion_floor
        self.seed = seed
        self.params = params

    def _p(self):
        return self.params if self.params is not None else DEFAULT_PARAMS

    def fit(self, X, y):
        X = _check_states(X, "X", 3)
        y = _check_states(y, "y", 3)
        if len(X) != len(y):
            raise ValueError("X and y must have the same number of rows")
        ds = PairDataset(xbar0=X, xbarh=y, h=self.h)
        spec = MlpSpec(3, 6, hidden=tuple(self.hidden), activation=self.activation)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed
        )
        self.model_ = train_closure(
            ds, spec, cfg, self._p(), diffusion_floor=self.diffusion_floor
        )
        self.history_ = self.model_.history
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        """Mean one-step transition under the learned SDE."""
        check_is_fitted(self, "model_")
        X = _check_states(X, "X", 3)
        lam, _ = self.model_.drift_diffusion(X)
        return X + self.h * (lorenz_rhs(X, self._p()) + lam)

    def sample(self, X, seed=0):
        """One stochastic transition draw per row."""
        check_is_fitted(self, "model_")
        X = _check_states(X, "X", 3)
        lam, gamma = self.model_.drift_diffusion(X)
        noise = np.random.default_rng(seed).standard_normal(X.shape)
        mean = X + self.h * (lorenz_rhs(X, self._p()) + lam)
        return mean + np.sqrt(self.h) * gamma * noise

    def rollout(self, x0, n, seed=0) -> Trajectory:
        check_is_fitted(self, "model_")
        return rollout_closure(self.model_, x0, self.h, n, self._p(), seed=seed)


class ParametricStabilizer(BaseEstimator):
    """Stabilizing diffusion for linearized dynamics along a nominal path.

    fit(X, y) takes rows [x_nominal | xtilde_0] and next-step tangent
    deviations y; only the diffusion amplitude is learned, the drift is the
    frozen Jacobian step.
    """

    def __init__(
        self,
        dt=0.002,
        hidden=(10, 10, 10),
        activation="relu",
        epochs=100,
        batch_size=256,
        lr=1e-3,
        diffusion_floor=1e-4,
        seed=0,
        params=None,
    ):
        self.dt = dt
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.diffusion_floor = diffusion_floor
        self.seed = seed
        self.params = params

    def _p(self):
        return self.params if self.params is not None else DEFAULT_PARAMS

    def fit(self, X, y):
        X = _check_states(X, "X", 6)
        y = _check_states(y, "y", 3)
        if len(X) != len(y):
            raise ValueError("X and y must have the same number of rows")
        ds = PerturbDataset(xn=X[:, :3], xt0=X[:, 3:], xt1=y, dt=self.dt)
        spec = MlpSpec(6, 3, hidden=tuple(self.hidden), activation=self.activation)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed
        )
        self.model_ = train_stabilizer(
            ds, spec, cfg, self._p(), diffusion_floor=self.diffusion_floor
        )
        self.history_ = self.model_.history
        self.n_features_in_ = 6
        return self

    def predict(self, X):
        """Mean next tangent state: the frozen-Jacobian Euler step."""
        check_is_fitted(self, "model_")
        X = _check_states(X, "X", 6)
        xn, xt = X[:, :3], X[:, 3:]
        jac = np.stack([lorenz_jacobian(x, self._p()) for x in xn])
        return xt + self.dt * np.einsum("nij,nj->ni", jac, xt)

    def diffusion(self, X):
        """Learned noise amplitude at rows [x_nominal | xtilde]."""
        check_is_fitted(self, "model_")
        X = _check_states(X, "X", 6)
        return self.model_.sigma(X[:, :3], X[:, 3:])

    def stabilize(self, nominal: Trajectory, xt0, seed=0):
        """Noisy tangent rollout along a nominal path: (tangent, recon)."""
        check_is_fitted(self, "model_")
        return rollout_stabilized(self.model_, nominal, xt0, self._p(), seed=seed)


class GuidedGenerator(BaseEstimator):
    """Conditional sampler p(target | cond) behind a fit/sample interface.

    fit(X, y) learns the guided flow (and optionally score) for targets y
    conditioned on rows of X; sample(X) then draws one target per row.
    """

    def __init__(
        self,
        hidden_flow=(128, 128),
        hidden_score=(128, 128, 128, 128),
        with_score=False,
        eta_flow=0.1,
        eta_score=0.1,
        epochs=200,
        batch_size=256,
        lr=1e-3,
        seed=0,
        w=3.0,
        sigma_gamma=0.0,
        d_gamma=1.4e-4,
    ):
        self.hidden_flow = hidden_flow
        self.hidden_score = hidden_score
        self.with_score = with_score
        self.eta_flow = eta_flow
        self.eta_score = eta_score
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.w = w
        self.sigma_gamma = sigma_gamma
        self.d_gamma = d_gamma

    def _guidance(self):
        return GuidanceCfg(
            w=self.w, eta=self.eta_flow, sigma_gamma=self.sigma_gamma, d_gamma=self.d_gamma
        )

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        y = _check_states(y, "y", 3)
        if len(X) != len(y):
            raise ValueError("X and y must have the same number of rows")
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed
        )
        self.pair_ = train_pair(
            CondDataset(target=y, cond=X),
            cfg_flow=cfg,
            cfg_score=cfg,
            eta_flow=self.eta_flow,
            eta_score=self.eta_score,
            hidden_flow=tuple(self.hidden_flow),
            hidden_score=tuple(self.hidden_score),
            with_score=self.with_score,
        )
        self.history_ = self.pair_.flow_history
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, X, seed=0):
        """One guided draw per conditioning row."""
        check_is_fitted(self, "pair_")
        X = _check_states(X, "X", self.n_features_in_)
        return sample_sde_batch(self.pair_, X, self._guidance(), seed=seed)

    def predict(self, X, n_draws=64, seed=0):
        """Conditional mean estimated from n_draws guided samples per row."""
        check_is_fitted(self, "pair_")
        X = _check_states(X, "X", self.n_features_in_)
        tiled = np.repeat(X, n_draws, axis=0)
        draws = sample_sde_batch(self.pair_, tiled, self._guidance(), seed=seed)
        return draws.reshape(len(X), n_draws, 3).mean(axis=1)
