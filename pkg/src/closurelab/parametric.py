"""Parametric stochastic closure and linearized stabilization.

The subgrid stress is modeled as tau = Lambda(xbar) + Gamma(xbar) xi with a
diagonal diffusion Gamma, turning the coarse dynamics into an SDE whose
Euler-Maruyama transition density is Gaussian.  Both Lambda and Gamma come
from one network (3 inputs -> 6 outputs: drift, raw diffusion), trained by
minimizing the exact negative log likelihood of observed filtered-state
pairs.  The same machinery stabilizes the linearized dynamics: a network
(x, xtilde) -> raw diffusion learns the noise amplitude implicit in how
nearby nonlinear trajectories separate, and the learned SDE keeps the
otherwise exponentially growing tangent state bounded.

Diffusion outputs pass through softplus plus a small floor, so covariances
stay strictly positive and the log terms in the likelihood never blow up.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_count, check_positive, check_state, check_states
from .dynamics import (
    DEFAULT_PARAMS,
    Trajectory,
    em_step,
    lorenz_jacobian,
    lorenz_rhs,
)
from .filtering import FilterSpec, box_filter
from .neural import MlpModel, MlpSpec, TrainConfig, forward, init_mlp, train

DIFFUSION_FLOOR = 1e-4

CLOSURE_NET = MlpSpec(in_dim=3, out_dim=6, hidden=(2,), activation="relu")
STABILIZER_NET = MlpSpec(in_dim=6, out_dim=3, hidden=(10, 10, 10), activation="relu")

_LOG_2PI = float(np.log(2.0 * np.pi))


def _softplus_np(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class PairSample:
    """One filtered-state transition (xbar at t, xbar at t+h)."""

    xbar0: np.ndarray
    xbarh: np.ndarray
    h: float


@dataclass
class PairDataset:
    """Columnar set of filtered-state pairs sharing one step h."""

    xbar0: np.ndarray
    xbarh: np.ndarray
    h: float

    def __post_init__(self):
        self.xbar0 = check_states(self.xbar0, name="xbar0")
        self.xbarh = check_states(self.xbarh, name="xbarh")
        if len(self.xbar0) != len(self.xbarh):
            raise ValueError("xbar0 and xbarh must have equal length")
        self.h = check_positive(self.h, "h")

    def __len__(self):
        return len(self.xbar0)

    def __getitem__(self, i) -> PairSample:
        return PairSample(xbar0=self.xbar0[i], xbarh=self.xbarh[i], h=self.h)


@dataclass(frozen=True)
class PerturbSample:
    """One tangent transition (xt0 -> xt1) attached to nominal state xn."""

    xn: np.ndarray
    xt0: np.ndarray
    xt1: np.ndarray
    dt: float


@dataclass
class PerturbDataset:
    """Columnar set of perturbation transitions sharing one step dt."""

    xn: np.ndarray
    xt0: np.ndarray
    xt1: np.ndarray
    dt: float

    def __post_init__(self):
        self.xn = check_states(self.xn, name="xn")
        self.xt0 = check_states(self.xt0, name="xt0")
        self.xt1 = check_states(self.xt1, name="xt1")
        if not (len(self.xn) == len(self.xt0) == len(self.xt1)):
            raise ValueError("xn, xt0, xt1 must have equal length")
        self.dt = check_positive(self.dt, "dt")

    def __len__(self):
        return len(self.xn)

    def __getitem__(self, i) -> PerturbSample:
        return PerturbSample(xn=self.xn[i], xt0=self.xt0[i], xt1=self.xt1[i], dt=self.dt)


def gen_pairs(fine: Trajectory, spec: FilterSpec, p=DEFAULT_PARAMS) -> PairDataset:
    """Filtered-state transition pairs (xbar_i, xbar_{i+K}) with h = K*dt.

    The filter drops K/2 samples at each boundary, so a fine run of T+1
    states yields (T - K + 1) - K pairs.
    """
    xbar = box_filter(fine, spec).states
    k = spec.stride_k
    return PairDataset(xbar0=xbar[:-k], xbarh=xbar[k:], h=k * fine.dt)


def gen_perturb(nominal: Trajectory, k_per_state, eps, p=DEFAULT_PARAMS, seed=0) -> PerturbDataset:
    """Perturbation transitions around a nominal path.

    For each consecutive nominal pair (x_n, x_{n+1}) and each of k_per_state
    draws: xt0 = eps*N(0,I); the perturbed state x_n + xt0 advances one
    explicit nonlinear Euler step; xt1 is its difference from x_{n+1}.
    Yields k_per_state * (len(nominal) - 1) samples.
    """
    k_per_state = check_count(k_per_state, "k_per_state")
    eps = check_positive(eps, "eps")
    rng = np.random.default_rng(seed)
    base = nominal.states[:-1]
    nxt = nominal.states[1:]
    n, dt = len(base), nominal.dt
    xn = np.repeat(base, k_per_state, axis=0)
    xt0 = eps * rng.standard_normal(size=(n * k_per_state, 3))
    perturbed = xn + xt0
    stepped = perturbed + lorenz_rhs(perturbed, p) * dt
    xt1 = stepped - np.repeat(nxt, k_per_state, axis=0)
    return PerturbDataset(xn=xn, xt0=xt0, xt1=xt1, dt=dt)


# ---------------------------------------------------------------------------
# models


@dataclass
class ClosureModel:
    """Drift/diffusion subgrid model: net(xbar) -> (Lambda, raw Gamma)."""

    net: MlpModel
    diffusion_floor: float = DIFFUSION_FLOOR
    history: list = None

    def __post_init__(self):
        if self.net.spec.in_dim != 3 or self.net.spec.out_dim != 6:
            raise ValueError("closure net must map 3 inputs to 6 outputs")

    def drift_diffusion(self, xbar):
        """Lambda and Gamma (positive) at one state or a batch."""
        out = forward(self.net, xbar)
        lam = out[..., :3]
        gamma = _softplus_np(out[..., 3:]) + self.diffusion_floor
        return lam, gamma


@dataclass
class StabilizerModel:
    """Stabilizing diffusion model: net(x, xtilde) -> raw Sigma."""

    net: MlpModel
    diffusion_floor: float = DIFFUSION_FLOOR
    history: list = None

    def __post_init__(self):
        if self.net.spec.in_dim != 6 or self.net.spec.out_dim != 3:
            raise ValueError("stabilizer net must map 6 inputs to 3 outputs")

    def sigma(self, xn, xt):
        raw = forward(self.net, np.concatenate([xn, xt], axis=-1))
        return _softplus_np(raw) + self.diffusion_floor


# ---------------------------------------------------------------------------
# losses

def _gauss_nll(resid, var_diag):
    """Diagonal-Gaussian negative log likelihood, one value per row."""
    return 0.5 * (
        resid.shape[-1] * _LOG_2PI
        + np.log(var_diag).sum(axis=-1)
        + (resid**2 / var_diag).sum(axis=-1)
    )


def nll_closure(model: ClosureModel, sample, p=DEFAULT_PARAMS):
    """Exact transition NLL of filtered pairs under the closure SDE.

    Accepts a PairSample (returns a scalar) or PairDataset (returns one
    value per pair).
    """
    xbar0 = np.atleast_2d(np.asarray(sample.xbar0, dtype=np.float64))
    xbarh = np.atleast_2d(np.asarray(sample.xbarh, dtype=np.float64))
    lam, gamma = model.drift_diffusion(xbar0)
    a = xbar0 + (lorenz_rhs(xbar0, p) + lam) * sample.h
    out = _gauss_nll(xbarh - a, gamma**2 * sample.h)
    return float(out[0]) if np.asarray(sample.xbar0).ndim == 1 else out


def nll_stabilizer(model: StabilizerModel, sample, p=DEFAULT_PARAMS):
    """Exact transition NLL of tangent perturbations under the stabilizer SDE."""
    xn = np.atleast_2d(np.asarray(sample.xn, dtype=np.float64))
    xt0 = np.atleast_2d(np.asarray(sample.xt0, dtype=np.float64))
    xt1 = np.atleast_2d(np.asarray(sample.xt1, dtype=np.float64))
    sigma = model.sigma(xn, xt0)
    jac = lorenz_jacobian(xn, p)
    a = xt0 + np.einsum("nij,nj->ni", jac, xt0) * sample.dt
    out = _gauss_nll(xt1 - a, sigma**2 * sample.dt)
    return float(out[0]) if np.asarray(sample.xn).ndim == 1 else out


# ---------------------------------------------------------------------------
# training

def _closure_batch_builder(p, floor):
    def make_batch(dataset: PairDataset, idx, rng):
        xbar0 = dataset.xbar0[idx]
        xbarh = dataset.xbarh[idx]
        h = dataset.h
        f0 = lorenz_rhs(xbar0, p)

        def loss_fn(out):
            lam = out[:, :3]
            gamma = out[:, 3:].softplus() + floor
            a = xbar0 + (f0 + lam) * h
            var = gamma**2 * h
            nll = 0.5 * ((xbarh - a) ** 2 / var + var.log()).sum(axis=1)
            return nll.mean() + 1.5 * _LOG_2PI

        return xbar0, loss_fn

    return make_batch


def train_closure(
    dataset: PairDataset,
    spec: MlpSpec = CLOSURE_NET,
    cfg: TrainConfig = None,
    p=DEFAULT_PARAMS,
    diffusion_floor=DIFFUSION_FLOOR,
    init: MlpModel = None,
) -> ClosureModel:
    """Fit Lambda/Gamma by minimizing the mean transition NLL.

    Pass `init` to warm-start from an earlier model (e.g. to continue with
    a smaller learning rate); the given model is not mutated.
    """
    cfg = cfg if cfg is not None else TrainConfig(epochs=200, batch_size=256)
    if init is not None:
        net = MlpModel(spec=init.spec, params=init.params.copy())
    else:
        net = init_mlp(spec, seed=cfg.seed)
    net, history = train(net, dataset, _closure_batch_builder(p, diffusion_floor), cfg)
    return ClosureModel(net=net, diffusion_floor=diffusion_floor, history=history)


def _stabilizer_batch_builder(p, floor):
    def make_batch(dataset: PerturbDataset, idx, rng):
        xn = dataset.xn[idx]
        xt0 = dataset.xt0[idx]
        xt1 = dataset.xt1[idx]
        dt = dataset.dt
        jac = lorenz_jacobian(xn, p)
        a = xt0 + np.einsum("nij,nj->ni", jac, xt0) * dt
        resid_sq = (xt1 - a) ** 2

        def loss_fn(out):
            sigma = out.softplus() + floor
            var = sigma**2 * dt
            nll = 0.5 * (resid_sq / var + var.log()).sum(axis=1)
            return nll.mean() + 1.5 * _LOG_2PI

        return np.concatenate([xn, xt0], axis=1), loss_fn

    return make_batch


def train_stabilizer(
    dataset: PerturbDataset,
    spec: MlpSpec = STABILIZER_NET,
    cfg: TrainConfig = None,
    p=DEFAULT_PARAMS,
    diffusion_floor=DIFFUSION_FLOOR,
    init: MlpModel = None,
) -> StabilizerModel:
    """Fit the stabilizing diffusion by minimizing the mean tangent NLL."""
    cfg = cfg if cfg is not None else TrainConfig(epochs=100, batch_size=256)
    if init is not None:
        net = MlpModel(spec=init.spec, params=init.params.copy())
    else:
        net = init_mlp(spec, seed=cfg.seed)
    net, history = train(net, dataset, _stabilizer_batch_builder(p, diffusion_floor), cfg)
    return StabilizerModel(net=net, diffusion_floor=diffusion_floor, history=history)


# ---------------------------------------------------------------------------
# rollouts

def rollout_closure(model: ClosureModel, xbar0, h, n, p=DEFAULT_PARAMS, seed=0) -> Trajectory:
    """Closed-loop Euler-Maruyama rollout of the learned coarse SDE.

    Truncates with a blow-up flag if the state leaves float range.
    """
    h = check_positive(h, "h")
    n = check_count(n, "n")
    x = check_state(xbar0, name="xbar0")
    rng = np.random.default_rng(seed)
    states = np.empty((n + 1, 3))
    states[0] = x
    kept, blew_up = n + 1, False
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            lam, gamma = model.drift_diffusion(x)
            drift = lorenz_rhs(x, p) + lam
            x = em_step(x, drift, gamma, h, rng.standard_normal(3))
            if not np.all(np.isfinite(x)):
                kept, blew_up = i + 1, True
                break
            states[i + 1] = x
    return Trajectory(dt=h, t0=0.0, states=states[:kept], blew_up=blew_up)


def rollout_stabilized(model: StabilizerModel, nominal: Trajectory, xt0, p=DEFAULT_PARAMS, seed=0):
    """Tangent rollout with learned stabilizing noise along a nominal path.

    Returns (tangent trajectory, reconstructed trajectory x + xtilde), both
    truncated with a blow-up flag if the tangent state leaves float range.
    """
    xt = check_state(xt0, name="xt0")
    dt, n = nominal.dt, len(nominal)
    rng = np.random.default_rng(seed)
    states = np.empty((n, 3))
    states[0] = xt
    kept, blew_up = n, False
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n - 1):
            xn = nominal.states[i]
            drift = lorenz_jacobian(xn, p) @ xt
            sigma = model.sigma(xn, xt)
            xt = em_step(xt, drift, sigma, dt, rng.standard_normal(3))
            if not np.all(np.isfinite(xt)):
                kept, blew_up = i + 1, True
                break
            states[i + 1] = xt
    tangent = Trajectory(dt=dt, t0=nominal.t0, states=states[:kept], blew_up=blew_up)
    recon = Trajectory(
        dt=dt, t0=nominal.t0, states=nominal.states[:kept] + states[:kept], blew_up=blew_up
    )
    return tangent, recon
