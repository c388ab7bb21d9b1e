"""Guided flow/score generation of conditioned closure terms.

A Gaussian probability path interpolates from N(0, I) at gamma=0 to a data
sample at gamma=1. Conditional flow matching regresses a vector field onto
the path velocity, denoising score matching regresses a score network onto
the Gaussian score, both with classifier-free null-label dropout. Sampling
integrates the guided SDE in gamma and conditions each draw on the current
coarse state, which closes the coarse dynamics with sampled forcing.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_count, check_positive, check_state
from .dynamics import DEFAULT_PARAMS, Trajectory, _rk4_step, lorenz_jacobian, lorenz_rhs
from .exceptions import GammaSingularError, NonFiniteLossError, NonFiniteStateError
from .filtering import FilteredBundle
from .neural import MlpModel, MlpSpec, TrainConfig, forward, init_mlp, train
from .parametric import PerturbDataset

# integrating past this point is numerically singular (beta -> 0); the last
# stretch to gamma=1 is covered by one deterministic flow step
GAMMA_MAX = 1.0 - 1e-4


class GaussianPath:
    """Fixed interpolation schedule N(alpha*tau, beta^2 I), alpha=gamma."""

    @staticmethod
    def alpha(gamma):
        return np.asarray(gamma, dtype=np.float64)

    @staticmethod
    def beta(gamma):
        return np.sqrt(1.0 - np.asarray(gamma, dtype=np.float64))


@dataclass(frozen=True)
class GuidanceCfg:
    """Sampler settings: guidance scale, dropout, diffusion, step size."""

    w: float = 3.0
    eta: float = 0.1
    sigma_gamma: float = 0.0
    d_gamma: float = 1.4e-4
    gamma_max: float = GAMMA_MAX
    enforce_linear_zero: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.w < 0.0:
            raise ValueError(f"guidance scale must be >= 0, got {self.w}")
        if self.sigma_gamma < 0.0:
            raise ValueError(f"sigma_gamma must be >= 0, got {self.sigma_gamma}")
        if self.d_gamma <= 0.0:
            raise ValueError(f"d_gamma must be positive, got {self.d_gamma}")
        if not 0.0 < self.gamma_max < 1.0:
            raise ValueError(f"gamma_max must be in (0, 1), got {self.gamma_max}")


@dataclass
class FlowScorePair:
    """Trained guidance heads plus the dataset normalization they expect.

    Heads are MlpModels over inputs [t | gamma | cond | null flag] or, for
    oracles in tests, callables (t, gamma, cond, null_mask) -> field. The
    shift/scale fields map between data units and the normalized units the
    heads operate in; defaults are the identity.
    """

    flow: object
    score: object = None
    target_shift: object = 0.0
    target_scale: object = 1.0
    cond_shift: object = 0.0
    cond_scale: object = 1.0

    def __post_init__(self):
        for head in (self.flow, self.score):
            if isinstance(head, MlpModel):
                if head.spec.out_dim != 3:
                    raise ValueError("guidance heads must emit 3 components")
                if head.spec.in_dim < 6:
                    raise ValueError("guidance heads need inputs [t|gamma|cond|flag]")
        if isinstance(self.flow, MlpModel) and isinstance(self.score, MlpModel):
            if self.flow.spec.in_dim != self.score.spec.in_dim:
                raise ValueError("flow and score heads disagree on input layout")

    @property
    def cond_dim(self):
        for head in (self.flow, self.score):
            if isinstance(head, MlpModel):
                return head.spec.in_dim - 5
        return None


@dataclass
class CondDataset:
    """Generative training pairs: target rows with conditioning rows."""

    target: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.float64)
        if self.target.ndim != 2 or self.target.shape[1] != 3:
            raise ValueError(f"target must have shape (n, 3), got {self.target.shape}")
        if self.cond.ndim != 2 or len(self.cond) != len(self.target):
            raise ValueError("cond must be 2-D and aligned with target")
        if not (np.all(np.isfinite(self.target)) and np.all(np.isfinite(self.cond))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self):
        return len(self.target)

    def __getitem__(self, i):
        return self.target[i], self.cond[i]


# ---------------------------------------------------------------------------
# probability path


def _col(gamma):
    """Gamma broadcast helper: scalars pass through, vectors become columns."""
    g = np.asarray(gamma, dtype=np.float64)
    return g[:, None] if g.ndim == 1 else g


def path_sample(tau, gamma, eps):
    """Draw t ~ N(gamma*tau, (1-gamma) I) from base noise eps."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0.0) or np.any(g > 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    g = _col(g)
    return g * np.asarray(tau, dtype=np.float64) + np.sqrt(1.0 - g) * np.asarray(eps, dtype=np.float64)


def _check_gamma_regular(gamma):
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g >= 1.0):
        raise GammaSingularError("path quantities are singular at gamma >= 1")
    if np.any(g < 0.0):
        raise ValueError("gamma must be >= 0")
    return g


def cond_vector_field(t, tau, gamma):
    """Velocity of the path map at matched noise: alpha'*tau + (beta'/beta)(t - alpha*tau)."""
    g = _col(_check_gamma_regular(gamma))
    tau = np.asarray(tau, dtype=np.float64)
    return tau - (np.asarray(t, dtype=np.float64) - g * tau) / (2.0 * (1.0 - g))


def cond_score(t, tau, gamma):
    """Gradient of log N(t; gamma*tau, (1-gamma) I) in t."""
    g = _col(_check_gamma_regular(gamma))
    tau = np.asarray(tau, dtype=np.float64)
    return -(np.asarray(t, dtype=np.float64) - g * tau) / (1.0 - g)


# ---------------------------------------------------------------------------
# network plumbing


def net_input(t, gamma, cond, null_mask, cond_dim=None):
    """Rows [t | gamma | cond | null flag]; null rows carry zeroed cond slots."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    n = len(t)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    if cond is None:
        if cond_dim is None:
            raise ValueError("cond_dim is required when cond is absent")
        cond = np.zeros((n, cond_dim))
        null_mask = np.ones(n, dtype=bool)
    else:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        null_mask = np.broadcast_to(np.asarray(null_mask, dtype=bool), (n,))
        cond = np.where(null_mask[:, None], 0.0, cond)
    flag = null_mask.astype(np.float64)
    return np.concatenate([t, gamma[:, None], cond, flag[:, None]], axis=1)


def _eval_head(head, t, gamma, cond, null_mask):
    if isinstance(head, MlpModel):
        x = net_input(t, gamma, cond, null_mask, cond_dim=head.spec.in_dim - 5)
        return forward(head, x)
    return np.asarray(head(t, gamma, cond, null_mask), dtype=np.float64)


def flow_spec(cond_dim, hidden=(128, 128)) -> MlpSpec:
    cond_dim = check_count(cond_dim, "cond_dim")
    return MlpSpec(in_dim=cond_dim + 5, out_dim=3, hidden=tuple(hidden), activation="silu")


def score_spec(cond_dim, hidden=(128, 128, 128, 128)) -> MlpSpec:
    cond_dim = check_count(cond_dim, "cond_dim")
    return MlpSpec(in_dim=cond_dim + 5, out_dim=3, hidden=tuple(hidden), activation="silu")


def fit_standardization(dataset: CondDataset):
    """Column shift/scale for targets and conditioning.

    Near-constant columns keep scale 1 and shift 0 so structurally zero
    targets (the linear SGS component) stay exactly zero.
    """

    def stats(arr):
        sd = arr.std(axis=0)
        degenerate = sd < 1e-12
        return (
            np.where(degenerate, 0.0, arr.mean(axis=0)),
            np.where(degenerate, 1.0, sd),
        )

    tshift, tscale = stats(dataset.target)
    cshift, cscale = stats(dataset.cond)
    return tshift, tscale, cshift, cscale


# ---------------------------------------------------------------------------
# losses


def _draw_batch(target, cond, eta, gamma_max, rng):
    """Shared CFM/DSM randomization: gamma, base noise, path point, dropout."""
    n = len(target)
    gamma = rng.uniform(0.0, gamma_max, size=n)
    eps = rng.standard_normal((n, 3))
    t = path_sample(target, gamma, eps)
    null = rng.random(n) < eta
    return gamma, t, null


def _standardize(pair: FlowScorePair, target, cond):
    tgt = (np.asarray(target, dtype=np.float64) - pair.target_shift) / np.where(
        np.asarray(pair.target_scale) == 0.0, 1.0, pair.target_scale
    )
    cnd = (np.asarray(cond, dtype=np.float64) - pair.cond_shift) / pair.cond_scale
    return tgt, cnd


def cfm_loss(pair: FlowScorePair, target, cond, eta, seed=0, gamma_max=GAMMA_MAX):
    """Mean squared error of the flow head against the path velocity."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    tgt, cnd = _standardize(pair, target, cond)
    rng = np.random.default_rng(seed)
    gamma, t, null = _draw_batch(tgt, cnd, eta, gamma_max, rng)
    ref = cond_vector_field(t, tgt, gamma)
    out = _eval_head(pair.flow, t, gamma, cnd, null)
    loss = float(np.mean(np.sum((out - ref) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise NonFiniteLossError("flow matching loss is not finite")
    return loss


def dsm_loss(pair: FlowScorePair, target, cond, eta, seed=0, gamma_max=GAMMA_MAX):
    """Mean squared error of the score head against the Gaussian score."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if pair.score is None:
        raise ValueError("pair has no score head")
    tgt, cnd = _standardize(pair, target, cond)
    rng = np.random.default_rng(seed)
    gamma, t, null = _draw_batch(tgt, cnd, eta, gamma_max, rng)
    ref = cond_score(t, tgt, gamma)
    out = _eval_head(pair.score, t, gamma, cnd, null)
    loss = float(np.mean(np.sum((out - ref) ** 2, axis=1)))
    if not np.isfinite(loss):
        raise NonFiniteLossError("score matching loss is not finite")
    return loss


def _matching_batch_builder(target_fn, eta, gamma_max):
    """make_batch closure regressing a head onto target_fn(t, tau, gamma)."""

    def make_batch(ds, idx, rng):
        tau = ds.target[idx]
        cond = ds.cond[idx]
        gamma, t, null = _draw_batch(tau, cond, eta, gamma_max, rng)
        ref = target_fn(t, tau, gamma)
        x = net_input(t, gamma, cond, null)

        def loss_fn(out):
            return ((out - ref) ** 2).sum(axis=1).mean()

        return x, loss_fn

    return make_batch


# ---------------------------------------------------------------------------
# training


def train_pair(
    dataset: CondDataset,
    cfg_flow: TrainConfig = None,
    cfg_score: TrainConfig = None,
    eta_flow=0.1,
    eta_score=0.1,
    hidden_flow=(128, 128),
    hidden_score=(128, 128, 128, 128),
    with_score=False,
    gamma_max=GAMMA_MAX,
) -> FlowScorePair:
    """Fit the flow head (and optionally the score head) on a dataset.

    Training happens in normalized units; the returned pair carries the
    shifts/scales so sampling accepts and emits data units.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    tshift, tscale, cshift, cscale = fit_standardization(dataset)
    std = CondDataset(
        target=(dataset.target - tshift) / tscale,
        cond=(dataset.cond - cshift) / cscale,
    )
    cond_dim = std.cond.shape[1]

    cfg_flow = cfg_flow if cfg_flow is not None else TrainConfig(epochs=200, batch_size=256)
    flow = init_mlp(flow_spec(cond_dim, hidden_flow), seed=cfg_flow.seed)
    flow, flow_hist = train(
        flow, std, _matching_batch_builder(cond_vector_field, eta_flow, gamma_max), cfg_flow
    )

    score = None
    score_hist = None
    if with_score:
        cfg_score = cfg_score if cfg_score is not None else TrainConfig(epochs=200, batch_size=256)
        score = init_mlp(score_spec(cond_dim, hidden_score), seed=cfg_score.seed + 1)
        score, score_hist = train(
            score, std, _matching_batch_builder(cond_score, eta_score, gamma_max), cfg_score
        )

    pair = FlowScorePair(
        flow=flow,
        score=score,
        target_shift=tshift,
        target_scale=tscale,
        cond_shift=cshift,
        cond_scale=cscale,
    )
    pair.flow_history = flow_hist
    pair.score_history = score_hist
    return pair


# ---------------------------------------------------------------------------
# guided sampling


def guided_combine(pair: FlowScorePair, t, gamma, cond, w):
    """(1-w)*unconditional + w*conditional for both heads.

    Operates in the pair's normalized units: callers standardize cond first.
    Returns (field, score-or-None); batch evaluations stack the conditional
    and null rows into one forward pass per head.
    """
    if cond is None:
        raise ValueError("guided sampling requires conditioning")
    t2 = np.atleast_2d(np.asarray(t, dtype=np.float64))
    cond2 = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    m = len(t2)
    both_t = np.vstack([t2, t2])
    both_cond = np.vstack([cond2, np.zeros_like(cond2)])
    null = np.concatenate([np.zeros(m, dtype=bool), np.ones(m, dtype=bool)])
    gamma2 = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (m,))
    both_gamma = np.concatenate([gamma2, gamma2])

    def combine(head):
        out = _eval_head(head, both_t, both_gamma, both_cond, null)
        mixed = (1.0 - w) * out[m:] + w * out[:m]
        return mixed[0] if np.asarray(t).ndim == 1 else mixed

    field = combine(pair.flow)
    score = combine(pair.score) if pair.score is not None else None
    return field, score


def _gamma_grid(cfg: GuidanceCfg):
    n_steps = int(np.ceil(cfg.gamma_max / cfg.d_gamma))
    grid = np.minimum(np.arange(n_steps + 1) * cfg.d_gamma, cfg.gamma_max)
    return grid


def sample_sde_batch(pair: FlowScorePair, conds, cfg: GuidanceCfg = None, seed=0, rng=None, on_nonfinite="raise"):
    """One guided draw per conditioning row, Euler-Maruyama in gamma.

    Integrates to cfg.gamma_max then takes a single deterministic flow step
    to gamma=1. With on_nonfinite="nan", rows that leave float range come
    back as NaN instead of raising; the noise stream stays aligned.
    """
    cfg = cfg if cfg is not None else GuidanceCfg()
    if cfg.sigma_gamma > 0.0 and pair.score is None:
        raise ValueError("sigma_gamma > 0 requires a score head")
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    cnd = (conds - pair.cond_shift) / pair.cond_scale
    m = len(cnd)
    rng = rng if rng is not None else np.random.default_rng(seed)

    t = rng.standard_normal((m, 3))
    dead = np.zeros(m, dtype=bool)
    grid = _gamma_grid(cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(grid) - 1):
            g, dg = grid[k], grid[k + 1] - grid[k]
            field, score = guided_combine(pair, t, g, cnd, cfg.w)
            drift = field
            if cfg.sigma_gamma > 0.0:
                drift = field + 0.5 * cfg.sigma_gamma**2 * score
            t = t + drift * dg
            if cfg.sigma_gamma > 0.0:
                t = t + cfg.sigma_gamma * np.sqrt(dg) * rng.standard_normal((m, 3))
            bad = ~np.all(np.isfinite(t), axis=1)
            if np.any(bad):
                if on_nonfinite == "raise":
                    raise NonFiniteStateError("guided sampler left float range")
                dead |= bad
                t = np.where(dead[:, None], 0.0, t)
        field, _ = guided_combine(pair, t, cfg.gamma_max, cnd, cfg.w)
        t = t + field * (1.0 - cfg.gamma_max)

    out = t * pair.target_scale + pair.target_shift
    out[dead] = np.nan
    if cfg.enforce_linear_zero:
        out[~dead, 0] = 0.0
    return out


def sample_sde(pair: FlowScorePair, cond, cfg: GuidanceCfg = None, seed=0):
    """Single guided draw conditioned on one vector."""
    return sample_sde_batch(pair, np.atleast_2d(cond), cfg, seed=seed)[0]


# ---------------------------------------------------------------------------
# datasets


def build_sgs_dataset(bundle: FilteredBundle) -> CondDataset:
    """Exact subgrid forcing paired with the filtered state it belongs to."""
    return CondDataset(target=bundle.exact_tau.states.copy(), cond=bundle.filtered.states.copy())


def build_stab_dataset(perturb: PerturbDataset, p=DEFAULT_PARAMS) -> CondDataset:
    """Rate-form residuals of perturbed tangent transitions.

    s = (xt1 - xt0 - f_x(xn) xt0 dt)/dt, conditioned on (xn, xt0); this is
    the forcing that, added to the linearized dynamics, reproduces xt1.
    """
    jac = lorenz_jacobian(perturb.xn, p)
    lin = np.einsum("nij,nj->ni", jac, perturb.xt0)
    s = (perturb.xt1 - perturb.xt0 - lin * perturb.dt) / perturb.dt
    return CondDataset(target=s, cond=np.concatenate([perturb.xn, perturb.xt0], axis=1))


# ---------------------------------------------------------------------------
# closed-loop rollouts


def closure_rollout_ensemble(pair, xbar0s, h, n, p=DEFAULT_PARAMS, cfg: GuidanceCfg = None, seed=0):
    """Coarse rollouts closed by sampled subgrid forcing, batched over rows.

    Each step draws tau conditioned on the current coarse state and advances
    with an RK4 step of f plus that constant forcing. Rows that blow up are
    frozen and truncated; the shared noise stream keeps rows reproducible.
    """
    cfg = cfg if cfg is not None else GuidanceCfg()
    h = check_positive(h, "h")
    n = check_count(n, "n")
    x = np.atleast_2d(np.asarray(xbar0s, dtype=np.float64)).copy()
    m = len(x)
    rng = np.random.default_rng(seed)
    states = np.empty((n + 1, m, 3))
    states[0] = x
    alive = np.ones(m, dtype=bool)
    kept = np.full(m, n + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            conds = np.where(alive[:, None], x, 0.0)
            tau = sample_sde_batch(pair, conds, cfg, rng=rng, on_nonfinite="nan")

            def rhs(xx):
                return lorenz_rhs(xx, p) + tau

            xn = _rk4_step(rhs, x, h)
            bad = alive & ~np.all(np.isfinite(xn), axis=1)
            kept[bad] = i + 1
            alive &= ~bad
            x = np.where(alive[:, None], xn, x)
            states[i + 1] = x
            if not alive.any():
                break
    return [
        Trajectory(dt=h, t0=0.0, states=states[: kept[j], j], blew_up=kept[j] < n + 1)
        for j in range(m)
    ]


def closure_rollout_generative(pair, xbar0, h, n, p=DEFAULT_PARAMS, cfg: GuidanceCfg = None, seed=0) -> Trajectory:
    """Single coarse rollout closed by sampled subgrid forcing."""
    xbar0 = check_state(xbar0, name="xbar0")
    return closure_rollout_ensemble(pair, xbar0[None], h, n, p, cfg, seed)[0]


def stabilize_rollout_ensemble(pair, nominal: Trajectory, xt0s, p=DEFAULT_PARAMS, cfg: GuidanceCfg = None, seed=0):
    """Tangent rollouts with sampled stabilizing forcing, batched over rows.

    x̃_{k+1} = x̃_k + f_x(x_k) x̃_k dt + s dt with s drawn conditioned on
    (x_k, x̃_k). Returns one (tangent, reconstruction) pair per row.
    """
    cfg = cfg if cfg is not None else GuidanceCfg()
    xt = np.atleast_2d(np.asarray(xt0s, dtype=np.float64)).copy()
    m = len(xt)
    dt, n_states = nominal.dt, len(nominal)
    rng = np.random.default_rng(seed)
    states = np.empty((n_states, m, 3))
    states[0] = xt
    alive = np.ones(m, dtype=bool)
    kept = np.full(m, n_states)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_states - 1):
            xn = nominal.states[i]
            conds = np.concatenate([np.broadcast_to(xn, (m, 3)), np.where(alive[:, None], xt, 0.0)], axis=1)
            s = sample_sde_batch(pair, conds, cfg, rng=rng, on_nonfinite="nan")
            step = xt + (xt @ lorenz_jacobian(xn, p).T + s) * dt
            bad = alive & ~np.all(np.isfinite(step), axis=1)
            kept[bad] = i + 1
            alive &= ~bad
            xt = np.where(alive[:, None], step, xt)
            states[i + 1] = xt
            if not alive.any():
                break
    out = []
    for j in range(m):
        tangent = Trajectory(
            dt=dt, t0=nominal.t0, states=states[: kept[j], j], blew_up=kept[j] < n_states
        )
        recon = Trajectory(
            dt=dt,
            t0=nominal.t0,
            states=nominal.states[: kept[j]] + states[: kept[j], j],
            blew_up=tangent.blew_up,
        )
        out.append((tangent, recon))
    return out


def stabilize_rollout_generative(pair, nominal: Trajectory, xt0, p=DEFAULT_PARAMS, cfg: GuidanceCfg = None, seed=0):
    """Single stabilized tangent rollout; returns (tangent, reconstruction)."""
    xt0 = check_state(xt0, name="xt0")
    return stabilize_rollout_ensemble(pair, nominal, xt0[None], p, cfg, seed)[0]
