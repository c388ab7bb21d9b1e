"""Lorenz-63 vector field, derivatives, and time integration.

The chaotic base system is

    dx/dt = sigma * (y - x)
    dy/dt = x * (r - z) - y
    dz/dt = x * y - beta * z

with the classic chaotic parameters sigma=10, r=28, beta=8/3.  The module
also provides the tangent (linearized) propagation x~' = J(x) x~, a generic
Euler-Maruyama step, and a scalar geometric-Brownian-motion simulator used
to study noise-induced stabilization of unstable drift.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_count, check_positive, check_state
from .exceptions import NonFiniteStateError


@dataclass(frozen=True)
class LorenzParams:
    """Lorenz-63 coefficients; defaults give the classic chaotic regime."""

    sigma: float = 10.0
    r: float = 28.0
    beta: float = 8.0 / 3.0

    def __post_init__(self):
        for name in ("sigma", "r", "beta"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"LorenzParams.{name} must be finite")


DEFAULT_PARAMS = LorenzParams()


@dataclass
class Trajectory:
    """Uniformly sampled time series: state k lives at t0 + k*dt.

    ``states`` has shape (n, d); ``blew_up`` marks rollouts truncated at the
    first non-finite state.
    """

    dt: float
    t0: float
    states: np.ndarray
    blew_up: bool = field(default=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.dt <= 0:
            raise ValueError(f"Trajectory.dt must be positive, got {self.dt}")
        if len(self.states) < 1:
            raise ValueError("Trajectory must hold at least one state")

    def __len__(self):
        return len(self.states)

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))


def lorenz_rhs(x, p=DEFAULT_PARAMS):
    """Vector field of the Lorenz-63 system; broadcasts over (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    out[..., 0] = p.sigma * (x[..., 1] - x[..., 0])
    out[..., 1] = x[..., 0] * (p.r - x[..., 2]) - x[..., 1]
    out[..., 2] = x[..., 0] * x[..., 1] - p.beta * x[..., 2]
    return out


def lorenz_jacobian(x, p=DEFAULT_PARAMS):
    """Jacobian of `lorenz_rhs` at x; broadcasts to (..., 3, 3)."""
    x = np.asarray(x, dtype=np.float64)
    jac = np.zeros(x.shape[:-1] + (3, 3), dtype=np.float64)
    jac[..., 0, 0] = -p.sigma
    jac[..., 0, 1] = p.sigma
    jac[..., 1, 0] = p.r - x[..., 2]
    jac[..., 1, 1] = -1.0
    jac[..., 1, 2] = -x[..., 0]
    jac[..., 2, 0] = x[..., 1]
    jac[..., 2, 1] = x[..., 0]
    jac[..., 2, 2] = -p.beta
    return jac


def lorenz_hessians(p=DEFAULT_PARAMS):
    """Per-component Hessians H[i] of the vector field (state independent).

    Component 0 is linear so H[0] = 0; the bilinear couplings x*z and x*y
    give constant symmetric H[1], H[2].
    """
    hess = np.zeros((3, 3, 3), dtype=np.float64)
    hess[1, 0, 2] = hess[1, 2, 0] = -1.0
    hess[2, 0, 1] = hess[2, 1, 0] = 1.0
    return hess


def _euler_step(rhs, x, dt):
    return x + dt * rhs(x)


def _rk2_step(rhs, x, dt):
    k1 = rhs(x)
    return x + dt * rhs(x + 0.5 * dt * k1)


def _rk4_step(rhs, x, dt):
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_STEPPERS = {"euler": _euler_step, "rk2": _rk2_step, "rk4": _rk4_step}


def integrate_ode(rhs, x0, dt, n, scheme="rk4", t0=0.0):
    """Fixed-step explicit integration of dx/dt = rhs(x).

    Returns a Trajectory of n+1 states.  Raises NonFiniteStateError as soon
    as a step produces an inf or NaN (deterministic blow-up is an error, not
    a flag, for plain ODE runs).
    """
    dt = check_positive(dt, "dt")
    n = check_count(n, "n")
    if scheme not in _STEPPERS:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {sorted(_STEPPERS)}")
    step = _STEPPERS[scheme]
    x = np.asarray(x0, dtype=np.float64).copy()
    states = np.empty((n + 1,) + x.shape, dtype=np.float64)
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            x = step(rhs, x, dt)
            if not np.all(np.isfinite(x)):
                raise NonFiniteStateError(f"non-finite state at step {k + 1} (t={t0 + (k + 1) * dt:g})")
            states[k + 1] = x
    return Trajectory(dt=dt, t0=t0, states=states)


def integrate_linearized(nominal: Trajectory, xt0, p=DEFAULT_PARAMS):
    """Propagate the tangent state along a nominal path with explicit Euler.

    x~_{k+1} = x~_k + J(x_k) x~_k dt.  On the chaotic attractor this grows
    roughly like exp(lambda_max * t), so the result is usually a partial
    trajectory with ``blew_up`` set once components overflow.
    """
    xt = check_state(xt0, name="xt0")
    dt = nominal.dt
    n = len(nominal)
    states = np.empty((n, 3), dtype=np.float64)
    states[0] = xt
    blew_up = False
    kept = n
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n - 1):
            jac = lorenz_jacobian(nominal.states[k], p)
            xt = xt + dt * (jac @ xt)
            if not np.all(np.isfinite(xt)):
                blew_up = True
                kept = k + 1
                break
            states[k + 1] = xt
    return Trajectory(dt=dt, t0=nominal.t0, states=states[:kept], blew_up=blew_up)


def em_step(x, drift, diff_diag, dt, noise):
    """One Euler-Maruyama step with diagonal diffusion.

    ``noise`` holds unit normal draws; the sqrt(dt) Brownian scaling happens
    here.  With diff_diag = 0 this reduces bitwise to a forward Euler step.
    """
    x = np.asarray(x, dtype=np.float64)
    return x + np.asarray(drift) * dt + np.asarray(diff_diag) * (np.sqrt(dt) * np.asarray(noise))


def simulate_linear_sde(lam, mu, x0, dt, n, seed):
    """Euler-Maruyama path of the scalar linear SDE dx = lam*x dt + mu*x dW.

    The true solution is geometric Brownian motion: log|x(t)/x0| has mean
    (lam - mu^2/2) t, so paths decay almost surely when lam - mu^2/2 < 0
    even for unstable drift lam > 0.
    """
    dt = check_positive(dt, "dt")
    n = check_count(n, "n")
    rng = np.random.default_rng(seed)
    path = np.empty(n + 1, dtype=np.float64)
    path[0] = x = float(x0)
    sqrt_dt = np.sqrt(dt)
    for k in range(n):
        x = x + lam * x * dt + mu * x * (sqrt_dt * rng.standard_normal())
        path[k + 1] = x
    return path
