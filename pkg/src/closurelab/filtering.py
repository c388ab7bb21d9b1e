"""Temporal box filtering and exact subgrid-stress extraction.

A box filter of width Delta averages a signal over a centered window
[t - Delta/2, t + Delta/2].  On a uniform grid with Delta = K*dt (K even)
the integral is approximated by composite trapezoid quadrature over the
K+1 samples spanning the window.  Filtering the state gives xbar, the
fluctuation is x' = x - xbar, and the exact subgrid stress is

    tau = boxfilter(f(x)) - f(xbar)

with the same quadrature weights in both filter applications.  That shared
linear stencil is what makes tau vanish identically on linear components
of f.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dynamics import DEFAULT_PARAMS, Trajectory, lorenz_rhs
from .exceptions import OddStrideError, StencilTooWideError


@dataclass(frozen=True)
class FilterSpec:
    """Box-filter geometry: width Delta spans stride_k fine steps."""

    width_delta: float
    stride_k: int

    def __post_init__(self):
        if self.width_delta <= 0:
            raise ValueError(f"width_delta must be positive, got {self.width_delta}")
        if self.stride_k < 1:
            raise ValueError(f"stride_k must be >= 1, got {self.stride_k}")

    @classmethod
    def from_dt(cls, dt, stride_k):
        return cls(width_delta=stride_k * dt, stride_k=int(stride_k))

    def check_dt(self, dt):
        """The spec only makes sense when Delta = K*dt on the target grid."""
        if abs(self.width_delta - self.stride_k * dt) > 1e-12:
            raise ValueError(
                f"width_delta={self.width_delta} != stride_k*dt={self.stride_k * dt} "
                "(filter width must be a whole number of fine steps)"
            )

    def weights(self):
        """Composite trapezoid weights over K+1 samples; sums to 1."""
        if self.stride_k % 2 != 0:
            raise OddStrideError(f"stride_k must be even for a centered stencil, got {self.stride_k}")
        w = np.full(self.stride_k + 1, 1.0 / self.stride_k)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w


@dataclass
class FilteredBundle:
    """Aligned fine/filtered/fluctuation/SGS series on the retained grid.

    ``offset`` is the index into the original fine trajectory of the first
    retained sample (= K/2, the first index with a full centered stencil).
    fine = filtered + fluctuations at every index by construction.
    """

    fine: Trajectory
    filtered: Trajectory
    fluctuations: Trajectory
    exact_tau: Trajectory
    spec: FilterSpec
    offset: int

    def __len__(self):
        return len(self.filtered)


def _filter_states(states, spec: FilterSpec):
    w = spec.weights()
    if len(states) < spec.stride_k + 1:
        raise StencilTooWideError(
            f"trajectory has {len(states)} samples but the stencil needs {spec.stride_k + 1}"
        )
    # (n-K, K+1, d) windows contracted against the stencil in one BLAS call
    windows = sliding_window_view(states, spec.stride_k + 1, axis=0)
    return windows @ w


def box_filter(traj: Trajectory, spec: FilterSpec) -> Trajectory:
    """Apply the centered box filter; boundary samples without a full
    stencil are dropped, so the output starts K/2 steps into the input."""
    spec.check_dt(traj.dt)
    filtered = _filter_states(traj.states, spec)
    half = spec.stride_k // 2
    return Trajectory(dt=traj.dt, t0=traj.t0 + half * traj.dt, states=filtered)


def compute_exact_sgs(fine: Trajectory, spec: FilterSpec, p=DEFAULT_PARAMS) -> FilteredBundle:
    """Filter a fine trajectory and extract fluctuations and exact SGS."""
    filtered = box_filter(fine, spec)
    half = spec.stride_k // 2
    n = len(filtered)
    aligned = Trajectory(dt=fine.dt, t0=filtered.t0, states=fine.states[half : half + n].copy())
    fbar = _filter_states(lorenz_rhs(fine.states, p), spec)
    tau = fbar - lorenz_rhs(filtered.states, p)
    fluct = aligned.states - filtered.states
    return FilteredBundle(
        fine=aligned,
        filtered=filtered,
        fluctuations=Trajectory(dt=fine.dt, t0=filtered.t0, states=fluct),
        exact_tau=Trajectory(dt=fine.dt, t0=filtered.t0, states=tau),
        spec=spec,
        offset=half,
    )


def subsample(bundle: FilteredBundle, step: int) -> FilteredBundle:
    """Keep every `step`-th retained sample (coarse grid spacing step*dt)."""
    step = int(step)
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step == 1:
        return bundle

    def pick(traj: Trajectory) -> Trajectory:
        return Trajectory(dt=traj.dt * step, t0=traj.t0, states=traj.states[::step].copy())

    return FilteredBundle(
        fine=pick(bundle.fine),
        filtered=pick(bundle.filtered),
        fluctuations=pick(bundle.fluctuations),
        exact_tau=pick(bundle.exact_tau),
        spec=bundle.spec,
        offset=bundle.offset,
    )
