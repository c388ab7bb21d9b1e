"""Distribution distances between trajectories and sample sets.

Rollout quality is judged distributionally: the Wasserstein-1 distance
between 1-D marginal sample sets (per state coordinate), and the Hellinger
distance between 2-D histograms of projected trajectories.  Both are
computed from empirical data only, no density estimation.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_count, check_samples
from .dynamics import Trajectory


def wasserstein1(a, b) -> float:
    """W1 distance between two empirical 1-D distributions.

    Computed as the integral of |F_a - F_b| over the merged sample grid,
    which is exact for empirical cdfs of any sizes.  For equal sizes this
    equals the mean absolute difference of the sorted samples.
    """
    a = np.sort(check_samples(a, "a"))
    b = np.sort(check_samples(b, "b"))
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    # cdf values just right of each grid point
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b)[:-1] * np.diff(grid)))


def trajectory_w1(a: Trajectory, b: Trajectory):
    """Per-coordinate W1 distances between two trajectories' marginals."""
    d = a.states.shape[1]
    if b.states.shape[1] != d:
        raise ValueError("trajectories have different state dimensions")
    return np.array([wasserstein1(a.states[:, j], b.states[:, j]) for j in range(d)])


@dataclass
class Hist2D:
    """Normalized 2-D histogram (probability mass per bin)."""

    xedges: np.ndarray
    yedges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        total = self.mass.sum()
        if total <= 0:
            raise ValueError("histogram holds no mass")
        self.mass = self.mass / total


def shared_edges(u, v, bins=50, pad=0.05):
    """Common bin edges spanning the union support, expanded by `pad`."""
    lo = min(u.min(), v.min())
    hi = max(u.max(), v.max())
    span = hi - lo
    if span == 0:  # degenerate support still needs a nonempty range
        span = max(abs(lo), 1.0)
    return np.linspace(lo - pad * span, hi + pad * span, bins + 1)


def hist2d(x, y, xedges, yedges) -> Hist2D:
    counts, _, _ = np.histogram2d(x, y, bins=(xedges, yedges))
    return Hist2D(xedges=xedges, yedges=yedges, mass=counts)


def hellinger2d(a: Trajectory, b: Trajectory, axes=(0, 1), bins=50) -> float:
    """Hellinger distance between 2-D projections of two trajectories.

    Both trajectories are binned on identical edges covering the union of
    their supports (5% padding), so the result lies in [0, 1]: 0 for equal
    histograms, 1 for disjoint supports.
    """
    bins = check_count(bins, "bins")
    i, j = axes
    ax, ay = check_samples(a.states[:, i], "a"), check_samples(a.states[:, j], "a")
    bx, by = check_samples(b.states[:, i], "b"), check_samples(b.states[:, j], "b")
    xedges = shared_edges(ax, bx, bins)
    yedges = shared_edges(ay, by, bins)
    p = hist2d(ax, ay, xedges, yedges).mass
    q = hist2d(bx, by, xedges, yedges).mass
    return float(np.sqrt(0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))


def histogram1d(samples, bins, range=None):
    """Normalized 1-D histogram; masses sum to 1."""
    samples = check_samples(samples, "samples")
    bins = check_count(bins, "bins")
    if range is not None and range[1] <= range[0]:
        raise ValueError(f"empty histogram range {range}")
    counts, edges = np.histogram(samples, bins=bins, range=range)
    total = counts.sum()
    if total == 0:
        raise ValueError("no samples fall inside the histogram range")
    return counts / total, edges
