"""Motion regularizers: trajectory total variation and local rigidity.

Both consume a trajectory (T, N, 3) of deformed positions. The rigidity term
compares each point's deformed neighborhood edges against the best-fit
rotation of its canonical edges (weighted Kabsch); the rotations are
recomputed every call from values and held constant under differentiation,
which matches the true gradient at the Kabsch optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import gradcore as gc
from .gradcore import ContractViolation


def tv3d_loss(traj, scale=1.0):
    """Mean L1 step between consecutive frames: sum |x_t - x_{t-1}| / (N (T-1))."""
    shape = gc.values(traj).shape
    if len(shape) != 3 or shape[0] < 2:
        raise ContractViolation(f"trajectory must be (T>=2, N, 3), got {shape}")
    t, n, _ = shape
    diffs = traj[1:] - traj[:-1]
    return abs(diffs).sum() * (scale / (n * (t - 1)))


# -- neighborhoods ---------------------------------------------------------------


@dataclass
class Neighborhoods:
    """Directed edges center -> neighbor with Gaussian distance weights."""

    center: np.ndarray    # (E,) int
    neighbor: np.ndarray  # (E,) int
    weight: np.ndarray    # (E,) float
    n_points: int
    radius: float

    def edges_of(self, j: int) -> np.ndarray:
        return self.neighbor[self.center == j]


def build_neighborhoods(positions, radius: float | None = None,
                        k_fallback: int = 8) -> Neighborhoods:
    """Radius query around each point; isolated points fall back to k-nearest.

    Default radius is 10% of the bounding-box diagonal; weights are
    exp(-d^2 / (2 h^2)) with h = radius / 2. Built once from canonical
    positions and kept frozen afterwards.
    """
    pos = np.asarray(gc.values(positions), dtype=np.float64)
    n = pos.shape[0]
    if pos.ndim != 2 or pos.shape[1] != 3 or n < 2:
        raise ContractViolation(f"need (N>=2, 3) positions, got {pos.shape}")
    if radius is None:
        diag = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
        radius = 0.1 * diag
    if radius <= 0:
        raise ContractViolation("neighborhood radius must be positive")
    tree = cKDTree(pos)
    centers, neighbors = [], []
    for j in range(n):
        idx = [i for i in tree.query_ball_point(pos[j], radius) if i != j]
        if not idx:
            k = min(k_fallback, n - 1)
            _, near = tree.query(pos[j], k=k + 1)
            idx = [int(i) for i in np.atleast_1d(near) if i != j][:k]
        centers.extend([j] * len(idx))
        neighbors.extend(sorted(idx))
    center = np.asarray(centers, dtype=np.int64)
    neighbor = np.asarray(neighbors, dtype=np.int64)
    d = np.linalg.norm(pos[neighbor] - pos[center], axis=1)
    h = radius / 2.0
    weight = np.exp(-(d * d) / (2.0 * h * h))
    return Neighborhoods(center, neighbor, weight, n, float(radius))


# -- rigidity ---------------------------------------------------------------------


def _kabsch_batch(s: np.ndarray) -> np.ndarray:
    """Best rotations for a stack of 3x3 cross-covariances sum(w ec ed^T)."""
    u, _, vt = np.linalg.svd(s)
    r = vt.transpose(0, 2, 1) @ u.transpose(0, 2, 1)
    flip = np.linalg.det(r) < 0
    if np.any(flip):
        vt[flip, 2, :] *= -1.0
        r = vt.transpose(0, 2, 1) @ u.transpose(0, 2, 1)
    return r


def optimal_rotation(edges_canon: np.ndarray, edges_def: np.ndarray,
                     weights: np.ndarray) -> np.ndarray:
    """Rotation minimizing sum w |e_def - R e_canon|^2 for one neighborhood."""
    ec = np.asarray(edges_canon, dtype=np.float64)
    ed = np.asarray(edges_def, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    s = (w * ec).T @ ed
    return _kabsch_batch(s[None])[0]


def arap_loss(traj, canon_positions, nbhd: Neighborhoods, scale=1.0):
    """Weighted rigidity residual, normalized by N*T (raw value = loss * N * T)."""
    canon = np.asarray(gc.values(canon_positions), dtype=np.float64)
    tshape = gc.values(traj).shape
    if canon.shape[0] != nbhd.n_points or tshape[1] != nbhd.n_points:
        raise ContractViolation("neighborhoods built for a different point count")
    t = tshape[0]
    src, dst, w = nbhd.center, nbhd.neighbor, nbhd.weight
    ec = canon[dst] - canon[src]                       # (E, 3) constants
    wc = (w[:, None] * ec)
    total = None
    for k in range(t):
        p = traj[k]
        ed = p[dst] - p[src]
        ed_vals = gc.values(ed)
        s = np.zeros((nbhd.n_points, 3, 3))
        np.add.at(s, src, wc[:, :, None] * ed_vals[:, None, :])
        rot = _kabsch_batch(s)                         # constants under the tape
        target = np.einsum("eij,ej->ei", rot[src], ec)
        d = ed - target
        term = ((d * d).sum(axis=1) * w).sum()
        total = term if total is None else total + term
    return total * (scale / (nbhd.n_points * t))
