"""HexPlane motion field: factored space-time feature grids plus a tiny decoder.

Each level carries six feature planes, three spatial (xy, xz, yz) and three
temporal (xt, yt, zt). A query bilinearly interpolates all six, multiplies
them elementwise, concatenates levels, and decodes through one hidden tanh
layer into a position offset and a quaternion offset. Output heads start at
zero so a fresh field is exactly the identity deformation.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation, ParamStore

_SPATIAL = (("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2))
_TEMPORAL = (("xt", 0), ("yt", 1), ("zt", 2))


def bilinear_interp(grid, a, b):
    """Sample a (Ra, Rb, F) plane at unit coordinates a, b (each (N,) in [0,1])."""
    ra, rb, f = gc.values(grid).shape
    ua = a * (ra - 1)
    ub = b * (rb - 1)
    ia = np.clip(np.floor(ua).astype(np.int64), 0, ra - 2)
    ib = np.clip(np.floor(ub).astype(np.int64), 0, rb - 2)
    fa = (ua - ia).reshape(-1, 1)
    fb = (ub - ib).reshape(-1, 1)
    flat = grid.reshape(ra * rb, f)
    g00 = flat[ia * rb + ib]
    g01 = flat[ia * rb + ib + 1]
    g10 = flat[(ia + 1) * rb + ib]
    g11 = flat[(ia + 1) * rb + ib + 1]
    return ((1 - fa) * (1 - fb)) * g00 + ((1 - fa) * fb) * g01 \
        + (fa * (1 - fb)) * g10 + (fa * fb) * g11


def interpolate_time_grid(frames: int) -> np.ndarray:
    """Uniform [0,1] grid with 2T-1 entries; even indices hit the T-grid exactly."""
    if frames < 2:
        raise ContractViolation("need at least two frames to interpolate")
    return np.linspace(0.0, 1.0, 2 * frames - 1)


class MotionField:
    """Deformation field over a fixed bounding box, parameters in a ParamStore."""

    def __init__(self, bbox_lo, bbox_hi, spatial_res=(8, 16), time_res=8,
                 features=8, hidden=32, init_scale=1e-2, grid_lr=2e-3,
                 mlp_lr=2e-5, seed=0):
        self.lo = np.asarray(bbox_lo, dtype=np.float64)
        self.hi = np.asarray(bbox_hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,) or np.any(self.hi <= self.lo):
            raise ContractViolation("bad bounding box")
        if any(r < 2 for r in spatial_res) or time_res < 2:
            raise ContractViolation("plane resolutions must be >= 2")
        self.spatial_res = tuple(int(r) for r in spatial_res)
        self.time_res = int(time_res)
        self.features = int(features)
        self.clamp_warnings = 0

        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        # planes fuse by product, so they must start near one, not near zero:
        # a zero-centered init collapses the fused features (and their
        # gradients) to ~init_scale^6 and the field never wakes up
        for li, rs in enumerate(self.spatial_res):
            for name, *_ in _SPATIAL:
                self.store.add(f"hexplane.L{li}.{name}",
                               1.0 + rng.uniform(-init_scale, init_scale,
                                                 (rs, rs, features)),
                               lr=grid_lr)
            for name, _ in _TEMPORAL:
                self.store.add(f"hexplane.L{li}.{name}",
                               1.0 + rng.uniform(-init_scale, init_scale,
                                                 (rs, time_res, features)),
                               lr=grid_lr)
        fan_in = len(self.spatial_res) * features
        self.store.add("decoder.hidden_w",
                       rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, hidden)), lr=mlp_lr)
        self.store.add("decoder.hidden_b", np.zeros(hidden), lr=mlp_lr)
        self.store.add("decoder.dpos_w", np.zeros((hidden, 3)), lr=mlp_lr)
        self.store.add("decoder.dpos_b", np.zeros(3), lr=mlp_lr)
        self.store.add("decoder.drot_w", np.zeros((hidden, 4)), lr=mlp_lr)
        self.store.add("decoder.drot_b", np.zeros(4), lr=mlp_lr)

    def _unit_coords(self, pts: np.ndarray, tau: float):
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractViolation(f"query wants (N, 3) points, got {pts.shape}")
        unit = (pts - self.lo) / (self.hi - self.lo)
        oob = int(np.count_nonzero((unit < 0.0) | (unit > 1.0)))
        if not 0.0 <= tau <= 1.0:
            oob += 1
        self.clamp_warnings += oob
        return np.clip(unit, 0.0, 1.0), float(np.clip(tau, 0.0, 1.0))

    def features_at(self, pts: np.ndarray, tau: float):
        """Fused (N, levels*F) feature rows for unit-free world points."""
        unit, tau = self._unit_coords(pts, tau)
        n = unit.shape[0]
        tvec = np.full(n, tau)
        per_level = []
        for li in range(len(self.spatial_res)):
            fused = None
            for name, ia, ib in _SPATIAL:
                s = bilinear_interp(self.store[f"hexplane.L{li}.{name}"],
                                    unit[:, ia], unit[:, ib])
                fused = s if fused is None else fused * s
            for name, ia in _TEMPORAL:
                s = bilinear_interp(self.store[f"hexplane.L{li}.{name}"],
                                    unit[:, ia], tvec)
                fused = fused * s
            per_level.append(fused)
        return gc.concat(per_level, axis=1)

    def query(self, pts: np.ndarray, tau: float):
        """(dpos, drot) offsets at time tau; each row matches a query point."""
        feat = self.features_at(pts, tau)
        h = gc.tanh(gc.matmul(feat, self.store["decoder.hidden_w"])
                    + self.store["decoder.hidden_b"])
        dpos = gc.matmul(h, self.store["decoder.dpos_w"]) + self.store["decoder.dpos_b"]
        drot = gc.matmul(h, self.store["decoder.drot_w"]) + self.store["decoder.drot_b"]
        return dpos, drot

    def trajectory(self, pts: np.ndarray, times):
        """Deformed positions stacked over times: (T, N, 3)."""
        rows = []
        for t in times:
            dpos, _ = self.query(pts, float(t))
            rows.append(pts + dpos)
        return gc.stack(rows, axis=0)

    @classmethod
    def from_scene_bbox(cls, scene, margin=0.2, **kwargs):
        pos = gc.values(scene.positions)
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        pad = margin * (hi - lo).max() + 1e-6
        return cls(lo - pad, hi + pad, **kwargs)
