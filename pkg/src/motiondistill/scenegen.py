"""Procedural canonical scenes: a blobby biped, a flat disk cluster, a box lattice.

All generators are pure functions of their seed and fit inside the default
camera frustum (radius 3.5, focal 44 at 32 px covers about 1.27 scene units
from the origin).
"""

from __future__ import annotations

import numpy as np

from .gradcore import ContractViolation
from .scene import CanonicalScene, normalize_rows

SCENE_KINDS = ("blob-biped", "disk-cluster", "box-grid")


def _random_unit_quats(rng, n):
    return normalize_rows(rng.standard_normal((n, 4)))


# (fraction of points, center xyz, axis radii xyz, base color)
_BIPED_PARTS = (
    (0.12, (0.0, 0.0, 0.55), (0.10, 0.10, 0.11), (0.85, 0.70, 0.55)),   # head
    (0.38, (0.0, 0.0, 0.10), (0.16, 0.10, 0.26), (0.30, 0.45, 0.75)),   # torso
    (0.17, (-0.11, 0.0, -0.45), (0.05, 0.05, 0.24), (0.25, 0.25, 0.35)),  # legs
    (0.17, (0.11, 0.0, -0.45), (0.05, 0.05, 0.24), (0.25, 0.25, 0.35)),
    (0.08, (-0.24, 0.0, 0.18), (0.04, 0.04, 0.16), (0.80, 0.60, 0.45)),  # arms
    (0.08, (0.24, 0.0, 0.18), (0.04, 0.04, 0.16), (0.80, 0.60, 0.45)),
)


def blob_biped(n_points=96, seed=0) -> CanonicalScene:
    """Upright figure along +z assembled from Gaussian blobs per body part."""
    rng = np.random.default_rng(seed)
    counts = [int(round(f * n_points)) for f, *_ in _BIPED_PARTS]
    counts[1] += n_points - sum(counts)  # torso absorbs rounding
    pos, col = [], []
    for (f, center, radii, base), m in zip(_BIPED_PARTS, counts):
        pos.append(np.asarray(center) + np.asarray(radii) * rng.standard_normal((m, 3)))
        col.append(np.clip(np.asarray(base) + rng.uniform(-0.1, 0.1, (m, 3)), 0, 1))
    positions = np.concatenate(pos)
    return CanonicalScene(
        positions=positions,
        rotations=_random_unit_quats(rng, n_points),
        scales=rng.uniform(0.05, 0.11, (n_points, 3)),
        opacities=rng.uniform(0.65, 0.95, n_points),
        colors=np.concatenate(col),
        background=np.array([0.05, 0.05, 0.08]),
    ).validate()


def disk_cluster(n_points=80, seed=0) -> CanonicalScene:
    """Flat annulus of Gaussians in the z=0 plane."""
    rng = np.random.default_rng(seed)
    r = np.sqrt(rng.uniform(0.15 ** 2, 0.6 ** 2, n_points))
    th = rng.uniform(0, 2 * np.pi, n_points)
    positions = np.stack([r * np.cos(th), r * np.sin(th),
                          rng.normal(0, 0.04, n_points)], axis=1)
    hue = (th / (2 * np.pi))[:, None]
    colors = np.clip(np.concatenate([hue, 0.4 + 0.3 * r[:, None],
                                     1.0 - hue], axis=1), 0, 1)
    return CanonicalScene(
        positions=positions,
        rotations=_random_unit_quats(rng, n_points),
        scales=rng.uniform(0.05, 0.1, (n_points, 3)),
        opacities=rng.uniform(0.6, 0.9, n_points),
        colors=colors,
        background=np.array([0.05, 0.05, 0.08]),
    ).validate()


def box_grid(side=4, seed=0) -> CanonicalScene:
    """side^3 lattice spanning one scene unit, colored by position."""
    if side < 2:
        raise ContractViolation("box-grid needs side >= 2")
    rng = np.random.default_rng(seed)
    axis = np.linspace(-0.5, 0.5, side)
    positions = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"),
                         axis=-1).reshape(-1, 3)
    n = side ** 3
    return CanonicalScene(
        positions=positions,
        rotations=_random_unit_quats(rng, n),
        scales=np.full((n, 3), 0.55 / side),
        opacities=np.full(n, 0.85),
        colors=positions + 0.5,
        background=np.array([0.05, 0.05, 0.08]),
    ).validate()


def gen_scene(kind: str, seed=0, n_points=96, side=4) -> CanonicalScene:
    if kind == "blob-biped":
        return blob_biped(n_points=n_points, seed=seed)
    if kind == "disk-cluster":
        return disk_cluster(n_points=n_points, seed=seed)
    if kind == "box-grid":
        return box_grid(side=side, seed=seed)
    raise ContractViolation(f"unknown scene kind {kind!r} (have {SCENE_KINDS})")
