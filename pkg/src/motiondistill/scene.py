"""Canonical Gaussian scenes, cameras, and time-warped copies.

A scene is a struct-of-arrays over N isotropic-footprint Gaussians
(position, orientation quaternion, per-axis scale, opacity, color) plus a
background color. Deformation replaces positions/rotations with offsets
queried from a motion field; scales, opacities and colors stay canonical.
Arrays may be plain ndarrays or gradcore Tensors so the same code serves
optimization and plain evaluation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation


@dataclass
class GaussianPoint:
    """One scene element, mostly used at the file boundary."""

    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) wxyz, unit norm
    scale: np.ndarray     # (3,) positive
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) in [0, 1]


@dataclass
class CanonicalScene:
    positions: object     # (N, 3) ndarray or Tensor
    rotations: object     # (N, 4) ndarray or Tensor
    scales: np.ndarray    # (N, 3)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray    # (N, 3)
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.positions, gc.Tensor):
            self.positions = np.asarray(self.positions, dtype=np.float64)
        if not isinstance(self.rotations, gc.Tensor):
            self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.opacities = np.asarray(self.opacities, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def n_points(self) -> int:
        return gc.values(self.positions).shape[0]

    def validate(self) -> "CanonicalScene":
        pos, rot = gc.values(self.positions), gc.values(self.rotations)
        n = pos.shape[0]
        if pos.shape != (n, 3) or rot.shape != (n, 4) or self.scales.shape != (n, 3) \
                or self.opacities.shape != (n,) or self.colors.shape != (n, 3) \
                or self.background.shape != (3,):
            raise ContractViolation("scene arrays have inconsistent shapes")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(rot)):
            raise ContractViolation("scene contains non-finite values")
        if np.any(np.abs(np.linalg.norm(rot, axis=1) - 1.0) > 1e-9):
            raise ContractViolation("rotations must be unit quaternions (1e-9)")
        if np.any(self.scales <= 0):
            raise ContractViolation("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ContractViolation("opacities must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)) \
                or np.any((self.background < 0) | (self.background > 1)):
            raise ContractViolation("colors must lie in [0, 1]")
        return self

    def points(self):
        pos, rot = gc.values(self.positions), gc.values(self.rotations)
        for i in range(self.n_points):
            yield GaussianPoint(pos[i], rot[i], self.scales[i],
                                float(self.opacities[i]), self.colors[i])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (gc.values(self.positions), gc.values(self.rotations),
                    self.scales, self.opacities, self.colors, self.background):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


# -- text scene format --------------------------------------------------------
#
# header:  N=<count> bg=<r> <g> <b>
# N lines: x y z qw qx qy qz sx sy sz opacity r g b
# blank lines and '#' comments are skipped


def save_scene(path, scene: CanonicalScene) -> None:
    pos, rot = gc.values(scene.positions), gc.values(scene.rotations)
    lines = ["N=%d bg=%r %r %r" % (scene.n_points, *map(float, scene.background))]
    for i in range(scene.n_points):
        vals = [*pos[i], *rot[i], *scene.scales[i], scene.opacities[i], *scene.colors[i]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path) -> CanonicalScene:
    with open(path) as fh:
        rows = [ln.strip() for ln in fh]
    rows = [r for r in rows if r and not r.startswith("#")]
    if not rows:
        raise ContractViolation(f"{path}: empty scene file")
    head = rows[0].split()
    if len(head) != 4 or not head[0].startswith("N=") or not head[1].startswith("bg="):
        raise ContractViolation(f"{path}: bad header {rows[0]!r}")
    try:
        n = int(head[0][2:])
        bg = np.array([float(head[1][3:]), float(head[2]), float(head[3])])
    except ValueError as e:
        raise ContractViolation(f"{path}: bad header ({e})") from None
    body = rows[1:]
    if len(body) != n:
        raise ContractViolation(f"{path}: header says {n} points, found {len(body)}")
    data = np.zeros((n, 14))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 14:
            raise ContractViolation(f"{path}: line {i + 2}: expected 14 fields, got {len(parts)}")
        try:
            data[i] = [float(v) for v in parts]
        except ValueError as e:
            raise ContractViolation(f"{path}: line {i + 2}: {e}") from None
    return CanonicalScene(positions=data[:, 0:3], rotations=data[:, 3:7],
                          scales=data[:, 7:10], opacities=data[:, 10],
                          colors=data[:, 11:14], background=bg).validate()


# -- camera --------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Pinhole looking at the origin from a sphere, world up is +z."""

    azimuth_deg: float
    elevation_deg: float
    radius: float
    focal: float   # pixels
    width: int
    height: int

    def eye(self) -> np.ndarray:
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        return self.radius * np.array([np.cos(el) * np.cos(az),
                                       np.cos(el) * np.sin(az),
                                       np.sin(el)])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward), orthonormal, forward points at the origin."""
        eye = self.eye()
        fwd = -eye / np.linalg.norm(eye)
        world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, world_up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # looking straight up/down
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
            nr = np.linalg.norm(right)
        right = right / nr
        up = np.cross(right, fwd)
        return right, up, fwd

    @property
    def center(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


def sample_camera(rng: np.random.Generator, azimuth_range=(0.0, 360.0),
                  elevation_range=(-10.0, 60.0), radius=3.5, focal=44.0,
                  width=32, height=32) -> Camera:
    az = float(rng.uniform(*azimuth_range))
    el = float(rng.uniform(*elevation_range))
    return Camera(az, el, radius, focal, width, height)


# -- deformation -----------------------------------------------------------------


def normalize_rows(q):
    """Unit-normalize the rows of an (N, k) array or Tensor."""
    n2 = (q * q).sum(axis=1, keepdims=True)
    return q / gc.sqrt(n2)


def deform_scene(scene: CanonicalScene, field, tau: float) -> CanonicalScene:
    """Scene warped to time tau; positions/rotations carry the field's tape."""
    if field is None:
        return scene
    dpos, drot = field.query(gc.values(scene.positions), tau)
    return CanonicalScene(positions=scene.positions + dpos,
                          rotations=normalize_rows(scene.rotations + drot),
                          scales=scene.scales, opacities=scene.opacities,
                          colors=scene.colors, background=scene.background)


def luminance(video):
    """Rec.601 luma; collapses the trailing RGB axis to one channel."""
    r = video[..., 0:1]
    g = video[..., 1:2]
    b = video[..., 2:3]
    return 0.299 * r + 0.587 * g + 0.114 * b
