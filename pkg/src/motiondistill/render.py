"""Differentiable splat renderer and PPM frame I/O.

Each Gaussian projects to an isotropic 2-D footprint (sigma_px =
focal * mean(scale) / depth) and contributes alpha = opacity *
exp(-d^2 / (2 sigma_px^2)), truncated at three sigma. Points are composited
front to back with transmittance taken through log space; the truncation
mask and the depth ordering are held constant under differentiation, so
gradients are exact between re-orderings. Per-point orientation does not
affect the image (footprints are isotropic by design).

Inputs may be ndarrays or gradcore Tensors; the ndarray path records no tape.
"""

from __future__ import annotations

import os

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation
from .scene import Camera, CanonicalScene, deform_scene

_NEAR = 1e-3
_ALPHA_CAP = 1.0 - 1e-12
_CUTOFF_SIGMAS = 3.0


def render_image(scene: CanonicalScene, camera: Camera):
    """Composite one (H, W, 3) image; Tensor in -> Tensor out."""
    h, w = camera.height, camera.width
    bg = scene.background
    right, up, fwd = camera.basis()
    basis = np.stack([right, up, fwd], axis=1)  # world -> camera columns
    cx, cy = camera.center

    cam = gc.matmul(scene.positions - camera.eye(), basis)  # (N, 3)
    depth_vals = gc.values(cam)[:, 2]
    keep = np.nonzero(depth_vals > _NEAR)[0]
    if keep.size == 0:
        return np.broadcast_to(bg, (h, w, 3)).copy()
    order = keep[np.argsort(depth_vals[keep], kind="stable")]  # front to back

    cam = cam[order]
    depth = cam[:, 2:3]
    u = camera.focal * cam[:, 0:1] / depth + cx
    v = cy - camera.focal * cam[:, 1:2] / depth
    sigma = camera.focal * scene.scales[order].mean(axis=1).reshape(-1, 1) / depth

    px = np.arange(w, dtype=np.float64)
    py = np.arange(h, dtype=np.float64)
    pu = np.tile(px, h)            # pixel columns, row-major
    pv = np.repeat(py, w)          # pixel rows

    du = u - pu
    dv = v - pv
    d2 = du * du + dv * dv                                  # (N, P)
    sig2 = sigma * sigma
    mask = (gc.values(d2) <= (_CUTOFF_SIGMAS ** 2) * gc.values(sig2)).astype(np.float64)
    alpha = scene.opacities[order].reshape(-1, 1) * gc.exp(-d2 / (2.0 * sig2)) * mask
    alpha = gc.clip(alpha, 0.0, _ALPHA_CAP)

    s = gc.log1p(-alpha)                                    # log survival per point
    csum = s.cumsum(axis=0)
    t_excl = gc.exp(csum - s)                               # transmittance before each point
    contrib = alpha * t_excl
    fg = gc.matmul(contrib.T, scene.colors[order])          # (P, 3)
    t_total = gc.exp(csum[-1, :]).reshape(-1, 1)
    img = fg + t_total * bg
    return img.reshape(h, w, 3)


def render_video(scene: CanonicalScene, field, camera: Camera, times):
    """Stack per-time renders into (T, H, W, 3); identical scene when field is None."""
    frames = [render_image(deform_scene(scene, field, float(t)), camera) for t in times]
    return gc.stack(frames, axis=0)


# -- PPM frames -----------------------------------------------------------------


def write_ppm(path, image) -> None:
    img = gc.values(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"write_ppm wants (H, W, 3), got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ContractViolation(f"{path}: not a P6 file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ContractViolation(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_video_frames(directory, video, times) -> list[str]:
    """frame_%04d.ppm files plus frames.txt mapping file -> time."""
    vid = gc.values(video)
    os.makedirs(directory, exist_ok=True)
    names = []
    for k in range(vid.shape[0]):
        name = f"frame_{k:04d}.ppm"
        img = vid[k]
        if img.shape[-1] == 1:  # luminance video
            img = np.repeat(img, 3, axis=-1)
        write_ppm(os.path.join(directory, name), img)
        names.append(name)
    with open(os.path.join(directory, "frames.txt"), "w") as fh:
        for name, t in zip(names, times):
            fh.write(f"{name} {float(t)!r}\n")
    return names
