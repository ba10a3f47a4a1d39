"""Scalar scores for a distilled motion field.

Three axes stand in for the perceptual metrics this desk-scale setup cannot
run: how much the points move, how smoothly they move, and how far the rest
pose drifted from the canonical scene. The staticness score compares the
adapter against the base model on held-out static clips.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .diffusion import NoiseSchedule, add_noise
from .gradcore import ContractViolation
from .inversion import ddim_denoise, make_eps_fn
from .render import render_image
from .scene import Camera, deform_scene


@dataclass(frozen=True)
class MetricsReport:
    motion_magnitude: float   # mean per-point displacement, scene units
    temporal_jerk: float      # max consecutive-frame mean displacement
    appearance_drift: float   # L1 gap between canonical and tau=0 renders
    staticness: float         # adapter/base TD-energy ratio; 0 when unscored

    FIELDS = ("motion_magnitude", "temporal_jerk", "appearance_drift",
              "staticness")

    def row(self):
        return [getattr(self, k) for k in self.FIELDS]


def eval_cameras(n=8, elevation_deg=20.0, radius=3.5, focal=44.0,
                 width=32, height=32) -> list[Camera]:
    """n cameras evenly spaced in azimuth at a fixed elevation."""
    if n < 1:
        raise ContractViolation("need at least one evaluation camera")
    return [Camera(360.0 * k / n, elevation_deg, radius, focal, width, height)
            for k in range(n)]


def motion_magnitude(traj, canon) -> float:
    d = gc.values(traj) - np.asarray(canon)[None]
    return float(np.sqrt((d ** 2).sum(axis=2)).mean())


def temporal_jerk(traj) -> float:
    steps = np.diff(gc.values(traj), axis=0)
    if len(steps) == 0:
        return 0.0
    return float(np.sqrt((steps ** 2).sum(axis=2)).mean(axis=1).max())


def appearance_drift(scene, field, cameras) -> float:
    with gc.no_grad():
        rest = deform_scene(scene, field, 0.0)
        gaps = [np.abs(gc.values(render_image(scene, cam))
                       - gc.values(render_image(rest, cam))).mean()
                for cam in cameras]
    return float(np.mean(gaps))


def td_energy(video) -> float:
    """Mean squared difference between consecutive frames."""
    d = np.diff(gc.values(video), axis=0)
    return float((d * d).mean())


def lora_staticness(model, adapter, static_videos, static_class,
                    sched: NoiseSchedule, t_frac=0.8, seed=0) -> float:
    """TD-energy ratio of adapter vs base x0 estimates on held-out static clips.

    Each clip is noised to round(t_frac * T) with shared stochastic noise and
    read back out by each model, one DDIM step per timestep, under the static
    condition. The iterative readout averages the injected noise away, so the
    ratio compares what the priors regenerate: an adapter that truly pins
    frames together scores near zero, one that mimics the base scores near 1.

    A one-step readout does not work here: both models then carry the same
    irreducible per-frame estimation noise, which floors the ratio near 1
    no matter how static the adapter is.
    """
    t = int(round(t_frac * sched.num_steps))
    fn_base = make_eps_fn(model, None, static_class, sched)
    fn_lora = make_eps_fn(model, adapter, static_class, sched)
    rng = np.random.default_rng(seed)
    e_base = e_lora = 0.0
    for video in static_videos:
        video = gc.values(video)
        x_t = add_noise(video, t, rng.standard_normal(video.shape), sched)
        e_base += td_energy(ddim_denoise(x_t, t, fn_base, sched, t))
        e_lora += td_energy(ddim_denoise(x_t, t, fn_lora, sched, t))
    if e_base == 0.0:
        raise ContractViolation("degenerate staticness probe: base TD is zero")
    return e_lora / e_base


def evaluate(scene, field, cameras, times, staticness=0.0) -> MetricsReport:
    """Score one field; staticness is stitched in by callers that have models."""
    canon = gc.values(scene.positions)
    with gc.no_grad():
        traj = gc.values(field.trajectory(canon, times))
    report = MetricsReport(motion_magnitude(traj, canon), temporal_jerk(traj),
                           appearance_drift(scene, field, cameras),
                           float(staticness))
    if not all(np.isfinite(report.row())):
        raise ContractViolation(f"non-finite metrics: {report}")
    return report


# -- artifact writers ---------------------------------------------------------


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.FIELDS)
        writer.writerow([repr(v) for v in report.row()])


def write_metrics_text(path, report: MetricsReport) -> None:
    with open(path, "w") as fh:
        for key, val in zip(MetricsReport.FIELDS, report.row()):
            fh.write(f"{key}={val!r}\n")


def read_metrics_text(path) -> MetricsReport:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            if key not in MetricsReport.FIELDS:
                raise ContractViolation(f"unknown metrics key {key!r}")
            values[key] = float(val)
    if set(values) != set(MetricsReport.FIELDS):
        raise ContractViolation("metrics file is missing keys")
    return MetricsReport(**values)


class PhaseTimer:
    """Wall-clock bookkeeping, written apart from metrics to keep those
    bit-reproducible."""

    def __init__(self):
        self.spans = {}

    def time(self, name: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.tic = time.perf_counter()

            def __exit__(self, *exc):
                timer.spans[name] = timer.spans.get(name, 0.0) \
                    + time.perf_counter() - self.tic

        return _Span()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for name in sorted(self.spans):
                fh.write(f"{name}={self.spans[name]:.3f}s\n")
