"""Temporal upsampling, SDEdit-style smoothing, and L1 re-fit of the field.

The refiner is any denoiser exposed through predict_eps; the pass never
touches denoiser or scene parameters, only the motion field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .diffusion import NoiseSchedule, add_noise
from .distill import render_luma_video
from .gradcore import ContractViolation, NumericalAbort
from .inversion import ddim_denoise, make_eps_fn
from .motionfield import interpolate_time_grid


@dataclass(frozen=True)
class RefineConfig:
    strength: float = 0.4      # fraction of the schedule the edit climbs to
    n_strides: int = 20
    iterations: int = 100
    condition: int = 2
    seed: int = 0

    def validate(self) -> "RefineConfig":
        if not 0.0 < self.strength < 1.0:
            raise ContractViolation("edit strength must lie strictly in (0, 1)")
        if self.n_strides < 1 or self.iterations < 0:
            raise ContractViolation("bad stride/iteration counts")
        return self


def render_upsampled(scene, field, cam, frames: int):
    """(2T-1, H, W, 1) luminance render on the doubled time grid.

    Even indices land exactly on the T-frame grid, so a T-frame render embeds
    bit-exactly into this one.
    """
    return render_luma_video(scene, field, cam, interpolate_time_grid(frames))


def sdedit_refine(video, model, cond, sched: NoiseSchedule, strength=0.4,
                  n_strides=20, seed=0, adapter=None) -> np.ndarray:
    """Noise the video to round(strength * T_diff), then walk back down.

    strength 0 is an empty edit (input returned untouched); strength 1
    resamples from (almost) pure noise, keeping nothing of the input.
    """
    if not 0.0 <= strength <= 1.0:
        raise ContractViolation("edit strength must lie in [0, 1]")
    video = np.asarray(gc.values(video), dtype=np.float64)
    t_star = int(round(strength * sched.num_steps))
    if t_star == 0:
        return video.copy()
    eps = np.random.default_rng(seed).standard_normal(video.shape)
    x_t = add_noise(video, t_star, eps, sched)
    fn = make_eps_fn(model, adapter, cond, sched)
    return ddim_denoise(x_t, t_star, fn, sched, n_strides)


def distill_refined(field, scene, cam, refined, times, iterations=100, lr=None):
    """Pull the field's renders toward the refined video with a mean-L1 fit.

    Returns (field, per-iteration loss history). Only field parameters move.
    """
    refined = np.asarray(gc.values(refined), dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    want = (len(times), cam.height, cam.width, 1)
    if refined.shape != want:
        raise ContractViolation(f"refined video is {refined.shape}, camera/time "
                                f"grid implies {want}")
    canon_sum = scene.checksum()
    lr_overrides = None
    if lr is not None:
        lr_overrides = {name: lr for name in field.store.names()}
    opt = gc.Adam(field.store, lr_overrides=lr_overrides)
    tape = gc.GradientTape(field.store)
    history = []
    for _ in range(iterations):
        loss = abs(render_luma_video(scene, field, cam, times) - refined).mean()
        val = float(gc.values(loss))
        if not np.isfinite(val):
            raise NumericalAbort("non-finite refinement loss")
        opt.step(tape.backward(loss))
        history.append(val)
    if scene.checksum() != canon_sum:
        raise gc.InternalError("canonical scene mutated during refinement")
    return field, history


def refine_pass(scene, field, refiner, sched: NoiseSchedule, cameras, frames: int,
                config: RefineConfig, adapter=None, lr=None):
    """Upsample, SDEdit, and re-fit once per camera; returns (field, videos, history).

    videos maps camera index to its refined clip so callers can export them.
    """
    config.validate()
    times = interpolate_time_grid(frames)
    history = []
    videos = []
    for k, cam in enumerate(cameras):
        with gc.no_grad():
            raw = gc.values(render_upsampled(scene, field, cam, frames))
        refined = sdedit_refine(raw, refiner, config.condition, sched,
                                strength=config.strength,
                                n_strides=config.n_strides,
                                seed=config.seed + k, adapter=adapter)
        videos.append(refined)
        field, hist = distill_refined(field, scene, cam, refined, times,
                                      iterations=config.iterations, lr=lr)
        history.extend(hist)
    return field, videos, history
