"""Score-distillation estimators and the motion-field optimization loop.

Both estimators build a surrogate scalar sum(x_t * residual) whose gradient
w.r.t. the render equals sqrt(abar_t) * residual: the residual is detached,
and x_t depends on the field only through the clean render. Noise prediction
and inversion run under no_grad throughout, so denoiser parameters sit
outside every tape by construction.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import gradcore as gc
from .diffusion import NULL_CLASS, NoiseSchedule, add_noise
from .gradcore import ContractViolation, NumericalAbort
from .inversion import invert_to, make_eps_fn
from .regularize import arap_loss, build_neighborhoods, tv3d_loss
from .render import render_image, render_video
from .scene import luminance, sample_camera

MODES = ("msd", "sds")
W_CHOICES = ("one-minus-abar", "constant")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "msd"
    faithful_noise: bool = True
    dual_distribution: bool = True
    guidance_scale: float = 1.0      # s; only > 1 engages CFG (SDS arms)
    w_choice: str = "one-minus-abar"
    t_lo: float = 0.2                # schedule fractions for t sampling
    t_hi: float = 0.8
    iterations: int = 300
    lambda_msd: float = 5e-3
    lambda_arap: float = 12.0
    lambda_tv: float = 5.0
    frames: int = 8
    n_strides: int = 10
    condition: int = 2               # class id for c (dynamic prompt)
    condition_static: int = 1        # class id for c' (static prompt)
    azimuth_lo: float = 0.0
    azimuth_hi: float = 360.0
    elevation_lo: float = -10.0
    elevation_hi: float = 60.0
    cam_radius: float = 3.5
    cam_focal: float = 44.0
    width: int = 32
    height: int = 32
    seed: int = 0
    checkpoint_every: int = 0        # 0 disables periodic checkpoints

    def validate(self) -> "DistillConfig":
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.w_choice not in W_CHOICES:
            raise ContractViolation(f"w_choice must be one of {W_CHOICES}")
        if min(self.lambda_msd, self.lambda_arap, self.lambda_tv) < 0:
            raise ContractViolation("loss weights must be nonnegative")
        if not 0.0 <= self.t_lo <= self.t_hi <= 1.0:
            raise ContractViolation("need 0 <= t_lo <= t_hi <= 1")
        if self.iterations < 0 or self.frames < 2 or self.n_strides < 1:
            raise ContractViolation("bad iteration/frame/stride counts")
        if self.guidance_scale < 0:
            raise ContractViolation("guidance scale must be nonnegative")
        return self


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    t: int
    azimuth_deg: float
    elevation_deg: float
    loss_total: float
    loss_distill: float
    loss_arap: float
    loss_tv: float
    grad_norm: float
    wall_time_s: float
    ok: bool

    FIELDS = ("iteration", "t", "azimuth_deg", "elevation_deg", "loss_total",
              "loss_distill", "loss_arap", "loss_tv", "grad_norm",
              "wall_time_s", "ok")

    def row(self):
        return [getattr(self, k) for k in self.FIELDS]


def make_w_fn(choice: str):
    if choice == "one-minus-abar":
        return lambda t, sched: 1.0 - sched.abar(t)
    if choice == "constant":
        return lambda t, sched: 1.0
    raise ContractViolation(f"w_choice must be one of {W_CHOICES}")


def guided_eps(model, x, t, cond, sched: NoiseSchedule, scale: float):
    """CFG combination eps(null) + s (eps(cond) - eps(null)); plain eps for s <= 1."""
    with gc.no_grad():
        e_c = gc.values(model.predict_eps(gc.values(x), t, cond, sched))
        if scale <= 1.0:
            return e_c
        e_0 = gc.values(model.predict_eps(gc.values(x), t, NULL_CLASS, sched))
    return e_0 + scale * (e_c - e_0)


def _sample_t(rng, config: DistillConfig, sched: NoiseSchedule) -> int:
    lo = max(1, int(round(config.t_lo * sched.num_steps)))
    hi = max(lo, int(round(config.t_hi * sched.num_steps)))
    return int(rng.integers(lo, hi + 1))


def sds_gradient(x0, cond, model, sched: NoiseSchedule, rng,
                 guidance_scale=7.5, w_choice="one-minus-abar",
                 t_range=(0.2, 0.8)):
    """Surrogate whose gradient is w(t) (guided eps-hat - eps) through the render.

    x0 carries the tape; returns (surrogate, info dict).
    """
    cfg = DistillConfig(t_lo=t_range[0], t_hi=t_range[1]).validate()
    t = _sample_t(rng, cfg, sched)
    eps = rng.standard_normal(gc.values(x0).shape)
    x_t = add_noise(x0, t, eps, sched)
    eps_hat = guided_eps(model, x_t, t, cond, sched, guidance_scale)
    w = make_w_fn(w_choice)(t, sched)
    residual = w * (eps_hat - eps)
    surrogate = (x_t * residual).sum()
    return surrogate, {"t": t, "residual_rms": float(np.sqrt((residual ** 2).mean()))}


def msd_residual(x0_d, x0_s, t, cond, cond_static, model, adapter,
                 sched: NoiseSchedule, rng, faithful=True, dual=True, n_strides=10):
    """Noise-space difference eps_dynamic - eps_static plus the noises used.

    Returns (residual, eps_d_noise, x_t_s) where eps_d_noise is the noise that
    rebuilds the dynamic latent via add_noise (inverted when faithful, shared
    stochastic otherwise). Everything is detached.
    """
    x0_d = np.asarray(gc.values(x0_d), dtype=np.float64)
    x0_s = np.asarray(gc.values(x0_s), dtype=np.float64)
    static_adapter = adapter if dual else None
    if faithful:
        fn_dyn = make_eps_fn(model, None, cond, sched)
        fn_sta = make_eps_fn(model, static_adapter, cond_static, sched)
        eps_d_noise = invert_to(x0_d, t, fn_dyn, sched, n_strides).eps_inv
        x_t_s = invert_to(x0_s, t, fn_sta, sched, n_strides).x_t
    else:
        eps_d_noise = rng.standard_normal(x0_d.shape)
        x_t_s = add_noise(x0_s, t, eps_d_noise, sched)
    x_t_d = add_noise(x0_d, t, eps_d_noise, sched)
    with gc.no_grad():
        eps_dyn = gc.values(model.predict_eps(x_t_d, t, cond, sched))
        eps_sta = gc.values(model.predict_eps(x_t_s, t, cond_static, sched,
                                              adapter=static_adapter))
    return eps_dyn - eps_sta, eps_d_noise, x_t_s


def render_luma_video(scene, field, cam, taus):
    """(T, H, W, 1) luminance video of the deformed scene; keeps the field tape."""
    return luminance(render_video(scene, field, cam, taus))


def render_static_video(scene, cam, n_frames: int) -> np.ndarray:
    with gc.no_grad():
        img = gc.values(luminance(render_image(scene, cam)))
    return np.repeat(img[None], n_frames, axis=0)


def msd_gradient(scene, field, cam, cond, cond_static, model, adapter,
                 sched: NoiseSchedule, config: DistillConfig, rng):
    """Motion-transport surrogate for one camera draw; returns (surrogate, info)."""
    taus = np.linspace(0.0, 1.0, config.frames)
    x0_d = render_luma_video(scene, field, cam, taus)
    x0_s = render_static_video(scene, cam, config.frames)
    t = _sample_t(rng, config, sched)
    residual, eps_d_noise, _ = msd_residual(
        x0_d, x0_s, t, cond, cond_static, model, adapter, sched, rng,
        faithful=config.faithful_noise, dual=config.dual_distribution,
        n_strides=config.n_strides)
    w = make_w_fn(config.w_choice)(t, sched)
    x_t_d = add_noise(x0_d, t, eps_d_noise, sched)
    surrogate = (x_t_d * (w * residual)).sum()
    return surrogate, {"t": t, "residual_rms": float(np.sqrt((residual ** 2).mean()))}


def distill_run(scene, field, model, adapter, sched: NoiseSchedule,
                config: DistillConfig, outdir=None):
    """Optimize the motion field; the canonical scene and models stay frozen.

    Returns (field, list of IterationReport). Three consecutive non-finite
    iterations abort the run.
    """
    config.validate()
    scene.validate()
    rng = np.random.default_rng(config.seed)
    canon_sum = scene.checksum()
    taus = np.linspace(0.0, 1.0, config.frames)
    canon_pos = gc.values(scene.positions)
    nbhd = build_neighborhoods(canon_pos)
    opt = gc.Adam(field.store)
    tape = gc.GradientTape(field.store)
    reports = []
    csv_writer = fh = None
    if outdir is not None:
        fh = open(f"{outdir}/iterations.csv", "w", newline="")
        csv_writer = csv.writer(fh)
        csv_writer.writerow(IterationReport.FIELDS)
    bad_streak = 0
    try:
        for it in range(config.iterations):
            tic = time.perf_counter()
            cam = sample_camera(
                rng, azimuth_range=(config.azimuth_lo, config.azimuth_hi),
                elevation_range=(config.elevation_lo, config.elevation_hi),
                radius=config.cam_radius, focal=config.cam_focal,
                width=config.width, height=config.height)
            ok = False
            t_drawn = -1
            vals = (float("nan"),) * 4
            grad_norm = float("nan")
            try:
                if config.mode == "msd":
                    surrogate, info = msd_gradient(
                        scene, field, cam, config.condition,
                        config.condition_static, model, adapter, sched,
                        config, rng)
                else:
                    x0_d = render_luma_video(scene, field, cam, taus)
                    surrogate, info = sds_gradient(
                        x0_d, config.condition, model, sched, rng,
                        guidance_scale=config.guidance_scale,
                        w_choice=config.w_choice,
                        t_range=(config.t_lo, config.t_hi))
                t_drawn = info["t"]
                traj = field.trajectory(canon_pos, taus)
                l_arap = arap_loss(traj, canon_pos, nbhd)
                l_tv = tv3d_loss(traj)
                loss = (config.lambda_msd * surrogate
                        + config.lambda_arap * l_arap + config.lambda_tv * l_tv)
                vals = (float(gc.values(loss)), float(gc.values(surrogate)),
                        float(gc.values(l_arap)), float(gc.values(l_tv)))
                ok = all(np.isfinite(v) for v in vals)
                if ok:
                    grads = tape.backward(loss)
                    grad_norm = float(np.sqrt(sum(float((g * g).sum())
                                                  for g in grads.values())))
                    ok = np.isfinite(grad_norm)
                    if ok:
                        opt.step(grads)
            except (np.linalg.LinAlgError, FloatingPointError):
                ok = False  # e.g. SVD fed non-finite frames; counts as a bad step
            bad_streak = 0 if ok else bad_streak + 1
            rep = IterationReport(it, t_drawn, cam.azimuth_deg, cam.elevation_deg,
                                  *vals, grad_norm, time.perf_counter() - tic, ok)
            reports.append(rep)
            if csv_writer is not None:
                csv_writer.writerow(rep.row())
            if bad_streak >= 3:
                raise NumericalAbort(f"3 consecutive non-finite iterations at {it}")
            if (outdir is not None and config.checkpoint_every > 0
                    and (it + 1) % config.checkpoint_every == 0):
                field.store.save(f"{outdir}/field_{it + 1:05d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    if scene.checksum() != canon_sum:
        raise gc.InternalError("canonical scene mutated during distillation")
    return field, reports
