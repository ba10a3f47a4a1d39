"""Deterministic DDIM forward inversion and reverse denoising.

Both directions walk an evenly spaced step grid and share one update rule:
project to the clean estimate, then re-noise at the destination step. All
model applications here run under no_grad; gradients never flow through
inversion (distillation treats its outputs as constants).

The noise predictor is passed as eps_fn(x, t) -> eps so a trained denoiser,
an adapted denoiser, and the closed-form Gaussian oracle are interchangeable.
Use make_eps_fn / make_oracle_eps_fn to build one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .diffusion import NoiseSchedule, oracle_eps
from .gradcore import ContractViolation


def make_eps_fn(model, adapter, cond, sched: NoiseSchedule):
    """Bind model, adapter, and condition into eps_fn(x, t)."""
    def eps_fn(x, t):
        with gc.no_grad():
            return gc.values(model.predict_eps(x, t, cond, sched, adapter=adapter))
    return eps_fn


def make_oracle_eps_fn(oracle, sched: NoiseSchedule):
    def eps_fn(x, t):
        return np.asarray(oracle_eps(oracle, x, t, sched))
    return eps_fn


@dataclass(frozen=True)
class InversionResult:
    t: int
    x_t: np.ndarray
    eps_inv: np.ndarray
    steps: tuple  # visited step ids, ascending from 0


def _stride_grid(t_target: int, n_strides: int) -> np.ndarray:
    return np.round(np.linspace(0, t_target, n_strides + 1)).astype(np.int64)


def predict_x0(x_t, t: int, eps_fn, sched: NoiseSchedule):
    """Clean estimate (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)."""
    ab = sched.abar(t)
    if ab == 0.0:
        raise ContractViolation("abar(t) = 0; x0 is unrecoverable")
    if t == 0:
        return np.asarray(gc.values(x_t)).copy()
    eps_hat = eps_fn(x_t, t)
    return (gc.values(x_t) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def invert_step(x_t, t: int, t_next: int, eps_fn, sched: NoiseSchedule):
    """One deterministic noising step t -> t_next (t_next == t is the identity)."""
    if t_next < t:
        raise ContractViolation(f"invert_step needs t_next >= t, got {t} -> {t_next}")
    x_t = np.asarray(gc.values(x_t))
    if t_next == t:
        return x_t
    eps_hat = eps_fn(x_t, t)
    x0_hat = predict_x0(x_t, t, lambda *_: eps_hat, sched)
    ab_next = sched.abar(t_next)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat


def invert_to(x0, t_target: int, eps_fn, sched: NoiseSchedule, n_strides: int = 10,
              trace_path=None) -> InversionResult:
    """Walk x0 up to t_target and return the latent with its implied noise.

    The returned x_t is re-rounded through eps_inv so that
    sqrt(abar) x0 + sqrt(1 - abar) eps_inv reproduces it bit-exactly.
    """
    if n_strides < 1:
        raise ContractViolation("n_strides must be >= 1")
    sched.abar(t_target)  # range check
    x0 = np.asarray(gc.values(x0), dtype=np.float64)
    if t_target == 0:
        return InversionResult(0, x0.copy(), np.zeros_like(x0), (0,))
    grid = _stride_grid(t_target, n_strides)
    x = x0
    rows = []
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = invert_step(x, int(t), int(t_next), eps_fn, sched)
        if trace_path is not None:
            rows.append((int(t_next), float(np.abs(x).mean())))
    ab = sched.abar(t_target)
    eps_inv = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps_inv
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stride", "t", "mean_abs_x"])
            for k, (t, m) in enumerate(rows, 1):
                w.writerow([k, t, repr(m)])
    return InversionResult(int(t_target), x_t, eps_inv, tuple(int(t) for t in grid))


def ddim_denoise(x_t, t: int, eps_fn, sched: NoiseSchedule, n_strides: int = 10,
                 return_trajectory: bool = False):
    """Deterministic reverse walk t -> 0; returns the final clean estimate.

    With return_trajectory, returns the list of latents at every visited step
    (starting from the input) instead of just the endpoint.
    """
    if n_strides < 1:
        raise ContractViolation("n_strides must be >= 1")
    sched.abar(t)
    x = np.asarray(gc.values(x_t), dtype=np.float64)
    trajectory = [x.copy()]
    if t == 0:
        return trajectory if return_trajectory else x.copy()
    grid = _stride_grid(t, n_strides)
    for t_hi, t_lo in zip(grid[::-1][:-1], grid[::-1][1:]):
        if t_hi == t_lo:
            continue
        eps_hat = eps_fn(x, int(t_hi))
        x0_hat = predict_x0(x, int(t_hi), lambda *_: eps_hat, sched)
        if t_lo == 0:
            x = x0_hat
        else:
            ab_lo = sched.abar(int(t_lo))
            x = np.sqrt(ab_lo) * x0_hat + np.sqrt(1.0 - ab_lo) * eps_hat
        trajectory.append(x.copy())
    return trajectory if return_trajectory else x
