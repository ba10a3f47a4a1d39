"""Distillation estimators and the motion-field optimization loop."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_model
from motiondistill import diffusion as df
from motiondistill import gradcore as gc
from motiondistill.distill import (DistillConfig, IterationReport, _sample_t,
                                   distill_run, guided_eps, make_w_fn,
                                   msd_gradient, msd_residual,
                                   render_luma_video, render_static_video,
                                   sds_gradient)
from motiondistill.gradcore import ContractViolation, NumericalAbort
from motiondistill.motionfield import MotionField
from motiondistill.scene import Camera
from motiondistill.scenegen import disk_cluster

SCHED = df.make_schedule()
CAM = Camera(30.0, 20.0, 3.5, 11.0, 8, 8)  # shorter focal keeps 8x8 in frame
SCENE = disk_cluster(10, seed=3)
CFG = DistillConfig(iterations=3, frames=3, n_strides=2, width=8, height=8,
                    cam_focal=11.0, condition=2, condition_static=1)


def fresh_field(seed=1, live=False):
    f = MotionField.from_scene_bbox(SCENE, spatial_res=(4,), time_res=3,
                                    features=4, hidden=8, seed=seed)
    if live:
        rng = np.random.default_rng(seed + 50)
        f.store["decoder.dpos_w"].data[:] = rng.normal(0, 0.3, (8, 3))
    return f


# -- config and report plumbing --------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(mode="dream"),
    dict(w_choice="uniform"),
    dict(lambda_arap=-1.0),
    dict(t_lo=0.9, t_hi=0.2),
    dict(t_hi=1.5),
    dict(frames=1),
    dict(n_strides=0),
    dict(iterations=-1),
    dict(guidance_scale=-0.5),
])
def test_config_rejects(kw):
    with pytest.raises(ContractViolation):
        replace(CFG, **kw).validate()


def test_config_defaults_validate():
    assert DistillConfig().validate().mode == "msd"


def test_report_row_follows_fields():
    rep = IterationReport(3, 40, 10.0, 20.0, 1.0, 2.0, 3.0, 4.0, 5.0, 0.1, True)
    assert rep.row()[:2] == [3, 40]
    assert len(rep.row()) == len(IterationReport.FIELDS)
    assert rep.row()[IterationReport.FIELDS.index("ok")] is True


def test_w_choices():
    assert make_w_fn("one-minus-abar")(30, SCHED) == 1.0 - SCHED.abar(30)
    assert make_w_fn("constant")(30, SCHED) == 1.0
    with pytest.raises(ContractViolation):
        make_w_fn("quadratic")


def test_sample_t_respects_bounds():
    rng = np.random.default_rng(0)
    draws = [_sample_t(rng, CFG, SCHED) for _ in range(500)]
    assert min(draws) >= 20 and max(draws) <= 80
    assert 20 in draws and 80 in draws
    narrow = replace(CFG, t_lo=0.0, t_hi=0.03)
    assert {_sample_t(rng, narrow, SCHED) for _ in range(60)} == {1, 2, 3}


# -- estimator algebra ------------------------------------------------------


def test_guided_eps_reduces_to_conditional_without_cfg():
    model = small_model()
    x = np.random.default_rng(1).uniform(0, 1, (3, 8, 8, 1))
    plain = gc.values(model.predict_eps(x, 40, 2, SCHED))
    assert np.array_equal(guided_eps(model, x, 40, 2, SCHED, 1.0), plain)
    assert np.array_equal(guided_eps(model, x, 40, 2, SCHED, 0.0), plain)


def test_guided_eps_cfg_combination():
    model = small_model()
    x = np.random.default_rng(2).uniform(0, 1, (3, 8, 8, 1))
    e_c = gc.values(model.predict_eps(x, 40, 2, SCHED))
    e_0 = gc.values(model.predict_eps(x, 40, df.NULL_CLASS, SCHED))
    got = guided_eps(model, x, 40, 2, SCHED, 4.0)
    np.testing.assert_allclose(got, e_0 + 4.0 * (e_c - e_0), rtol=1e-14)


def test_sds_gradient_is_scaled_residual():
    # d surrogate / d x0 must equal sqrt(abar_t) * w * (eps_hat - eps) exactly
    model = small_model()
    store = gc.ParamStore()
    x0 = store.add("x0", np.random.default_rng(3).uniform(0.2, 0.8, (3, 8, 8, 1)),
                   lr=1e-2)
    tape = gc.GradientTape(store)
    surrogate, info = sds_gradient(x0, 2, model, SCHED, np.random.default_rng(4),
                                   guidance_scale=1.0)
    grad = tape.backward(surrogate)["x0"]
    rms = float(np.sqrt((grad ** 2).mean()))
    expect = np.sqrt(SCHED.abar(info["t"])) * info["residual_rms"]
    assert rms == pytest.approx(expect, rel=1e-12)


def test_sds_w_choice_rescales_residual():
    model = small_model()
    x0 = np.random.default_rng(3).uniform(0.2, 0.8, (3, 8, 8, 1))
    out = {}
    for w in ("one-minus-abar", "constant"):
        _, out[w] = sds_gradient(gc.Tensor(x0), 2, model, SCHED,
                                 np.random.default_rng(9), w_choice=w)
    assert out["one-minus-abar"]["t"] == out["constant"]["t"]
    ratio = out["one-minus-abar"]["residual_rms"] / out["constant"]["residual_rms"]
    assert ratio == pytest.approx(1.0 - SCHED.abar(out["constant"]["t"]), rel=1e-12)


def test_sds_guidance_changes_residual():
    model = small_model()
    x0 = np.random.default_rng(3).uniform(0.2, 0.8, (3, 8, 8, 1))
    _, weak = sds_gradient(gc.Tensor(x0), 2, model, SCHED,
                           np.random.default_rng(9), guidance_scale=1.0)
    _, strong = sds_gradient(gc.Tensor(x0), 2, model, SCHED,
                             np.random.default_rng(9), guidance_scale=7.5)
    assert weak["residual_rms"] != strong["residual_rms"]


def test_render_static_video_repeats_one_frame():
    vid = render_static_video(SCENE, CAM, 4)
    assert vid.shape == (4, 8, 8, 1)
    assert all(f.tobytes() == vid[0].tobytes() for f in vid)
    assert vid.max() > 0.1  # subject actually in frame


@pytest.mark.parametrize("with_adapter", [False, True])
def test_msd_residual_identity_is_exactly_zero(with_adapter):
    # same video, same prompt, zero-rank adapter: the two branches must agree
    # bit for bit, so the residual is exactly zero (no tolerance)
    model = small_model()
    adapter = df.LoraAdapter(model, rank=2, alpha=2.0, seed=0) if with_adapter else None
    vid = render_static_video(SCENE, CAM, 3)
    res, eps_noise, x_t_s = msd_residual(vid, vid, 25, 1, 1, model, adapter,
                                         SCHED, np.random.default_rng(0),
                                         faithful=True, dual=True, n_strides=2)
    assert np.all(res == 0.0)
    np.testing.assert_array_equal(x_t_s, df.add_noise(vid, 25, eps_noise, SCHED))


def test_msd_zero_field_has_exactly_zero_gradient():
    model = small_model()
    field = fresh_field(live=False)  # zero decoder head: no deformation at all
    surrogate, _ = msd_gradient(SCENE, field, CAM, 1, 1, model, None, SCHED,
                                CFG, np.random.default_rng(3))
    assert float(gc.values(surrogate)) == 0.0
    grads = gc.GradientTape(field.store).backward(surrogate)
    assert all(np.all(g == 0.0) for g in grads.values())


def test_msd_surrogate_gradient_matches_fd_with_frozen_residual():
    # the estimator holds the residual constant by construction, so finite
    # differences must be taken around that frozen value too
    model = small_model()
    field = fresh_field(live=True)
    taus = np.linspace(0.0, 1.0, 3)
    t = 40
    x0_d = gc.values(render_luma_video(SCENE, field, CAM, taus))
    x0_s = render_static_video(SCENE, CAM, 3)
    residual, eps_noise, _ = msd_residual(x0_d, x0_s, t, 2, 1, model, None,
                                          SCHED, np.random.default_rng(7),
                                          faithful=True, dual=False, n_strides=2)
    w = make_w_fn("one-minus-abar")(t, SCHED)

    def f():
        x_t = df.add_noise(render_luma_video(SCENE, field, CAM, taus), t,
                           eps_noise, SCHED)
        return (x_t * (w * residual)).sum() * 1e-3

    assert gc.finite_diff_check(f, field.store, step=1e-5, sample=6) < 1e-4


# -- the optimization loop ---------------------------------------------------


def test_distill_run_smoke_and_artifacts(tmp_path):
    model = small_model()
    field = fresh_field(live=True)
    before = field.store.checksum()
    cfg = replace(CFG, checkpoint_every=2)
    field, reports = distill_run(SCENE, field, model, None, SCHED, cfg,
                                 outdir=str(tmp_path))
    assert len(reports) == 3
    assert all(r.ok for r in reports)
    assert all(20 <= r.t <= 80 for r in reports)
    assert all(np.isfinite(r.loss_total) and r.grad_norm >= 0 for r in reports)
    assert field.store.checksum() != before
    with open(tmp_path / "iterations.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(IterationReport.FIELDS)
    assert len(rows) == 4
    assert (tmp_path / "field_00002.ckpt").exists()


def test_distill_run_is_bit_deterministic():
    sums = []
    for _ in range(2):
        field, _ = distill_run(SCENE, fresh_field(live=True), small_model(),
                               None, SCHED, replace(CFG, iterations=2))
        sums.append(field.store.checksum())
    assert sums[0] == sums[1]


def test_distill_run_zero_iterations_is_a_noop():
    field = fresh_field(live=True)
    before = field.store.checksum()
    _, reports = distill_run(SCENE, field, small_model(), None, SCHED,
                             replace(CFG, iterations=0))
    assert reports == []
    assert field.store.checksum() == before


def test_distill_run_sds_mode():
    field = fresh_field(live=True)
    before = field.store.checksum()
    cfg = replace(CFG, mode="sds", guidance_scale=7.5, iterations=2)
    field, reports = distill_run(SCENE, field, small_model(), None, SCHED, cfg)
    assert len(reports) == 2 and all(r.ok for r in reports)
    assert field.store.checksum() != before


def test_distill_run_aborts_after_three_bad_iterations(tmp_path):
    field = fresh_field(live=True)
    field.store["decoder.dpos_b"].data[0] = np.nan
    with pytest.raises(NumericalAbort):
        distill_run(SCENE, field, small_model(), None, SCHED, CFG,
                    outdir=str(tmp_path))
    with open(tmp_path / "iterations.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 4 and all(r[-1] == "False" for r in rows[1:])
