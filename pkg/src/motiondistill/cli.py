"""Experiment pipeline surface: one subcommand per phase, artifacts on disk.

Every phase writes its outputs plus the resolved config under ``outdir``, so
any run directory can be reproduced from what it contains. Prerequisite
artifacts (scene, checkpoints) are read from the same directory; a missing one
is a usage error, not a crash.

Exit codes: 0 success, 2 usage error (bad flags, unknown config keys, missing
prerequisites), 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import diffusion as df
from . import metrics as mx
from .distill import distill_run, render_static_video
from .gradcore import ContractViolation, NumericalAbort
from .inversion import ddim_denoise, invert_to, make_eps_fn
from .motionfield import MotionField
from .refine import refine_pass
from .render import write_video_frames
from .scene import load_scene, sample_camera, save_scene
from .scenegen import gen_scene


def build_field(scene, fc: cf.FieldConfig) -> MotionField:
    return MotionField.from_scene_bbox(
        scene, margin=fc.margin, spatial_res=fc.spatial_res, time_res=fc.time_res,
        features=fc.features, hidden=fc.hidden, init_scale=fc.init_scale,
        grid_lr=fc.grid_lr, mlp_lr=fc.mlp_lr, seed=fc.seed)


def build_schedule(cfg: cf.ExperimentConfig):
    s = cfg.schedule
    return df.make_schedule(s.steps, s.beta_start, s.beta_end)


def _outdir(cfg: cf.ExperimentConfig) -> Path:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    cf.write_config(out / "config_resolved.cfg", cfg)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ContractViolation(f"missing {path}; run `{hint}` first")
    return path


def _write_loss_csv(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for k, v in enumerate(history):
            writer.writerow([k, repr(float(v))])


def ensure_scene(cfg: cf.ExperimentConfig, out: Path):
    """Load outdir/scene.npz, falling back to the configured source."""
    path = out / "scene.npz"
    if path.exists():
        return load_scene(path)
    sc = cfg.scene
    if sc.file:
        scene = load_scene(sc.file)
    else:
        scene = gen_scene(sc.kind, seed=sc.seed, n_points=sc.n_points, side=sc.side)
    save_scene(path, scene)
    return scene


def static_bank(scene, cfg: cf.ExperimentConfig, n: int, seed: int) -> np.ndarray:
    """(n, T, H, W, 1) static renders from random cameras at corpus resolution."""
    d, c = cfg.distill, cfg.corpus
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n):
        cam = sample_camera(rng, (d.azimuth_lo, d.azimuth_hi),
                            (d.elevation_lo, d.elevation_hi), d.cam_radius,
                            d.cam_focal, c.width, c.height)
        clips.append(render_static_video(scene, cam, c.frames))
    return np.stack(clips)


def load_base(cfg: cf.ExperimentConfig, out: Path) -> df.Denoiser:
    model = df.Denoiser(cfg.denoiser)
    model.load(_require(out / "base.ckpt", "train-denoiser"))
    return model


def load_adapter(cfg: cf.ExperimentConfig, out: Path, model) -> df.LoraAdapter:
    adapter = df.LoraAdapter(model, rank=cfg.lora.rank, alpha=cfg.lora.alpha,
                             seed=cfg.lora.init_seed)
    adapter.load(_require(out / "lora.ckpt", "train-lora"))
    return adapter


def eval_camera_ring(cfg: cf.ExperimentConfig, upsampled=False):
    e = cfg.eval
    k = 2 if upsampled else 1
    return mx.eval_cameras(e.cameras, e.elevation_deg, e.radius,
                           k * e.focal, k * e.width, k * e.height)


# -- phases ------------------------------------------------------------------------


def cmd_gen_scene(cfg, args) -> None:
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    print(f"scene.npz n={scene.positions.shape[0]} checksum={scene.checksum()}")


def cmd_gen_corpus(cfg, args) -> None:
    out = _outdir(cfg)
    videos, labels = df.make_corpus(cfg.corpus)
    np.savez(out / "corpus.npz", videos=videos, labels=labels)
    df.save_corpus_spec(out / "corpus_spec.txt", cfg.corpus)
    print(f"corpus.npz clips={videos.shape[0]} frames={videos.shape[1]}")


def cmd_train_denoiser(cfg, args) -> None:
    out = _outdir(cfg)
    corpus_spec, model_spec, name = cfg.corpus, cfg.denoiser, "base"
    if args.role == "refiner":
        # second denoiser for the edit pass: interpolated frame count, 2x pixels
        corpus_spec = dataclasses.replace(
            corpus_spec, frames=2 * corpus_spec.frames - 1,
            height=2 * corpus_spec.height, width=2 * corpus_spec.width)
        model_spec = dataclasses.replace(
            model_spec, height=corpus_spec.height, width=corpus_spec.width)
        name = "refiner"
    videos, labels = df.make_corpus(corpus_spec)
    model = df.Denoiser(model_spec)
    sched = build_schedule(cfg)
    t = cfg.train
    model, history = df.train_base(model, videos, labels, sched, steps=t.steps,
                                   batch_size=t.batch_size,
                                   null_fraction=t.null_fraction, seed=t.seed)
    model.save(out / f"{name}.ckpt")
    _write_loss_csv(out / f"{name}_loss.csv", history)
    print(f"{name}.ckpt loss {history[0]:.4f} -> {np.mean(history[-50:]):.4f}")


def cmd_train_lora(cfg, args) -> None:
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    model = load_base(cfg, out)
    bank = static_bank(scene, cfg, cfg.lora.n_videos, cfg.lora.seed)
    adapter = df.LoraAdapter(model, rank=cfg.lora.rank, alpha=cfg.lora.alpha,
                             seed=cfg.lora.init_seed)
    adapter, history = df.train_lora(
        model, adapter, bank, cfg.distill.condition_static, build_schedule(cfg),
        steps=cfg.lora.steps, batch_size=cfg.lora.batch_size, lr=cfg.lora.lr,
        seed=cfg.lora.seed)
    adapter.save(out / "lora.ckpt")
    _write_loss_csv(out / "lora_loss.csv", history)
    print(f"lora.ckpt loss {history[0]:.4f} -> {np.mean(history[-50:]):.4f}")


def cmd_distill(cfg, args) -> None:
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    model = load_base(cfg, out)
    dcfg = cfg.distill_for_mode()
    needs_adapter = dcfg.mode == "msd" and dcfg.dual_distribution
    adapter = load_adapter(cfg, out, model) if needs_adapter else None
    field = build_field(scene, cfg.field)
    field, reports = distill_run(scene, field, model, adapter, build_schedule(cfg),
                                 dcfg, outdir=str(out))
    field.store.save(out / "field.ckpt")
    n_bad = sum(not r.ok for r in reports)
    print(f"field.ckpt iterations={len(reports)} bad={n_bad}")


def cmd_refine(cfg, args) -> None:
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    refiner = df.Denoiser(dataclasses.replace(
        cfg.denoiser, height=2 * cfg.denoiser.height, width=2 * cfg.denoiser.width))
    refiner.load(_require(out / "refiner.ckpt", "train-denoiser --role refiner"))
    field = build_field(scene, cfg.field)
    field.store.load(_require(out / "field.ckpt", "distill"))
    cameras = eval_camera_ring(cfg, upsampled=True)
    field, videos, history = refine_pass(scene, field, refiner, build_schedule(cfg),
                                         cameras, cfg.distill.frames, cfg.refine)
    field.store.save(out / "field_refined.ckpt")
    times = np.linspace(0.0, 1.0, 2 * cfg.distill.frames - 1)
    for k, video in enumerate(videos):
        write_video_frames(out / f"refined_cam{k:02d}", video, times)
    _write_loss_csv(out / "refine_loss.csv", history)
    print(f"field_refined.ckpt cameras={len(videos)} frames={videos[0].shape[0]}")


def cmd_eval(cfg, args) -> None:
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    field = build_field(scene, cfg.field)
    ckpt = Path(args.field) if args.field else (
        out / "field_refined.ckpt" if (out / "field_refined.ckpt").exists()
        else out / "field.ckpt")
    field.store.load(_require(ckpt, "distill"))
    staticness = 0.0
    if (out / "base.ckpt").exists() and (out / "lora.ckpt").exists():
        model = load_base(cfg, out)
        adapter = load_adapter(cfg, out, model)
        held_out = static_bank(scene, cfg, 8, cfg.lora.seed + 1)
        staticness = mx.lora_staticness(model, adapter, held_out,
                                        cfg.distill.condition_static,
                                        build_schedule(cfg))
    times = np.linspace(0.0, 1.0, cfg.distill.frames)
    report = mx.evaluate(scene, field, eval_camera_ring(cfg), times, staticness)
    mx.write_metrics_csv(out / "metrics.csv", report)
    mx.write_metrics_text(out / "metrics.txt", report)
    print("  ".join(f"{k}={v:.6g}" for k, v in zip(report.FIELDS, report.row())))


def cmd_fig3(cfg, args) -> None:
    """Reconstruction error with inverted vs stochastic noise at one timestep."""
    out = _outdir(cfg)
    scene = ensure_scene(cfg, out)
    model = load_base(cfg, out)
    sched = build_schedule(cfg)
    t_star = int(round(args.t_frac * sched.num_steps))
    if not 0 < t_star <= sched.num_steps:
        raise ContractViolation(f"--t-frac {args.t_frac} leaves the schedule")
    n_strides = args.strides if args.strides else t_star  # 0 means stride one
    fn = make_eps_fn(model, None, cfg.distill.condition, sched)
    renders = static_bank(scene, cfg, 10, cfg.lora.seed + 2)
    rng = np.random.default_rng(cfg.train.seed)
    err_inv, err_rand = [], []
    for k, x0 in enumerate(renders):
        x_t = invert_to(x0, t_star, fn, sched, n_strides).x_t
        rec_inv = ddim_denoise(x_t, t_star, fn, sched, n_strides)
        x_rand = df.add_noise(x0, t_star, rng.standard_normal(x0.shape), sched)
        rec_rand = ddim_denoise(x_rand, t_star, fn, sched, n_strides)
        err_inv.append(np.abs(rec_inv - x0).mean())
        err_rand.append(np.abs(rec_rand - x0).mean())
        if k == 0:
            taus = np.linspace(0.0, 1.0, x0.shape[0])
            write_video_frames(out / "fig3_inverted", rec_inv, taus)
            write_video_frames(out / "fig3_stochastic", rec_rand, taus)
    ratio = float(np.mean(err_inv) / np.mean(err_rand))
    lines = (f"t_star={t_star}\nn_strides={n_strides}\n"
             f"err_inverted={np.mean(err_inv)!r}\nerr_stochastic={np.mean(err_rand)!r}\n"
             f"ratio={ratio!r}\n")
    (out / "fig3.txt").write_text(lines)
    print(lines, end="")


def cmd_ablate(cfg, args) -> None:
    """All optimization variants against one scene, seed, and model pair.

    Regularizers are held at zero so the arms differ only in gradient mechanics;
    arm directories share the parent's scene and checkpoints byte-for-byte.
    """
    out = _outdir(cfg)
    timer = mx.PhaseTimer()
    with timer.time("setup"):
        scene = ensure_scene(cfg, out)
        if not (out / "base.ckpt").exists():
            cmd_train_denoiser(cfg, argparse.Namespace(role="base"))
        if not (out / "lora.ckpt").exists():
            cmd_train_lora(cfg, args)
        model = load_base(cfg, out)
        adapter = load_adapter(cfg, out, model)
        sched = build_schedule(cfg)
        held_out = static_bank(scene, cfg, 8, cfg.lora.seed + 1)
        staticness = mx.lora_staticness(model, adapter, held_out,
                                        cfg.distill.condition_static, sched)
    bare = dataclasses.replace(cfg.distill, lambda_arap=0.0, lambda_tv=0.0)
    times = np.linspace(0.0, 1.0, cfg.distill.frames)
    rows = []
    for letter, mode in cf.ABLATION_ARMS:
        arm_dir = out / f"arm_{letter}"
        arm_dir.mkdir(exist_ok=True)
        arm_cfg = dataclasses.replace(cfg, mode=mode, distill=bare,
                                      outdir=str(arm_dir))
        cf.write_config(arm_dir / "config_resolved.cfg", arm_cfg)
        dcfg = arm_cfg.distill_for_mode()
        arm_adapter = adapter if (dcfg.mode == "msd" and dcfg.dual_distribution) else None
        with timer.time(f"arm_{letter}"):
            field = build_field(scene, cfg.field)
            field, _ = distill_run(scene, field, model, arm_adapter, sched, dcfg,
                                   outdir=str(arm_dir))
            field.store.save(arm_dir / "field.ckpt")
            report = mx.evaluate(scene, field, eval_camera_ring(cfg), times, staticness)
        mx.write_metrics_csv(arm_dir / "metrics.csv", report)
        mx.write_metrics_text(arm_dir / "metrics.txt", report)
        rows.append([letter, mode] + [repr(v) for v in report.row()])
        print(f"arm {letter} ({mode}): motion={report.motion_magnitude:.5f} "
              f"drift={report.appearance_drift:.5f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "mode"] + list(mx.MetricsReport.FIELDS))
        writer.writerows(rows)
    timer.write(out / "timing.txt")


# -- argument plumbing -------------------------------------------------------------


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "gen-corpus": cmd_gen_corpus,
    "train-denoiser": cmd_train_denoiser,
    "train-lora": cmd_train_lora,
    "distill": cmd_distill,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "fig3-noise-test": cmd_fig3,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motiondistill",
        description="Motion distillation phases over a shared run directory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="config file (dotted keys)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    sub.choices["train-denoiser"].add_argument(
        "--role", choices=("base", "refiner"), default="base")
    sub.choices["distill"].add_argument("--mode", choices=tuple(cf.MODES),
                                        default=None)
    sub.choices["eval"].add_argument("--field", default=None,
                                     help="field checkpoint to score")
    fig3 = sub.choices["fig3-noise-test"]
    fig3.add_argument("--t-frac", type=float, default=0.6, dest="t_frac")
    fig3.add_argument("--strides", type=int, default=0,
                      help="inversion strides; 0 takes one step per timestep")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed the diagnostic
        return int(exc.code or 0)
    try:
        cfg = cf.load_config(args.config, args.overrides)
        if getattr(args, "mode", None):
            cfg = dataclasses.replace(cfg, mode=args.mode).validate()
        COMMANDS[args.command](cfg, args)
    except ContractViolation as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
