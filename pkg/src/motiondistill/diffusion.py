"""Toy video diffusion stack: schedule, corpus, denoiser, adapters, oracle.

The denoiser is deliberately small: two 3x3 conv layers per frame, one
3-tap dense temporal mixing layer, and additive timestep / class /
frame-position conditioning. Videos are (T, H, W, 1) grayscale in [0, 1]
(batched forms prepend a batch axis). The same forward pass serves training
(parameters on the tape) and inference (wrap in gradcore.no_grad()).

A closed-form Gaussian oracle stands in for the learned model wherever a
ground-truth posterior is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import gradcore as gc
from .gradcore import ContractViolation, ParamStore

NULL_CLASS = 0

DEFAULT_CLASSES = ("static", "bounce", "translate-right", "rotate")


# -- schedule ---------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; t counts noising steps, abar(0) == 1 exactly."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.num_steps:
            raise ContractViolation(f"t={t} outside [0, {self.num_steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def abar_many(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any((t < 0) | (t > self.num_steps)):
            raise ContractViolation("timestep outside schedule range")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_schedule(steps=100, beta_start=1e-3, beta_end=0.1) -> NoiseSchedule:
    if steps < 2 or not 0 < beta_start <= beta_end < 1:
        raise ContractViolation("bad schedule parameters")
    betas = np.linspace(beta_start, beta_end, steps)
    abars = np.cumprod(1.0 - betas)
    if abars[0] < 0.99:
        raise ContractViolation(f"first alpha-bar {abars[0]:.4f} < 0.99; lower beta_start")
    if abars[-1] > 0.01:
        raise ContractViolation(f"last alpha-bar {abars[-1]:.4f} > 0.01; raise beta_end "
                                "or add steps")
    if np.any(np.diff(abars) >= 0):
        raise ContractViolation("alpha-bar must decrease strictly")
    return NoiseSchedule(betas=betas, alpha_bars=abars)


def add_noise(x0, t, eps, sched: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; shapes must match exactly."""
    if gc.values(x0).shape != gc.values(eps).shape:
        raise ContractViolation("x0 and eps shapes differ")
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        ab = sched.abar(int(t))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    ab = sched.abar_many(t).reshape((-1,) + (1,) * (gc.values(x0).ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- closed-form oracle --------------------------------------------------------------


@dataclass(frozen=True)
class GaussianOracle:
    """Bayes-optimal eps predictor for x0 ~ N(mu, sigma^2 I)."""

    mu: np.ndarray
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractViolation("oracle sigma must be positive")

    def eps(self, x_t, t: int, sched: NoiseSchedule):
        ab = sched.abar(t)
        denom = ab * self.sigma ** 2 + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.mu) / denom


def oracle_eps(oracle: GaussianOracle, x_t, t: int, sched: NoiseSchedule):
    return oracle.eps(x_t, t, sched)


class OracleDenoiser:
    """Model-shaped wrapper around a GaussianOracle; ignores conditioning."""

    def __init__(self, oracle: GaussianOracle):
        self.oracle = oracle

    def predict_eps(self, x, t, cond, sched: NoiseSchedule, adapter=None):
        del cond, adapter
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t.size == 1:
            return self.oracle.eps(gc.values(x), int(t[0]), sched)
        ab = sched.abar_many(t).reshape((-1,) + (1,) * (gc.values(x).ndim - 1))
        denom = ab * self.oracle.sigma ** 2 + (1.0 - ab)
        return np.sqrt(1.0 - ab) * (gc.values(x) - np.sqrt(ab) * self.oracle.mu) / denom


# -- synthetic corpus -----------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    classes: tuple = DEFAULT_CLASSES
    per_class: int = 24
    frames: int = 8
    height: int = 32
    width: int = 32
    amplitude: float = 5.0        # pixels of travel over tau in [0, 1]
    static_jitter_px: float = 1.0  # residual shake in the "static" class
    seed: int = 0

    def class_id(self, name: str) -> int:
        if name == "null":
            return NULL_CLASS
        if name not in self.classes:
            raise ContractViolation(f"unknown class {name!r} (have {self.classes})")
        return 1 + self.classes.index(name)

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def save_corpus_spec(path, spec: CorpusSpec) -> None:
    with open(path, "w") as fh:
        fh.write(f"classes = {' '.join(spec.classes)}\n")
        for key in ("per_class", "frames", "height", "width", "seed"):
            fh.write(f"{key} = {getattr(spec, key)}\n")
        fh.write(f"amplitude = {spec.amplitude!r}\n")
        fh.write(f"static_jitter_px = {spec.static_jitter_px!r}\n")


def load_corpus_spec(path) -> CorpusSpec:
    spec = CorpusSpec()
    seen = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{ln}: expected key = value")
            key, _, val = (x.strip() for x in line.partition("="))
            if key == "classes":
                seen[key] = tuple(val.split())
            elif key in ("per_class", "frames", "height", "width", "seed"):
                seen[key] = int(val)
            elif key in ("amplitude", "static_jitter_px"):
                seen[key] = float(val)
            else:
                raise ContractViolation(f"{path}:{ln}: unknown key {key!r}")
    return replace(spec, **seen)


def _soft_disk(rows, cols, center, radius):
    d = np.hypot(rows - center[0], cols - center[1]) - radius
    return 1.0 / (1.0 + np.exp(d / 0.45))


def _soft_box(rows, cols, center, half, angle):
    ca, sa = np.cos(angle), np.sin(angle)
    r = rows - center[0]
    c = cols - center[1]
    local_r = ca * r + sa * c
    local_c = -sa * r + ca * c
    d = np.maximum(np.abs(local_r) - half[0], np.abs(local_c) - half[1])
    return 1.0 / (1.0 + np.exp(d / 0.45))


def make_clip(spec: CorpusSpec, class_name: str, rng: np.random.Generator) -> np.ndarray:
    """One (T, H, W, 1) clip; motion is parameterized by tau = k / (T-1).

    Every class is at rest at tau = 0. Shape geometry scales with frame size.
    """
    h, w, t, amp = spec.height, spec.width, spec.frames, spec.amplitude
    s = min(h, w)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    intensity = rng.uniform(0.55, 1.0)
    taus = np.linspace(0.0, 1.0, t)

    shape_kind = "box" if class_name == "rotate" else rng.choice(["disk", "box"])
    margin = amp + 0.22 * s
    if margin >= min(h, w) - margin:
        raise ContractViolation("frames too small for this motion amplitude")
    base = np.array([rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)])

    frames = np.zeros((t, h, w, 1))
    if shape_kind == "disk":
        radius = rng.uniform(0.11, 0.19) * s
        half = None
    else:
        half = np.array([rng.uniform(0.0625, 0.11), rng.uniform(0.125, 0.19)]) * s
        radius = None
    for k, tau in enumerate(taus):
        center = base.copy()
        angle = 0.0
        if class_name == "translate-right":
            center[1] += amp * tau
        elif class_name == "bounce":
            center[0] -= amp * np.sin(np.pi * tau)  # up then back, at rest at tau=0
        elif class_name == "rotate":
            angle = 0.5 * np.pi * tau
        elif class_name == "static":
            # residual shake: even web "static" footage is never pixel-frozen,
            # and the static-prompt ablation arm relies on that imperfection
            center += rng.normal(0.0, spec.static_jitter_px, 2)
        else:
            raise ContractViolation(f"no motion model for class {class_name!r}")
        if shape_kind == "disk":
            mask = _soft_disk(rows, cols, center, radius)
        else:
            mask = _soft_box(rows, cols, center, half, angle)
        frames[k, :, :, 0] = np.clip(intensity * mask, 0.0, 1.0)
    return frames


def make_corpus(spec: CorpusSpec):
    """All clips, class-major: (M, T, H, W, 1) videos and (M,) integer labels."""
    rng = np.random.default_rng(spec.seed)
    videos, labels = [], []
    for name in spec.classes:
        cid = spec.class_id(name)
        for _ in range(spec.per_class):
            videos.append(make_clip(spec, name, rng))
            labels.append(cid)
    return np.stack(videos), np.asarray(labels, dtype=np.int64)


# -- embeddings ------------------------------------------------------------------------


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style ladder over raw step counts; (B, dim) for vector t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def frame_embedding(taus, dim: int) -> np.ndarray:
    """Octave ladder on [0, 1]: sin/cos(2^k pi tau); breaks frame symmetry."""
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    half = dim // 2
    ang = taus[:, None] * (np.pi * 2.0 ** np.arange(half))[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -- denoiser ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserSpec:
    height: int = 32
    width: int = 32
    channels: int = 16
    emb_dim: int = 16
    n_classes: int = len(DEFAULT_CLASSES)
    lr: float = 2e-3
    seed: int = 0


LORA_TARGETS = ("cond_w", "tconv_m1", "tconv_0", "tconv_p1")


class Denoiser:
    """Conditional eps-predictor over grayscale videos."""

    def __init__(self, spec: DenoiserSpec):
        if spec.emb_dim % 2 or spec.emb_dim < 2:
            raise ContractViolation("emb_dim must be even and >= 2")
        if spec.channels < 1 or spec.n_classes < 1:
            raise ContractViolation("channels and n_classes must be positive")
        self.spec = spec
        c, e = spec.channels, spec.emb_dim
        rng = np.random.default_rng(spec.seed)
        st = ParamStore()
        lr = spec.lr
        st.add("base.conv1_w", rng.normal(0, 1 / 3.0, (3, 3, 1, c)), lr)
        st.add("base.conv1_b", np.zeros(c), lr)
        st.add("base.temb_w", rng.normal(0, 1 / np.sqrt(e), (e, c)), lr)
        st.add("base.cond_table", rng.normal(0, 0.5, (spec.n_classes + 1, e)), lr)
        st.add("base.cond_w", rng.normal(0, 1 / np.sqrt(e), (e, c)), lr)
        st.add("base.frame_w", rng.normal(0, 1 / np.sqrt(e), (e, c)), lr)
        st.add("base.conv2_w", rng.normal(0, 1 / np.sqrt(9 * c), (3, 3, c, c)), lr)
        st.add("base.conv2_b", np.zeros(c), lr)
        st.add("base.tconv_m1", rng.normal(0, 1 / np.sqrt(c), (c, c)), lr)
        st.add("base.tconv_0", rng.normal(0, 1 / np.sqrt(c), (c, c)), lr)
        st.add("base.tconv_p1", rng.normal(0, 1 / np.sqrt(c), (c, c)), lr)
        st.add("base.tconv_b", np.zeros(c), lr)
        st.add("base.conv3_w", np.zeros((3, 3, c, 1)), lr)  # eps-hat starts at zero
        st.add("base.conv3_b", np.zeros(1), lr)
        self.store = st

    # conv over H, W with zero padding; weight (3, 3, cin, cout)
    @staticmethod
    def _conv3(x, w, b):
        bdim, t, h, wd, cin = gc.values(x).shape
        zrow = np.zeros((bdim, t, 1, wd, cin))
        xp = gc.concat([zrow, x, zrow], axis=2)
        zcol = np.zeros((bdim, t, h + 2, 1, cin))
        xp = gc.concat([zcol, xp, zcol], axis=3)
        out = None
        for dy in range(3):
            for dx in range(3):
                patch = xp[:, :, dy:dy + h, dx:dx + wd, :]
                term = gc.matmul(patch, w[dy, dx])
                out = term if out is None else out + term
        return out + b

    def _weight(self, name, adapter):
        w = self.store[f"base.{name}"]
        if adapter is not None and name in LORA_TARGETS:
            w = w + adapter.delta(name)
        return w

    def predict_eps(self, x, t, cond, sched: NoiseSchedule, adapter=None):
        """eps-hat for x at noise level t under class id cond (0 = null).

        x: (T, H, W, 1) or (B, T, H, W, 1); t: int or (B,); cond: id or (B,).
        """
        squeeze = gc.values(x).ndim == 4
        if squeeze:
            x = x.reshape((1,) + gc.values(x).shape)
        bdim, tf, h, w, _ = gc.values(x).shape
        if (h, w) != (self.spec.height, self.spec.width):
            raise ContractViolation(f"model expects {self.spec.height}x{self.spec.width} frames")
        cond = np.atleast_1d(np.asarray(cond, dtype=np.int64))
        if cond.size == 1:
            cond = np.repeat(cond, bdim)
        if cond.shape != (bdim,):
            raise ContractViolation("cond batch size mismatch")
        if np.any((cond < 0) | (cond > self.spec.n_classes)):
            raise ContractViolation("condition id outside embedding table")
        tvec = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if tvec.size == 1:
            tvec = np.repeat(tvec, bdim)
        if tvec.shape != (bdim,):
            raise ContractViolation("t batch size mismatch")
        sched.abar_many(tvec)  # range check

        e = self.spec.emb_dim
        temb = timestep_embedding(tvec, e)                    # (B, e)
        tmix = gc.matmul(temb, self.store["base.temb_w"])     # (B, c)
        tmix = tmix.reshape(bdim, 1, 1, 1, -1)
        cemb = self.store["base.cond_table"][cond]            # (B, e)
        cmix = gc.matmul(cemb, self._weight("cond_w", adapter))
        cmix = cmix.reshape(bdim, 1, 1, 1, -1)
        taus = np.linspace(0.0, 1.0, tf)
        femb = frame_embedding(taus, e)                       # (T, e)
        fmix = gc.matmul(femb, self.store["base.frame_w"])
        fmix = fmix.reshape(tf, 1, 1, -1)                     # broadcasts over batch

        h1 = gc.tanh(self._conv3(x, self.store["base.conv1_w"], self.store["base.conv1_b"])
                     + tmix + cmix + fmix)
        h2 = gc.tanh(self._conv3(h1, self.store["base.conv2_w"], self.store["base.conv2_b"]))

        zero = np.zeros((bdim, 1, h, w, self.spec.channels))
        prev = gc.concat([zero, h2[:, :-1]], axis=1)
        nxt = gc.concat([h2[:, 1:], zero], axis=1)
        h3 = gc.tanh(gc.matmul(prev, self._weight("tconv_m1", adapter))
                     + gc.matmul(h2, self._weight("tconv_0", adapter))
                     + gc.matmul(nxt, self._weight("tconv_p1", adapter))
                     + self.store["base.tconv_b"])

        out = self._conv3(h3, self.store["base.conv3_w"], self.store["base.conv3_b"])
        return out.reshape(gc.values(out).shape[1:]) if squeeze else out

    def save(self, path) -> None:
        self.store.save(path)

    def load(self, path) -> None:
        self.store.load(path)


def predict_eps(model: Denoiser, adapter, x_t, t, cond, sched: NoiseSchedule):
    """Module-level form; adapter may be None for the plain base model."""
    return model.predict_eps(x_t, t, cond, sched, adapter=adapter)


# -- low-rank adapter --------------------------------------------------------------------


class LoraAdapter:
    """Rank-r additive deltas on the condition-mixing and temporal-mixing maps."""

    def __init__(self, model: Denoiser, rank=4, alpha=4.0, lr=1e-5, seed=0):
        self.rank = int(rank)
        self.alpha = float(alpha)
        if self.rank < 0:
            raise ContractViolation("adapter rank must be >= 0")
        rng = np.random.default_rng(seed)
        st = ParamStore()
        a_std = 1.0 / self.rank if self.rank else 0.0  # rank 0 is the identity adapter
        for name in LORA_TARGETS:
            in_dim, out_dim = model.store[f"base.{name}"].shape
            st.add(f"lora.{name}.A", rng.normal(0, a_std, (rank, in_dim)), lr)
            st.add(f"lora.{name}.B", np.zeros((out_dim, rank)), lr)
        self.store = st

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank if self.rank else 0.0

    def delta(self, name):
        """(in, out) additive weight: scaling * (B A)^T."""
        ba = gc.matmul(self.store[f"lora.{name}.B"], self.store[f"lora.{name}.A"])
        return ba.T * self.scaling

    def save(self, path) -> None:
        self.store.save(path)

    def load(self, path) -> None:
        self.store.load(path)


# -- training loops ------------------------------------------------------------------------


def train_base(model: Denoiser, videos: np.ndarray, labels: np.ndarray,
               sched: NoiseSchedule, steps=1500, batch_size=4,
               null_fraction=0.1, seed=0):
    """Eps-matching on the corpus; a slice of examples sees the null condition.

    Returns (model, loss history).
    """
    rng = np.random.default_rng(seed)
    opt = gc.Adam(model.store)
    tape = gc.GradientTape(model.store)
    history = []
    m = videos.shape[0]
    if steps > 0 and m == 0:
        raise ContractViolation("empty corpus")
    for k in range(steps):
        idx = rng.integers(0, m, size=batch_size)
        x0 = videos[idx]
        cond = labels[idx].copy()
        cond[rng.uniform(size=batch_size) < null_fraction] = NULL_CLASS
        t = rng.integers(1, sched.num_steps + 1, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = add_noise(x0, t, eps, sched)
        pred = model.predict_eps(x_t, t, cond, sched)
        d = pred - eps
        loss = (d * d).mean()
        val = float(gc.values(loss))
        if not np.isfinite(val):
            raise gc.NumericalAbort(f"non-finite training loss at step {k}")
        opt.step(tape.backward(loss))
        history.append(val)
    return model, history


def train_lora(model: Denoiser, adapter: LoraAdapter, static_videos: np.ndarray,
               static_class: int, sched: NoiseSchedule, steps=600, batch_size=2,
               lr: float | None = None, seed=0):
    """Fit the adapter to a bank of static videos; the base model stays frozen.

    Every clip must have identical frames. Returns (adapter, loss history).
    """
    videos = np.asarray(static_videos, dtype=np.float64)
    if videos.ndim != 5:
        raise ContractViolation("static_videos must be (M, T, H, W, C)")
    if not np.array_equal(videos, np.broadcast_to(videos[:, :1], videos.shape)):
        raise ContractViolation("static videos must repeat one frame")
    rng = np.random.default_rng(seed)
    base_sum = model.store.checksum()
    opt = gc.Adam(adapter.store, lr_overrides=None if lr is None else
                  {name: lr for name in adapter.store.names()})
    tape = gc.GradientTape(adapter.store)
    history = []
    m = videos.shape[0]
    for k in range(steps):
        x0 = videos[rng.integers(0, m, size=batch_size)]
        t = rng.integers(1, sched.num_steps + 1, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = add_noise(x0, t, eps, sched)
        pred = model.predict_eps(x_t, t, static_class, sched, adapter=adapter)
        d = pred - eps
        loss = (d * d).mean()
        val = float(gc.values(loss))
        if not np.isfinite(val):
            raise gc.NumericalAbort(f"non-finite adapter loss at step {k}")
        opt.step(tape.backward(loss))
        history.append(val)
    if model.store.checksum() != base_sum:
        raise gc.InternalError("base weights moved during adapter training")
    return adapter, history
