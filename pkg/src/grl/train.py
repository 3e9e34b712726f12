"""Desk-scale training: synthetic multi-scale images, L1 loss, Adam, PSNR."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .model import GRL, GRLConfig, load_checkpoint, save_checkpoint
from .fileio import atomic_write_text
from .tensor import Tape, backward, l1_loss, no_grad
from .tensor.core import NumericError

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
_TRAIN_MASK = (1 << 62) - 1
_NOISE_BIT = 1 << 62
_EVAL_BASE = 1 << 63


class TrainingDiverged(NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 4
    iters: int = 2000
    patch: int = 32
    sigma: float = 25.0
    seed: int = 0
    task: str = "denoise"
    eval_every: int = 100
    eval_patches: int = 16
    eval_seed: int = 0

    def __post_init__(self):
        if self.patch < 8:
            raise ValueError("patch must be >= 8")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.task not in ("denoise", "sr_x2"):
            raise ValueError(f"unsupported training task {self.task!r}")
        if self.task == "sr_x2" and self.patch % 2:
            raise ValueError("sr_x2 needs an even patch size")
        if self.batch < 1 or self.iters < 0 or self.eval_every < 1 or self.eval_patches < 1:
            raise ValueError("batch, eval_every, eval_patches must be positive and iters >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# synthetic data


def synth_image(seed, h, w, dtype=np.float32):
    """Deterministic ``1 x h x w`` image in [0, 1] with repeated structure across scales.

    Layers: a smooth background ramp, nested rectangles, an oriented grating
    summed at two or three octaves, and a motif stamped at several scales.
    """
    if h < 8 or w < 8:
        raise ValueError("synth_image needs h, w >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    img = rng.uniform(0.3, 0.7) + rng.uniform(-0.15, 0.15) * (yy / h) + rng.uniform(-0.15, 0.15) * (xx / w)

    # nested rectangles about a common center, alternating contrast
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    half_h, half_w = rng.uniform(0.3, 0.6) * h, rng.uniform(0.3, 0.6) * w
    amp = rng.uniform(0.15, 0.3)
    for level in range(rng.integers(2, 5)):
        f = 0.6**level
        inside = (np.abs(yy - cy) <= half_h * f) & (np.abs(xx - cx) <= half_w * f)
        img = img + np.where(inside, amp if level % 2 == 0 else -amp, 0.0)

    # grating at 2-3 octaves, same orientation
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(6.0, 12.0)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    phase = rng.uniform(0, 2 * np.pi)
    g_amp = rng.uniform(0.05, 0.12)
    for octave in range(rng.integers(2, 4)):
        img = img + (g_amp / (octave + 1)) * np.sin(2 * np.pi * proj * (2**octave) / period + phase)

    # one motif (a ring) stamped at several positions and scales
    m_amp = rng.uniform(0.1, 0.25) * rng.choice([-1.0, 1.0])
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(1.5, 0.25 * min(h, w))
        my, mx = rng.uniform(0, h), rng.uniform(0, w)
        dist = np.hypot(yy - my, xx - mx)
        img = img + m_amp * ((dist <= r) & (dist >= 0.5 * r))

    return np.clip(img, 0.0, 1.0).astype(dtype)[None]


def add_noise(img, sigma, seed):
    """``img + sigma/255 * N(0, 1)``; not clamped."""
    img = np.asarray(img)
    if sigma == 0:
        return img.copy()
    noise = np.random.default_rng(seed).standard_normal(img.shape)
    return (img + (sigma / 255.0) * noise).astype(img.dtype)


def _downsample(img):
    c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)).astype(img.dtype)


def _pair(image_seed, tcfg):
    clean = synth_image(image_seed, tcfg.patch, tcfg.patch)
    if tcfg.task == "denoise":
        return add_noise(clean, tcfg.sigma, image_seed | _NOISE_BIT), clean
    lr = _downsample(clean)
    if tcfg.sigma:
        lr = add_noise(lr, tcfg.sigma, image_seed | _NOISE_BIT)
    return lr, clean


def train_seed(tcfg, it, b):
    ss = np.random.SeedSequence([tcfg.seed, it, b])
    return int(ss.generate_state(1, np.uint64)[0]) & _TRAIN_MASK


def eval_seed(seed, j):
    return _EVAL_BASE + (seed % (1 << 31)) * (1 << 20) + j


def training_batch(tcfg, it):
    pairs = [_pair(train_seed(tcfg, it, b), tcfg) for b in range(tcfg.batch)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def eval_set(tcfg, n_patches, seed):
    pairs = [_pair(eval_seed(seed, j), tcfg) for j in range(n_patches)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# metrics and optimizer


def psnr(a, b, peak=1.0):
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` for identical inputs."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def capped(p):
    return min(p, PSNR_CAP)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam, in place on the parameter arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"adam: grad {g.shape} vs param {p.shape}")
    # overflow here surfaces as non-finite parameters, checked by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# evaluation


def restore(model, x, chunk=8):
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(model(x[i : i + chunk]).data)
    return np.concatenate(out)


def _baseline(x, tcfg):
    if tcfg.task == "denoise":
        return np.clip(x, 0.0, 1.0)
    return np.clip(x.repeat(2, axis=-2).repeat(2, axis=-1), 0.0, 1.0)


def evaluate_model(model, tcfg, n_patches=None, seed=None):
    n_patches = tcfg.eval_patches if n_patches is None else n_patches
    seed = tcfg.eval_seed if seed is None else seed
    x, y = eval_set(tcfg, n_patches, seed)
    pred = np.clip(restore(model, x), 0.0, 1.0)
    vals = np.array([capped(psnr(p, t)) for p, t in zip(pred, y)])
    base = np.array([capped(psnr(p, t)) for p, t in zip(_baseline(x, tcfg), y)])
    return {
        "psnr_mean": float(vals.mean()),
        "psnr_std": float(vals.std()),
        "input_psnr_mean": float(base.mean()),
        "n": int(n_patches),
        "seed": int(seed),
    }


def evaluate(checkpoint, n_patches=16, seed=0, task=None):
    """Held-out PSNR of a saved checkpoint (path) on the synthetic eval set."""
    model, meta = load_checkpoint(checkpoint)
    tcfg = TrainConfig.from_dict(meta.get("train", {"task": model.cfg.task}))
    if task is not None and task != model.cfg.task:
        raise ValueError(f"checkpoint was trained for {model.cfg.task!r}, not {task!r}")
    if tcfg.task != model.cfg.task:
        raise ValueError(f"sidecar train task {tcfg.task!r} disagrees with model task {model.cfg.task!r}")
    return evaluate_model(model, tcfg, n_patches, seed)


# training loop


@dataclass
class TrainResult:
    best_params: dict
    best_psnr: float
    best_iter: int
    metrics: list  # (iter, loss, psnr)
    final_psnr: float
    input_psnr: float


def loss_and_grads(model, x, y):
    with Tape() as tape:
        loss = l1_loss(model(x), y)
    grads = backward(loss, tape, model.parameters())
    return float(loss.item()), grads


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss", "psnr"])
    for it, loss, p in rows:
        w.writerow([it, f"{loss:.8f}", f"{capped(p):.6f}"])
    return buf.getvalue()


def train(model, tcfg, out_dir=None, on_metrics=None):
    """Train ``model`` in place; keep the best-PSNR parameters.

    Evaluates at iteration 0, every ``eval_every`` iterations, and at the end.
    Each metrics row carries the mean training loss since the previous row.
    With ``out_dir`` the best checkpoint (``best.grlw`` + sidecar) and
    ``metrics.csv`` are written there.
    """
    if model.cfg.task != tcfg.task:
        raise ValueError(f"model task {model.cfg.task!r} != train task {tcfg.task!r}")
    params = model.parameters()
    state = AdamState()
    metrics = []
    best = None
    pending = []
    last_eval = None

    for it in range(tcfg.iters + 1):
        if it % tcfg.eval_every == 0 or it == tcfg.iters:
            if it == 0:
                x, y = training_batch(tcfg, 0)
                with no_grad():
                    pending = [float(l1_loss(model(x), y).item())]
            ev = evaluate_model(model, tcfg)
            last_eval = ev
            row = (it, float(np.mean(pending)), ev["psnr_mean"])
            metrics.append(row)
            pending = []
            log.info("iter %d loss %.5f psnr %.3f dB", *row)
            if on_metrics is not None:
                on_metrics(row)
            if best is None or ev["psnr_mean"] > best[0]:
                best = (ev["psnr_mean"], it, model.state())
        if it == tcfg.iters:
            break
        x, y = training_batch(tcfg, it)
        loss, grads = loss_and_grads(model, x, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        pending.append(loss)
        adam_step([p.data for p in params], [grads[p.name] for p in params], state, tcfg.lr, tcfg.betas, tcfg.eps)
        if not all(np.isfinite(p.data).all() for p in params):
            raise TrainingDiverged(f"non-finite parameters after iteration {it}")

    result = TrainResult(best[2], best[0], best[1], metrics, last_eval["psnr_mean"], last_eval["input_psnr_mean"])
    if out_dir is not None:
        save_training(out_dir, model, tcfg, result)
    return result


def save_training(out_dir, model, tcfg, result):
    os.makedirs(out_dir, exist_ok=True)
    best_model = GRL(model.cfg, result.best_params)
    extra = {"train": tcfg.to_dict(), "best_psnr": result.best_psnr, "best_iter": result.best_iter,
             "input_psnr": result.input_psnr}
    save_checkpoint(os.path.join(out_dir, "best.grlw"), best_model, extra)
    atomic_write_text(os.path.join(out_dir, "metrics.csv"), metrics_csv(result.metrics))


def load_run_config(path):
    """``{"model": {...GRLConfig...}, "train": {...TrainConfig...}}``; both sections optional."""
    with open(path) as fh:
        raw = json.load(fh)
    tdict = raw.get("train", {})
    mdict = dict(raw.get("model", {}))
    mdict.setdefault("task", tdict.get("task", "denoise"))
    return GRLConfig.from_dict(mdict), TrainConfig.from_dict(tdict)
