"""Adam training loop over rays sampled uniformly from the kept pixels."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..geometry import pixel_rays
from . import model, render

log = logging.getLogger(__name__)

MIN_KEEP_FRACTION = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 1024
    lr_start: float = 2e-3
    lr_end: float = 2e-6
    warmup: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    loss: str = "charbonnier"
    charbonnier_eps: float = 1e-3
    seed: int = 0
    depth: int = 4
    width: int = 64
    L_pos: int = 6
    L_dir: int = 2
    sigma_bias: float = -1.0
    float32: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.batch_rays < 1:
            raise InputError("iterations and batch_rays must be positive")
        if not 0 < self.lr_end <= self.lr_start:
            raise InputError("need 0 < lr_end <= lr_start")
        if self.loss not in render.LOSS_KINDS:
            raise InputError(f"unknown loss {self.loss!r}")
        if self.warmup < 0 or self.eps <= 0 or self.charbonnier_eps <= 0:
            raise InputError("warmup >= 0, eps > 0 and charbonnier_eps > 0 required")

    @property
    def architecture(self) -> model.Architecture:
        return model.Architecture(self.depth, self.width, model.EncodingConfig(self.L_pos, self.L_dir))


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Log-linear decay from lr_start to lr_end with a linear warm-up ramp."""
    frac = min(step / max(cfg.iterations - 1, 1), 1.0)
    lr = np.exp((1 - frac) * np.log(cfg.lr_start) + frac * np.log(cfg.lr_end))
    if cfg.warmup > 0:
        lr *= min(1.0, (step + 1) / cfg.warmup)
    return float(lr)


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.999, eps=1e-6):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainLog:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "lr"])
            w.writerows(zip(self.iteration, self.loss, self.lr))

    def windowed_means(self, window=100) -> np.ndarray:
        loss = np.asarray(self.loss)
        n = len(loss) // window
        return loss[:n * window].reshape(n, window).mean(axis=1)


def all_rays(dataset):
    """Origins, directions and target colors for every training pixel, view-major."""
    os_, ds_ = zip(*(pixel_rays(c) for c in dataset.cameras))
    return np.concatenate(os_), np.concatenate(ds_), dataset.images.reshape(-1, 3)


def train(dataset, keep_mask=None, cfg: TrainConfig = TrainConfig(),
          rcfg: render.RenderConfig = render.RenderConfig(), init=None, progress=None):
    """Fit a radiance field to the kept pixels of ``dataset``.

    Returns ``(FieldParams, TrainLog)``. Deterministic for a fixed ``cfg.seed``.
    """
    if dataset.n_views == 0:
        raise InputError("empty dataset")
    origins, dirs, colors = all_rays(dataset)
    if keep_mask is None:
        pool = np.arange(origins.shape[0])
    else:
        keep = np.asarray(keep_mask, dtype=bool).reshape(-1)
        if keep.shape[0] != origins.shape[0]:
            raise InputError("keep_mask does not match dataset dimensions")
        pool = np.flatnonzero(keep)
        if pool.size < max(1, MIN_KEEP_FRACTION * keep.size):
            raise InputError(f"only {pool.size} of {keep.size} pixels kept (< 1%)")
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else model.init_params(
        cfg.architecture, seed=cfg.seed, sigma_bias=cfg.sigma_bias)
    opt = Adam(params.size, cfg.beta1, cfg.beta2, cfg.eps)
    tcfg = render.RenderConfig(rcfg.t_near, rcfg.t_far, rcfg.n_samples, rcfg.background, True)
    dtype = np.float32 if cfg.float32 else np.float64
    out = TrainLog()
    for it in range(cfg.iterations):
        idx = pool[rng.integers(0, pool.size, cfg.batch_rays)]
        batch = render.render_rays(params, origins[idx], dirs[idx], tcfg, rng=rng, dtype=dtype)
        target = colors[idx].astype(dtype)
        losses = render.loss_per_ray(batch.color, target, cfg.loss, cfg.charbonnier_eps)
        g_color = render.loss_grad(batch.color, target, cfg.loss, cfg.charbonnier_eps) / cfg.batch_rays
        grad = render.backprop_batch(params, batch, g_color)
        lr = learning_rate(it, cfg)
        opt.step(params.theta, grad, lr)
        out.iteration.append(it)
        out.loss.append(float(losses.mean()))
        out.lr.append(lr)
        if progress is not None:
            progress(it, out.loss[-1])
    _check_loss_trend(out)
    return params, out


def _check_loss_trend(tlog: TrainLog, window=100, slack=1.05) -> None:
    means = tlog.windowed_means(window)
    bumps = np.flatnonzero(means[1:] > slack * means[:-1])
    if bumps.size:
        log.warning("training loss rose in %d of %d %d-iteration windows (first at iteration %d)",
                    bumps.size, means.size - 1, window, (bumps[0] + 1) * window)
