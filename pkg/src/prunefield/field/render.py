"""Volume-rendering quadrature, photometric losses and per-ray backprop."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import InputError
from ..geometry import Ray
from . import model


@dataclass(frozen=True)
class RenderConfig:
    t_near: float = 1.5
    t_far: float = 6.0
    n_samples: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    stratified: bool = False

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise InputError("need 0 < t_near < t_far")
        if self.n_samples < 2:
            raise InputError("n_samples must be >= 2")


@dataclass
class RenderedRay:
    color: np.ndarray
    depth: float
    final_transmittance: float
    weights: np.ndarray


def sample_t(n_rays: int, cfg: RenderConfig, rng=None, dtype=np.float64):
    """Sample positions and interval lengths, both (n_rays, S).

    The interval is cut into S equal bins; each sample sits at its bin's
    midpoint, or uniformly inside the bin when ``cfg.stratified`` and an
    ``rng`` is given. Interval lengths are the bin widths, which for midpoint
    samples equal the spacing between consecutive samples.
    """
    S = cfg.n_samples
    width = (cfg.t_far - cfg.t_near) / S
    left = cfg.t_near + width * np.arange(S)
    if cfg.stratified and rng is not None:
        t = left + width * rng.uniform(size=(n_rays, S))
    else:
        t = np.broadcast_to(left + 0.5 * width, (n_rays, S))
    delta = np.full((n_rays, S), width, dtype=dtype)
    return np.asarray(t, dtype=dtype), delta


class RayBatch:
    """Everything the backward pass needs from one forward render."""

    __slots__ = ("color", "depth", "t_final", "weights", "t", "delta", "cache", "background")


def render_rays(params: model.FieldParams, origins, dirs, cfg: RenderConfig, rng=None,
                dtype=np.float64) -> RayBatch:
    R = origins.shape[0]
    t, delta = sample_t(R, cfg, rng, dtype)
    pts = origins[:, None, :].astype(dtype) + t[..., None] * dirs[:, None, :].astype(dtype)
    rgb, sigma, cache = model.forward(params, pts, dirs, dtype)
    bg = np.asarray(cfg.background, dtype=dtype)
    out = RayBatch()
    out.color, out.depth, out.t_final, out.weights = kernels.composite_forward(
        sigma, delta, rgb, t, bg, float(cfg.t_far))
    out.t, out.delta, out.cache, out.background = t, delta, cache, bg
    return out


def render_ray(params: model.FieldParams, ray: Ray, cfg: RenderConfig) -> RenderedRay:
    b = render_rays(params, ray.origin[None], ray.direction[None], cfg)
    return RenderedRay(b.color[0], float(b.depth[0]), float(b.t_final[0]), b.weights[0])


def render_image(params, camera, cfg: RenderConfig, chunk=4096, dtype=np.float64):
    """Deterministic render of a full view: ``(image (H,W,3), depth (H,W))``."""
    from ..geometry import pixel_rays

    o, d = pixel_rays(camera)
    cols, deps = [], []
    for s in range(0, o.shape[0], chunk):
        b = render_rays(params, o[s:s + chunk], d[s:s + chunk], cfg, dtype=dtype)
        cols.append(b.color)
        deps.append(b.depth)
    h, w = camera.shape
    return (np.concatenate(cols).reshape(h, w, 3).astype(np.float64),
            np.concatenate(deps).reshape(h, w).astype(np.float64))


# --- losses -------------------------------------------------------------------

LOSS_KINDS = ("l2", "charbonnier")


def loss_per_ray(rendered, target, kind="l2", charbonnier_eps=1e-3):
    """Per-ray photometric loss over the last axis (channels)."""
    r = np.asarray(rendered) - np.asarray(target)
    if kind == "l2":
        return np.sum(r * r, axis=-1)
    if kind == "charbonnier":
        return np.sum(np.sqrt(r * r + charbonnier_eps ** 2), axis=-1)
    raise InputError(f"unknown loss kind {kind!r}")


def loss_grad(rendered, target, kind="l2", charbonnier_eps=1e-3):
    r = rendered - target
    if kind == "l2":
        return 2.0 * r
    if kind == "charbonnier":
        return r / np.sqrt(r * r + charbonnier_eps ** 2)
    raise InputError(f"unknown loss kind {kind!r}")


def backprop_batch(params, batch: RayBatch, grad_color, per_ray=False):
    """Chain ``d loss / d color`` (R,3) through compositing and the MLP."""
    gc = grad_color.astype(batch.color.dtype, copy=False)
    g_sigma, g_rgb = kernels.composite_backward(
        batch.cache.sigma, batch.delta, batch.cache.rgb, batch.weights, batch.t_final,
        batch.background, gc)
    return model.backward(params, batch.cache, g_rgb, g_sigma, per_ray=per_ray)


def color_head_grads(params, batch: RayBatch, grad_color):
    """Per-ray gradients of the last (color-head) layer only: (R, n_last)."""
    gc = grad_color.astype(batch.color.dtype, copy=False)
    g_rgb = batch.weights[..., None] * gc[:, None, :]
    return model.last_layer_grads(params, batch.cache, g_rgb)


def backprop_ray(params, ray: Ray, target, cfg: RenderConfig, kind="l2", charbonnier_eps=1e-3):
    """Loss and exact gradient for one ray under midpoint sampling.

    Returns ``(loss, grad (P,), last_layer_grad)``; the last is a view into ``grad``.
    """
    cfg_det = cfg if not cfg.stratified else RenderConfig(cfg.t_near, cfg.t_far, cfg.n_samples,
                                                          cfg.background, False)
    b = render_rays(params, ray.origin[None], ray.direction[None], cfg_det)
    target = np.asarray(target, dtype=np.float64).reshape(1, 3)
    loss = float(loss_per_ray(b.color, target, kind, charbonnier_eps)[0])
    grad = backprop_batch(params, b, loss_grad(b.color, target, kind, charbonnier_eps))
    return loss, grad, grad[params.last_layer_slice]
