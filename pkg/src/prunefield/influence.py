"""Per-pixel distraction scores: loss, gradient norm and self-influence.

Self-influence of a training ray with loss gradient ``g`` is
``g^T (H + damping I)^{-1} g``, where ``H`` is the curvature of the mean
training loss. The dense path restricts ``g`` and ``H`` to the color-head
(last) layer; the low-rank path keeps all parameters and replaces ``H`` by its
top eigenpairs, found with a Lanczos iteration over the gradient
outer-product operator.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import (FingerprintMismatchError, InputError, MalformedFileError, MissingFileError,
                     NumericalError)
from .field import render
from .field.model import FieldParams
from .field.train import all_rays

log = logging.getLogger(__name__)

METRICS = ("loss", "gradnorm", "self_influence")


@dataclass
class ScoreMap:
    values: np.ndarray           # (V, H, W)
    metric: str
    valid: np.ndarray = None     # (V, H, W) bool; False = excluded from scoring

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        if self.values.ndim != 3 or self.valid.shape != self.values.shape:
            raise InputError("score map must be (V, H, W) with a matching validity map")
        if not np.all(np.isfinite(self.values[self.valid])):
            raise NumericalError(f"non-finite {self.metric} scores on valid pixels")

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    def save(self, directory, heatmaps=False) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for v in range(self.n_views):
            base = directory / f"score_{v:04d}"
            raw = base.with_suffix(".f32")
            self.values[v].astype("<f4").tofile(raw)
            header = {"metric": self.metric, "view_id": v, "height": self.values.shape[1],
                      "width": self.values.shape[2], "dtype": "<f4",
                      "valid": None if self.valid[v].all() else f"valid_{v:04d}.png"}
            base.with_suffix(".json").write_text(json.dumps(header), encoding="utf-8")
            written += [raw, base.with_suffix(".json")]
            if header["valid"]:
                from .synth import write_png
                write_png(directory / header["valid"], self.valid[v].astype(np.uint8) * 255)
                written.append(directory / header["valid"])
            if heatmaps:
                from .synth import write_png
                written.append(directory / f"heat_{v:04d}.png")
                write_png(written[-1], heatmap(self.values[v]))
        return written

    @classmethod
    def load(cls, directory) -> "ScoreMap":
        from .synth import read_png

        directory = Path(directory)
        headers = sorted(directory.glob("score_*.json"))
        if not headers:
            raise MissingFileError(directory / "score_0000.json", "score map")
        vals, valid, metric = [], [], None
        for hp in headers:
            try:
                h = json.loads(hp.read_text(encoding="utf-8"))
                shape = (h["height"], h["width"])
                metric = h["metric"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise MalformedFileError(hp, f"bad score header ({exc})") from exc
            raw = hp.with_suffix(".f32")
            if not raw.is_file():
                raise MissingFileError(raw, "score grid")
            arr = np.fromfile(raw, dtype=h.get("dtype", "<f4"))
            if arr.size != shape[0] * shape[1]:
                raise MalformedFileError(raw, f"expected {shape[0] * shape[1]} values, got {arr.size}")
            vals.append(arr.reshape(shape).astype(np.float64))
            valid.append(read_png(directory / h["valid"]) > 127 if h.get("valid") else np.ones(shape, bool))
        return cls(np.stack(vals), metric, np.stack(valid))


def heatmap(values) -> np.ndarray:
    """Min-max normalized 8-bit grayscale image of one view's scores."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


@dataclass(frozen=True)
class InfluenceConfig:
    scope: str = "last_layer"            # or "low_rank"
    rank: int = 32
    hessian_mode: str = "empirical_fisher"   # or "exact_fd_oracle" (tests only)
    damping: float = 1e-2
    p: float = 2.0
    loss: str = "l2"
    charbonnier_eps: float = 1e-3
    curvature_rays: int = 1024           # low-rank: rays sampled for the curvature operator
    fd_step: float = 1e-4
    seed: int = 0
    chunk: int = 1024

    def __post_init__(self):
        if self.scope not in ("last_layer", "low_rank"):
            raise InputError(f"unknown influence scope {self.scope!r}")
        if self.hessian_mode not in ("empirical_fisher", "exact_fd_oracle"):
            raise InputError(f"unknown hessian mode {self.hessian_mode!r}")
        if not self.damping > 0:
            raise InputError("damping must be > 0")
        if self.rank < 1:
            raise InputError("rank must be >= 1")


# --- per-pixel pass -------------------------------------------------------------

@dataclass
class PixelPass:
    """Loss, color-head gradient, color and expected depth for every training pixel."""

    loss: np.ndarray        # (N,)
    grads: np.ndarray       # (N, n_last)
    color: np.ndarray       # (N, 3)
    depth: np.ndarray       # (N,)
    shape: tuple            # (V, H, W)
    fingerprint: str

    def as_map(self, flat) -> np.ndarray:
        return np.asarray(flat).reshape(self.shape)


def fingerprint(params: FieldParams, dataset) -> str:
    h = hashlib.sha256(params.theta.tobytes())
    h.update(dataset.fingerprint().encode())
    return h.hexdigest()[:16]


def _deterministic(rcfg):
    return render.RenderConfig(rcfg.t_near, rcfg.t_far, rcfg.n_samples, rcfg.background, False)


def pixel_pass(params: FieldParams, dataset, rcfg, loss="l2", charbonnier_eps=1e-3,
               chunk=1024) -> PixelPass:
    origins, dirs, targets = all_rays(dataset)
    rcfg = _deterministic(rcfg)
    n = origins.shape[0]
    out_loss = np.empty(n)
    out_grad = np.empty((n, params.n_last))
    out_col = np.empty((n, 3))
    out_dep = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        b = render.render_rays(params, origins[sl], dirs[sl], rcfg)
        out_loss[sl] = render.loss_per_ray(b.color, targets[sl], loss, charbonnier_eps)
        gc = render.loss_grad(b.color, targets[sl], loss, charbonnier_eps)
        out_grad[sl] = render.color_head_grads(params, b, gc)
        out_col[sl] = b.color
        out_dep[sl] = b.depth
    V, H, W = dataset.images.shape[:3]
    return PixelPass(out_loss, out_grad, out_col, out_dep, (V, H, W), fingerprint(params, dataset))


def _valid(dataset, valid):
    shape = dataset.images.shape[:3]
    return np.ones(shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(shape)


def score_loss(params, dataset, rcfg, cfg: InfluenceConfig = InfluenceConfig(), valid=None,
               pp: PixelPass | None = None) -> ScoreMap:
    pp = pp or pixel_pass(params, dataset, rcfg, cfg.loss, cfg.charbonnier_eps, cfg.chunk)
    return ScoreMap(pp.as_map(pp.loss), "loss", _valid(dataset, valid))


def score_gradnorm(params, dataset, rcfg, p=None, cfg: InfluenceConfig = InfluenceConfig(),
                   valid=None, pp: PixelPass | None = None) -> ScoreMap:
    pp = pp or pixel_pass(params, dataset, rcfg, cfg.loss, cfg.charbonnier_eps, cfg.chunk)
    order = cfg.p if p is None else p
    return ScoreMap(pp.as_map(np.linalg.norm(pp.grads, ord=order, axis=1)), "gradnorm",
                    _valid(dataset, valid))


# --- curvature ----------------------------------------------------------------------

@dataclass
class HessianState:
    damping: float
    fingerprint: str
    matrix: np.ndarray | None = None        # dense H over the last layer
    cholesky: np.ndarray | None = None      # lower factor of H + damping I
    eigvals: np.ndarray | None = None       # low rank, descending
    eigvecs: np.ndarray | None = None       # (P, r)

    @property
    def low_rank(self) -> bool:
        return self.eigvals is not None


def factorize(H, damping, fp="") -> HessianState:
    """Cholesky of ``H + damping I``; raises :class:`NumericalError` on a non-positive pivot."""
    H = 0.5 * (H + H.T)
    A = H + damping * np.eye(H.shape[0])
    try:
        L = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"H + {damping:g} I is not positive definite; increase the damping") from exc
    if not np.all(np.diag(L) > 0):
        raise NumericalError(f"non-positive pivot in H + {damping:g} I; increase the damping")
    return HessianState(damping=damping, fingerprint=fp, matrix=H, cholesky=L)


def fisher(grads) -> np.ndarray:
    """Empirical Fisher ``(1/N) sum_i g_i g_i^T``."""
    grads = np.asarray(grads, dtype=np.float64)
    return grads.T @ grads / grads.shape[0]


def fd_hessian(grad_fn, theta, step=1e-4) -> np.ndarray:
    """Central finite differences of a gradient function; symmetrized."""
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        H[:, j] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * step)
    return 0.5 * (H + H.T)


def _mean_last_layer_grad(params, dataset, rcfg, cfg):
    def grad_fn(last):
        theta = params.theta.copy()
        theta[params.last_layer_slice] = last
        pp = pixel_pass(params.with_theta(theta), dataset, rcfg, cfg.loss, cfg.charbonnier_eps, cfg.chunk)
        return pp.grads.mean(axis=0)
    return grad_fn


def lanczos_top_eigenpairs(matvec, dim, rank, *, tol=1e-8, seed=0, max_iter=None):
    """Top ``rank`` eigenpairs of a symmetric PSD operator.

    Lanczos with full reorthogonalization. The Krylov basis grows until the
    top Ritz pairs have residual below ``tol`` (relative to the largest Ritz
    value); on breakdown (an invariant subspace) it restarts from a random
    vector orthogonal to the current basis, so ``rank = dim`` recovers the
    whole spectrum.
    """
    rank = min(rank, dim)
    max_iter = dim if max_iter is None else min(max_iter, dim)
    rng = np.random.default_rng(seed)
    Q = np.zeros((dim, max_iter))
    alpha = np.zeros(max_iter)
    beta = np.zeros(max_iter)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    m = 0
    while m < max_iter:
        Q[:, m] = q
        w = matvec(q)
        alpha[m] = q @ w
        w -= alpha[m] * q
        if m > 0:
            w -= beta[m - 1] * Q[:, m - 1]
        for _ in range(2):
            w -= Q[:, :m + 1] @ (Q[:, :m + 1].T @ w)
        b = np.linalg.norm(w)
        m += 1
        if m >= rank and (m == max_iter or m % 4 == 0 or b < 1e-12):
            theta_, S = linalg.eigh_tridiagonal(alpha[:m], beta[:m - 1])
            top = np.argsort(theta_)[::-1][:rank]
            resid = np.abs(b * S[-1, top])
            scale = max(theta_.max(), 1e-300)
            if m == max_iter or np.all(resid <= tol * scale):
                break
        if m == max_iter:
            break
        if b < 1e-10 * max(1.0, abs(alpha[:m]).max()):
            # invariant subspace: restart orthogonally, decoupling the tridiagonal
            beta[m - 1] = 0.0
            q = rng.standard_normal(dim)
            for _ in range(2):
                q -= Q[:, :m] @ (Q[:, :m].T @ q)
            q /= np.linalg.norm(q)
        else:
            beta[m - 1] = b
            q = w / b
    theta_, S = linalg.eigh_tridiagonal(alpha[:m], beta[:m - 1])
    order = np.argsort(theta_)[::-1][:rank]
    vals = np.maximum(theta_[order], 0.0)
    vecs = Q[:, :m] @ S[:, order]
    return vals, vecs


def per_ray_full_grads(params, origins, dirs, targets, rcfg, cfg: InfluenceConfig):
    rcfg = _deterministic(rcfg)
    rows = []
    for s in range(0, origins.shape[0], 256):
        b = render.render_rays(params, origins[s:s + 256], dirs[s:s + 256], rcfg)
        gc = render.loss_grad(b.color, targets[s:s + 256], cfg.loss, cfg.charbonnier_eps)
        rows.append(render.backprop_batch(params, b, gc, per_ray=True))
    return np.concatenate(rows)


def build_hessian(params, dataset, rcfg, cfg: InfluenceConfig = InfluenceConfig(),
                  pp: PixelPass | None = None) -> HessianState:
    fp = fingerprint(params, dataset)
    if cfg.scope == "low_rank":
        origins, dirs, targets = all_rays(dataset)
        rng = np.random.default_rng(cfg.seed)
        m = min(cfg.curvature_rays, origins.shape[0])
        pick = np.sort(rng.choice(origins.shape[0], m, replace=False))
        J = per_ray_full_grads(params, origins[pick], dirs[pick], targets[pick], rcfg, cfg)
        vals, vecs = lanczos_top_eigenpairs(lambda v: J.T @ (J @ v) / m, params.size, cfg.rank,
                                            seed=cfg.seed)
        return HessianState(damping=cfg.damping, fingerprint=fp, eigvals=vals, eigvecs=vecs)
    if cfg.hessian_mode == "exact_fd_oracle":
        H = fd_hessian(_mean_last_layer_grad(params, dataset, rcfg, cfg), params.last_layer, cfg.fd_step)
    else:
        pp = pp or pixel_pass(params, dataset, rcfg, cfg.loss, cfg.charbonnier_eps, cfg.chunk)
        H = fisher(pp.grads)
    return factorize(H, cfg.damping, fp)


def self_influence_dense(grads, state: HessianState) -> np.ndarray:
    Y = linalg.solve_triangular(state.cholesky, np.asarray(grads, dtype=np.float64).T, lower=True)
    return np.einsum("ij,ij->j", Y, Y)


def self_influence_low_rank(projections, state: HessianState) -> np.ndarray:
    """``projections``: (N, r) values ``v_k^T g_i``."""
    return (projections ** 2 / (state.eigvals + state.damping)).sum(axis=1)


def score_self_influence(params, dataset, rcfg, H: HessianState,
                         cfg: InfluenceConfig = InfluenceConfig(), valid=None,
                         pp: PixelPass | None = None) -> ScoreMap:
    fp = fingerprint(params, dataset)
    if H.fingerprint and H.fingerprint != fp:
        raise FingerprintMismatchError(
            f"Hessian built for {H.fingerprint}, scoring {fp}: params or dataset changed")
    if H.low_rank:
        origins, dirs, targets = all_rays(dataset)
        proj = np.empty((origins.shape[0], H.eigvecs.shape[1]))
        step = 1024
        for s in range(0, origins.shape[0], step):
            sl = slice(s, s + step)
            J = per_ray_full_grads(params, origins[sl], dirs[sl], targets[sl], rcfg, cfg)
            proj[sl] = J @ H.eigvecs
        scores = self_influence_low_rank(proj, H)
    else:
        pp = pp or pixel_pass(params, dataset, rcfg, cfg.loss, cfg.charbonnier_eps, cfg.chunk)
        scores = self_influence_dense(pp.grads, H)
    return ScoreMap(scores.reshape(dataset.images.shape[:3]), "self_influence", _valid(dataset, valid))


# --- leave-one-out ----------------------------------------------------------------

def score_loo(dataset, pixel, tcfg, rcfg, loss="l2", baseline=None):
    """Loss increase on ``pixel`` = (view, py, px) when it is left out of training.

    Retrains with the same seed. Pass ``baseline`` (params trained on all
    pixels) to skip the first fit. Desk-scale datasets only.
    """
    from .field.train import train

    v, py, px = pixel
    keep = np.ones(dataset.images.shape[:3], dtype=bool)
    keep[v, py, px] = False
    full = baseline if baseline is not None else train(dataset, None, tcfg, rcfg)[0]
    loo = train(dataset, keep, tcfg, rcfg)[0]
    ray_o, ray_d, targets = all_rays(dataset)
    i = np.ravel_multi_index((v, py, px), dataset.images.shape[:3])
    det = _deterministic(rcfg)

    def _loss(p):
        b = render.render_rays(p, ray_o[i:i + 1], ray_d[i:i + 1], det)
        return float(render.loss_per_ray(b.color, targets[i:i + 1], loss)[0])

    return _loss(loo) - _loss(full)


@dataclass
class LinearToy:
    """Squared-error linear head on frozen features: a convex stand-in for exact LOO checks."""

    X: np.ndarray
    y: np.ndarray
    ridge: float = 0.0

    def fit(self, keep=None) -> np.ndarray:
        X, y = (self.X, self.y) if keep is None else (self.X[keep], self.y[keep])
        n = X.shape[0]
        A = X.T @ X / n + self.ridge * np.eye(X.shape[1])
        return np.linalg.solve(A, X.T @ y / n)

    def losses(self, theta) -> np.ndarray:
        return (self.X @ theta - self.y) ** 2

    def grads(self, theta) -> np.ndarray:
        return 2.0 * (self.X @ theta - self.y)[:, None] * self.X

    def mean_grad(self, theta) -> np.ndarray:
        return self.grads(theta).mean(axis=0) + 2.0 * self.ridge * theta

    def loo_deltas(self, theta=None) -> np.ndarray:
        theta = self.fit() if theta is None else theta
        base = self.losses(theta)
        out = np.empty(len(self.y))
        for i in range(len(self.y)):
            keep = np.ones(len(self.y), dtype=bool)
            keep[i] = False
            out[i] = self.losses(self.fit(keep))[i] - base[i]
        return out


def make_linear_toy(n=200, d=5, corrupt=1, noise=0.1, shift=5.0, seed=0):
    """Gaussian features, linear labels plus noise, ``corrupt`` labels shifted by ``shift``."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    y = X @ w + noise * rng.standard_normal(n)
    bad = rng.choice(n, corrupt, replace=False)
    y[bad] += shift
    return LinearToy(X, y), bad


# --- thresholds -------------------------------------------------------------------

def _histogram(scores, bins):
    s = np.asarray(scores, dtype=np.float64).ravel()
    lo, hi = s.min(), s.max()
    if not hi > lo:
        raise InputError("Otsu needs at least two distinct score values")
    idx = np.minimum(((s - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    edges = lo + (hi - lo) * np.arange(bins + 1) / bins
    return idx, counts, edges


def otsu_split(scores, bins=256):
    """Index ``k`` of the first bin of the upper class, plus the bin index of every score."""
    idx, counts, edges = _histogram(scores, bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    m0 = np.cumsum(counts * centers)[:-1]
    total, total_m = float(counts.sum()), float((counts * centers).sum())
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (m0 / w0 - (total_m - m0) / w1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    return int(np.argmax(between)) + 1, idx


def otsu_threshold(scores, bins=256) -> float:
    """Histogram Otsu threshold: scores in bins at or above it form the upper class.

    Ties in inter-class variance resolve to the lowest threshold.
    """
    k, _ = otsu_split(scores, bins)
    _, _, edges = _histogram(scores, bins)
    return float(edges[k])


def otsu_mask(score_map: ScoreMap, bins=256) -> np.ndarray:
    vals = score_map.values[score_map.valid]
    k, idx = otsu_split(vals, bins)
    mask = np.zeros(score_map.values.shape, dtype=bool)
    mask[score_map.valid] = idx >= k
    return mask


def topk_mask(score_map: ScoreMap, k_percent: float) -> np.ndarray:
    """Flag the ceil(k% of valid pixels) highest scores; ties go to (view, py, px) order."""
    if not 0 <= k_percent <= 100:
        raise InputError("k_percent must lie in [0, 100]")
    flat_valid = np.flatnonzero(score_map.valid.ravel())
    n = flat_valid.size
    count = min(n, math.ceil(round(k_percent * n / 100.0, 9)))
    order = np.argsort(-score_map.values.ravel()[flat_valid], kind="stable")
    mask = np.zeros(score_map.values.size, dtype=bool)
    mask[flat_valid[order[:count]]] = True
    return mask.reshape(score_map.values.shape)
