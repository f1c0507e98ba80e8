"""Image segmentation providers and pixel-to-segment refinement of flags."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatchError, InputError, MalformedFileError, MissingFileError
from .kernels import fh_merge

PROVIDERS = ("felzenszwalb", "grid", "external")


@dataclass
class SegmentMap:
    """Per-view integer segment ids, dense in ``[0, count)``."""

    labels: np.ndarray          # (H, W) int64
    provider: str

    def __post_init__(self):
        self.labels = densify(self.labels)

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def save(self, path) -> None:
        if self.count > 65536:
            raise InputError("more than 65536 segments do not fit a 16-bit PNG")
        Image.fromarray(self.labels.astype(np.uint16)).save(path)


@dataclass(frozen=True)
class RefineConfig:
    epsilon: float = 0.1
    k: float = 100.0
    min_size: int = 20
    smoothing: float = 0.8
    tile: int = 8
    provider: str = "felzenszwalb"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise InputError("epsilon must lie in [0, 1]")
        if self.k <= 0 or self.min_size < 1 or self.smoothing < 0 or self.tile < 1:
            raise InputError("k > 0, min_size >= 1, smoothing >= 0 and tile >= 1 required")
        if self.provider not in PROVIDERS:
            raise InputError(f"unknown segment provider {self.provider!r}")


def densify(labels) -> np.ndarray:
    """Relabel ids to ``0..n-1`` in order of first appearance (raster order)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InputError("segment labels must be a 2-D map")
    _, first, inv = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inv].reshape(labels.shape)


def _grid_edges(h, w):
    idx = np.arange(h * w).reshape(h, w)
    pairs = [(idx[:, :-1], idx[:, 1:]),      # right
             (idx[:-1, :], idx[1:, :]),      # down
             (idx[:-1, :-1], idx[1:, 1:]),   # down-right
             (idx[:-1, 1:], idx[1:, :-1])]   # down-left
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return a, b


def segment_felzenszwalb(image, cfg: RefineConfig = RefineConfig()) -> SegmentMap:
    """Graph-based segmentation on the 8-connected pixel grid.

    Edge weights are RGB distances on the 0-255 scale, so ``k`` has the usual
    magnitude. A component absorbs an edge while its weight is within
    ``Int(C) + k/|C|`` of both sides; components smaller than ``min_size``
    are then merged along the cheapest remaining edges.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError("expected an (H, W, 3) image")
    h, w = img.shape[:2]
    if cfg.smoothing > 0:
        img = np.stack([ndimage.gaussian_filter(img[..., c], cfg.smoothing, mode="nearest")
                        for c in range(3)], axis=-1)
    flat = img.reshape(-1, 3) * 255.0
    a, b = _grid_edges(h, w)
    weight = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weight, kind="stable")
    roots = fh_merge(np.ascontiguousarray(a[order], dtype=np.int64),
                     np.ascontiguousarray(b[order], dtype=np.int64),
                     np.ascontiguousarray(weight[order]), h * w, float(cfg.k), int(cfg.min_size))
    return SegmentMap(roots.reshape(h, w), "felzenszwalb")


def segment_grid(shape, tile: int) -> SegmentMap:
    """Square tiles in row-major order; edge tiles may be smaller."""
    h, w = shape[:2]
    if tile < 1:
        raise InputError("tile must be >= 1")
    ys, xs = np.mgrid[:h, :w]
    ntx = -(-w // tile)
    return SegmentMap((ys // tile) * ntx + xs // tile, "grid")


def load_external_segments(path, expected_shape) -> SegmentMap:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "segment map")
    try:
        with Image.open(path) as im:
            labels = np.array(im)
    except OSError as exc:
        raise MalformedFileError(path, f"unreadable image ({exc})") from exc
    if labels.ndim != 2:
        raise MalformedFileError(path, "segment map must be single-channel")
    if labels.shape != tuple(expected_shape[:2]):
        raise DimensionMismatchError(path, tuple(expected_shape[:2]), labels.shape)
    return SegmentMap(labels.astype(np.int64), "external")


def segment_views(images, cfg: RefineConfig = RefineConfig(), external_dir=None) -> list[SegmentMap]:
    if cfg.provider == "grid":
        return [segment_grid(img.shape, cfg.tile) for img in images]
    if cfg.provider == "external":
        if external_dir is None:
            raise InputError("external segments need a directory")
        return [load_external_segments(Path(external_dir) / f"seg_{v:04d}.png", img.shape)
                for v, img in enumerate(images)]
    return [segment_felzenszwalb(img, cfg) for img in images]


def refine_view(flagged, seg: SegmentMap, epsilon: float) -> np.ndarray:
    """Mask of whole segments whose flagged-pixel ratio exceeds ``epsilon`` (strictly)."""
    flagged = np.asarray(flagged, dtype=bool)
    if flagged.shape != seg.labels.shape:
        raise InputError(f"flag map {flagged.shape} does not match segments {seg.labels.shape}")
    counts = np.bincount(seg.labels.ravel(), weights=flagged.ravel(), minlength=seg.count)
    ratio = counts / seg.sizes()
    return (ratio > epsilon)[seg.labels]


def refine_pixel_to_segment(flags, segs, epsilon: float = 0.1) -> np.ndarray:
    """(V, H, W) distractor mask; ``flags`` is a FlagMap or boolean array (undetermined = clean)."""
    flagged = np.asarray(getattr(flags, "flagged", flags), dtype=bool)
    if len(segs) != flagged.shape[0]:
        raise InputError("one segment map per view required")
    return np.stack([refine_view(flagged[v], segs[v], epsilon) for v in range(len(segs))])


def save_mask(directory, mask) -> list[Path]:
    """Per-view 8-bit PNGs, 255 = prune, matching the ground-truth mask layout."""
    from .synth import write_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for v in range(mask.shape[0]):
        out.append(directory / f"mask_{v:04d}.png")
        write_png(out[-1], np.asarray(mask[v], dtype=np.uint8) * 255)
    return out


def load_mask(directory, n_views=None) -> np.ndarray:
    from .synth import read_png

    files = sorted(Path(directory).glob("mask_*.png"))
    if not files or (n_views is not None and len(files) != n_views):
        raise MissingFileError(Path(directory) / "mask_0000.png", "distraction mask")
    return np.stack([read_png(f) > 127 for f in files])
