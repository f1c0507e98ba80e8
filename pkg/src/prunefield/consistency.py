"""Multi-view consistency of per-pixel scores.

Each query pixel is lifted to a surface point with its expected depth, the
point is projected into every other view, and the pixel it lands on joins the
correspondence set when that pixel lifts back to (nearly) the same point.
The query is flagged when its own score falls outside mean +- 3 std of the set.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, MissingFileError
from .geometry import Camera, pixel_index, pixel_rays, project_points

CLEAN, FLAGGED, UNDETERMINED = 0, 1, 2
MODES = ("query", "vote")


@dataclass(frozen=True)
class ConsistencyConfig:
    occlusion_threshold: float = 0.1
    min_correspondences: int = 4
    sigma_floor: float = 1e-12
    include_self: bool = True
    mode: str = "query"          # "vote": every determined set votes on all its members
    n_sigma: float = 3.0

    def __post_init__(self):
        if not self.occlusion_threshold > 0:
            raise InputError("occlusion_threshold must be > 0")
        if self.min_correspondences < 1:
            raise InputError("min_correspondences must be >= 1")
        if self.mode not in MODES:
            raise InputError(f"unknown consistency mode {self.mode!r}")


@dataclass(frozen=True)
class Member:
    view_id: int
    pixel: tuple
    score: float
    depth_distance: float


@dataclass
class CorrespondenceSet:
    query: tuple                 # (view, (px, py))
    query_score: float
    surface_point: np.ndarray
    members: list = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([m.score for m in self.members], dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(_moments(self.scores[None, :], np.ones((1, len(self.members)), bool))[0][0])

    @property
    def std(self) -> float:
        return float(_moments(self.scores[None, :], np.ones((1, len(self.members)), bool))[1][0])


@dataclass
class FlagMap:
    flagged: np.ndarray          # (V, H, W) bool
    undetermined: np.ndarray     # (V, H, W) bool

    def __post_init__(self):
        if np.any(self.flagged & self.undetermined):
            raise InputError("a pixel cannot be both flagged and undetermined")

    @property
    def states(self) -> np.ndarray:
        out = np.full(self.flagged.shape, CLEAN, dtype=np.uint8)
        out[self.flagged] = FLAGGED
        out[self.undetermined] = UNDETERMINED
        return out

    def summary(self) -> dict:
        views = [{"view_id": v, "flagged": int(self.flagged[v].sum()),
                  "undetermined": int(self.undetermined[v].sum()),
                  "clean": int((~self.flagged[v] & ~self.undetermined[v]).sum())}
                 for v in range(self.flagged.shape[0])]
        return {"views": views, "flagged": int(self.flagged.sum()),
                "undetermined": int(self.undetermined.sum()), "pixels": int(self.flagged.size)}

    def save(self, directory) -> list[Path]:
        from .synth import write_png

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for v in range(self.flagged.shape[0]):
            img = np.zeros(self.flagged.shape[1:], dtype=np.uint8)
            img[self.undetermined[v]] = 128
            img[self.flagged[v]] = 255
            written.append(directory / f"flags_{v:04d}.png")
            write_png(written[-1], img)
        written.append(directory / "flags.json")
        written[-1].write_text(json.dumps(self.summary(), indent=1), encoding="utf-8")
        return written

    @classmethod
    def load(cls, directory) -> "FlagMap":
        from .synth import read_png

        files = sorted(Path(directory).glob("flags_*.png"))
        if not files:
            raise MissingFileError(Path(directory) / "flags_0000.png", "flag map")
        imgs = np.stack([read_png(f) for f in files])
        return cls(imgs == 255, imgs == 128)


# --- lifting ----------------------------------------------------------------------

def lift_pixel(params, camera: Camera, pixel, rcfg):
    """Surface point and expected depth of the ray through pixel (px, py)."""
    from .field.render import render_ray
    from .geometry import ray_for_pixel

    ray = ray_for_pixel(camera, *pixel)
    out = render_ray(params, ray, rcfg)
    return ray.origin + out.depth * ray.direction, float(out.depth)


def point_maps_from_depth(cameras, depth) -> np.ndarray:
    """(V, H, W, 3) surface points from per-view expected-depth maps."""
    depth = np.asarray(depth, dtype=np.float64)
    pts = np.empty(depth.shape + (3,))
    for v, cam in enumerate(cameras):
        o, d = pixel_rays(cam)
        pts[v] = (o + depth[v].reshape(-1, 1) * d).reshape(cam.height, cam.width, 3)
    return pts


def point_maps(params, cameras, rcfg, chunk=4096) -> np.ndarray:
    from .field.render import render_image

    depth = np.stack([render_image(params, cam, rcfg, chunk=chunk)[1] for cam in cameras])
    return point_maps_from_depth(cameras, depth)


# --- correspondences ----------------------------------------------------------------

def build_correspondences(query_view, pixel, points, cameras, scores,
                          cfg: ConsistencyConfig = ConsistencyConfig()) -> CorrespondenceSet:
    """Occlusion-filtered correspondence set of one query pixel.

    ``points`` are per-view lifted surface points (see :func:`point_maps`),
    ``scores`` a (V, H, W) array or ScoreMap.
    """
    vals = getattr(scores, "values", scores)
    px, py = pixel
    X = points[query_view, py, px]
    members = []
    for v, cam in enumerate(cameras):
        if v == query_view:
            continue
        u, w, z, ok = project_points(cam, X[None, :])
        if not ok[0]:
            continue
        qx, qy = (int(i[0]) for i in pixel_index(u, w))
        dist = float(np.linalg.norm(X - points[v, qy, qx]))
        if dist < cfg.occlusion_threshold:
            members.append(Member(v, (qx, qy), float(vals[v, qy, qx]), dist))
    own = float(vals[query_view, py, px])
    if cfg.include_self:
        members.append(Member(query_view, (px, py), own, 0.0))
    return CorrespondenceSet((query_view, (px, py)), own, X.copy(), members)


def _moments(M, present):
    """Population mean and std per row over present entries, summed left to right."""
    n = present.sum(axis=1)
    s = np.zeros(M.shape[0])
    for j in range(M.shape[1]):
        s = s + np.where(present[:, j], M[:, j], 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
        ss = np.zeros(M.shape[0])
        for j in range(M.shape[1]):
            d = M[:, j] - mean
            ss = ss + np.where(present[:, j], d * d, 0.0)
        std = np.sqrt(ss / n)
    return mean, std


def _decide(M, present, query_scores, cfg):
    n = present.sum(axis=1)
    mean, std = _moments(M, present)
    std = np.where(std < cfg.sigma_floor, cfg.sigma_floor, std)
    lo = mean - cfg.n_sigma * std
    hi = mean + cfg.n_sigma * std
    undetermined = n < cfg.min_correspondences
    outside = (query_scores <= lo) | (query_scores >= hi)
    return np.where(undetermined, UNDETERMINED, np.where(outside, FLAGGED, CLEAN)), lo, hi


def flag_query(cset: CorrespondenceSet, cfg: ConsistencyConfig = ConsistencyConfig()) -> int:
    """CLEAN, FLAGGED or UNDETERMINED for the query of one correspondence set."""
    M = cset.scores[None, :]
    state, _, _ = _decide(M, np.ones(M.shape, bool), np.array([cset.query_score]), cfg)
    return int(state[0])


def _gather(points, cameras, vals, q, cfg):
    """Member score matrix for every pixel of view ``q``: columns are other views, then self."""
    V, H, W = vals.shape
    X = points[q].reshape(-1, 3)
    cols, present, where = [], [], []
    for v, cam in enumerate(cameras):
        if v == q:
            continue
        u, w, z, ok = project_points(cam, X)
        qx, qy = pixel_index(np.where(ok, u, 0.0), np.where(ok, w, 0.0))
        dist = np.linalg.norm(X - points[v, qy, qx], axis=1)
        keep = ok & (dist < cfg.occlusion_threshold)
        cols.append(np.where(keep, vals[v, qy, qx], 0.0))
        present.append(keep)
        where.append(np.where(keep, (v * H + qy) * W + qx, -1))
    own = vals[q].ravel()
    if cfg.include_self:
        cols.append(own)
        present.append(np.ones(own.size, bool))
        where.append(q * H * W + np.arange(own.size))
    if not cols:
        empty = np.zeros((own.size, 0))
        return empty, empty.astype(bool), empty.astype(np.int64), own
    return np.stack(cols, 1), np.stack(present, 1), np.stack(where, 1), own


def flag_all(points, cameras, scores, cfg: ConsistencyConfig = ConsistencyConfig()) -> FlagMap:
    """Apply the 3-sigma rule to every pixel of every view."""
    vals = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    V, H, W = vals.shape
    if len(cameras) != V or points.shape[:3] != (V, H, W):
        raise InputError("points, cameras and scores must cover the same views")
    if cfg.mode == "vote":
        return _flag_votes(points, cameras, vals, cfg)
    states = np.empty((V, H * W), dtype=np.uint8)
    for q in range(V):
        M, present, _, own = _gather(points, cameras, vals, q, cfg)
        states[q] = _decide(M, present, own, cfg)[0]
    states = states.reshape(V, H, W)
    return FlagMap(states == FLAGGED, states == UNDETERMINED)


def _flag_votes(points, cameras, vals, cfg):
    V, H, W = vals.shape
    votes = np.zeros(V * H * W, dtype=np.int64)
    seen = np.zeros(V * H * W, dtype=np.int64)
    for q in range(V):
        M, present, where, own = _gather(points, cameras, vals, q, cfg)
        state, lo, hi = _decide(M, present, own, cfg)
        det = state != UNDETERMINED
        out = ((M <= lo[:, None]) | (M >= hi[:, None])) & present & det[:, None]
        np.add.at(seen, where[present & det[:, None]], 1)
        np.add.at(votes, where[out], 1)
    flagged = (2 * votes > seen).reshape(V, H, W)
    return FlagMap(flagged, (seen == 0).reshape(V, H, W))
