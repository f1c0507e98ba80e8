"""Analytic ray-traced scenes, image-space distractors, and the on-disk dataset format.

Layout written by :func:`generate_dataset`::

    root/views/view_0000.png      contaminated training views (RGB, 8 bit)
    root/clean/view_0000.png      the same views without distractors
    root/gt_masks/view_0000.png   distractor masks (L, 255 = distractor)
    root/cameras.json
    root/manifest.json
    root/test/view_0000.png       optional held-out clean views
    root/test_cameras.json
"""
from __future__ import annotations

import colorsys
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (DataError, DimensionMismatchError, InputError, MalformedFileError,
                     MissingFileError)
from .geometry import Camera, load_cameras, pixel_rays, ring_cameras, save_cameras

log = logging.getLogger(__name__)

LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
MANIFEST_VERSION = 1
_EPS_T = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def __post_init__(self):
        if not self.radius > 0:
            raise InputError("sphere radius must be positive")
        _check_color(self.albedo)


@dataclass(frozen=True)
class Box:
    min: tuple
    max: tuple
    albedo: tuple

    def __post_init__(self):
        if not np.all(np.asarray(self.min) < np.asarray(self.max)):
            raise InputError("box min must be < max componentwise")
        _check_color(self.albedo)


def _check_color(c):
    c = np.asarray(c, dtype=float)
    if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
        raise InputError(f"colors must be rgb in [0,1], got {c}")


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: tuple = (0.0, 0.0, 0.0)
    ambient: float = 0.3
    near: float = 0.0
    far: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        _check_color(self.background)
        if not 0 < self.ambient <= 1:
            raise InputError("ambient must lie in (0, 1]")
        if not 0 <= self.near < self.far:
            raise InputError("need 0 <= near < far")

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            kind = "sphere" if isinstance(p, Sphere) else "box"
            prims.append({"kind": kind, **{k: list(v) if isinstance(v, tuple) else v
                                           for k, v in asdict(p).items()}})
        return {"primitives": prims, "background": list(self.background),
                "ambient": self.ambient, "near": self.near, "far": self.far}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def trace(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray.

    Returns ``(t, prim_index, normal)``; misses have ``t = inf`` and index -1.
    Hits are restricted to ``(max(near, eps), far]``.
    """
    n = origins.shape[0]
    t_best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    normals = np.zeros((n, 3))
    t_lo = max(scene.near, _EPS_T)
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            t, nrm = _hit_sphere(prim, origins, dirs, t_lo)
        else:
            t, nrm = _hit_box(prim, origins, dirs, t_lo)
        better = (t < t_best) & (t <= scene.far)
        t_best[better] = t[better]
        idx[better] = k
        normals[better] = nrm[better]
    return t_best, idx, normals


def _hit_sphere(s: Sphere, o, d, t_lo):
    c = np.asarray(s.center, dtype=np.float64)
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    cc = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
    disc = b * b - cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > t_lo, t0, np.where(t1 > t_lo, t1, np.inf))
    t = np.where(hit, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    nrm = (p - c) / s.radius
    # inside hits see the inner face
    inside = np.isfinite(t) & (t0 <= t_lo)
    nrm[inside] *= -1
    return t, nrm


def _hit_box(bx: Box, o, d, t_lo):
    lo = np.asarray(bx.min, dtype=np.float64)
    hi = np.asarray(bx.max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    # axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty
    par = d == 0
    inside_slab = (o >= lo) & (o <= hi)
    ta = np.where(par, np.where(inside_slab, -np.inf, np.inf), ta)
    tb = np.where(par, np.where(inside_slab, np.inf, -np.inf), tb)
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    enter_axis = tmin.argmax(axis=1)
    exit_axis = tmax.argmin(axis=1)
    ok = t_enter <= t_exit
    use_enter = t_enter > t_lo
    t = np.where(use_enter, t_enter, np.where(t_exit > t_lo, t_exit, np.inf))
    t = np.where(ok, t, np.inf)
    axis = np.where(use_enter, enter_axis, exit_axis)
    rows = np.arange(o.shape[0])
    nrm = np.zeros_like(o)
    sign = -np.sign(d[rows, axis])
    sign = np.where(use_enter, sign, -sign)
    nrm[rows, axis] = np.where(sign == 0, 1.0, sign)
    return t, nrm


def shade(scene: AnalyticScene, idx, normals) -> np.ndarray:
    albedo = np.array([p.albedo for p in scene.primitives] or [[0, 0, 0]], dtype=np.float64)
    lam = np.maximum(0.0, normals @ LIGHT_DIR)
    col = albedo[np.maximum(idx, 0)] * (scene.ambient + (1 - scene.ambient) * lam)[:, None]
    col[idx < 0] = np.asarray(scene.background, dtype=np.float64)
    return col


def render_clean(scene: AnalyticScene, camera: Camera):
    """Ray-trace one view. Returns ``(image (H,W,3), depth (H,W))``; misses get depth = far."""
    o, d = pixel_rays(camera)
    t, idx, nrm = trace(scene, o, d)
    img = shade(scene, idx, nrm)
    depth = np.where(np.isfinite(t), t, scene.far)
    h, w = camera.shape
    return img.reshape(h, w, 3), depth.reshape(h, w)


def visible_from(scene: AnalyticScene, camera: Camera, points: np.ndarray, tol=1e-6) -> np.ndarray:
    """Ground-truth visibility: the first surface along the ray from the camera to each point is the point itself."""
    c = camera.center
    v = points - c
    dist = np.linalg.norm(v, axis=1)
    t, _, _ = trace(scene, np.broadcast_to(c, points.shape).copy(), v / dist[:, None])
    return np.abs(t - dist) < tol * np.maximum(1.0, dist)


# --- distractors --------------------------------------------------------------

@dataclass(frozen=True)
class DistractorSpec:
    """Random opaque shapes pasted in image space.

    ``size_range`` is a fraction of the image diagonal: a disk's radius, or a
    rectangle's half-extent along its longer side (the other side is scaled by
    an aspect ratio drawn from [0.5, 1]).
    """

    per_view_probability: float = 0.5
    count_range: tuple = (1, 2)
    shape: str = "disk"
    size_range: tuple = (0.05, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.per_view_probability <= 1:
            raise InputError("per_view_probability must lie in [0, 1]")
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise InputError("count_range must satisfy 0 <= min <= max")
        a, b = self.size_range
        if not 0 < a <= b <= 1:
            raise InputError("size_range must satisfy 0 < min <= max <= 1")
        if self.shape not in ("disk", "rectangle", "mixed"):
            raise InputError(f"unknown distractor shape {self.shape!r}")


def disk_mask(h, w, cx, cy, r) -> np.ndarray:
    py, px = np.mgrid[0:h, 0:w]
    return (px + 0.5 - cx) ** 2 + (py + 0.5 - cy) ** 2 <= r * r


def rect_mask(h, w, cx, cy, hx, hy) -> np.ndarray:
    py, px = np.mgrid[0:h, 0:w]
    return (np.abs(px + 0.5 - cx) <= hx) & (np.abs(py + 0.5 - cy) <= hy)


def _saturated_color(rng) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(rng.uniform(), 1.0, 1.0))


def inject_distractors(image: np.ndarray, spec: DistractorSpec, rng_seed: int):
    """Composite random shapes onto a copy of ``image``; returns ``(image, mask)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise InputError("empty image")
    h, w = image.shape[:2]
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    rng = np.random.default_rng([spec.seed, rng_seed])
    if rng.uniform() >= spec.per_view_probability:
        return out, mask
    diag = float(np.hypot(h, w))
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    for _ in range(count):
        kind = spec.shape if spec.shape != "mixed" else ("disk" if rng.uniform() < 0.5 else "rectangle")
        size = rng.uniform(*spec.size_range) * diag
        if kind == "disk":
            hx = hy = size
        else:
            aspect = rng.uniform(0.5, 1.0)
            hx, hy = (size, size * aspect) if rng.uniform() < 0.5 else (size * aspect, size)
        # keep the shape fully inside the frame when it fits
        cx = rng.uniform(min(hx, w / 2), max(w - hx, w / 2))
        cy = rng.uniform(min(hy, h / 2), max(h - hy, h / 2))
        m = disk_mask(h, w, cx, cy, size) if kind == "disk" else rect_mask(h, w, cx, cy, hx, hy)
        out[m] = _saturated_color(rng)
        mask |= m
    return out, mask


def expected_mask_fraction(spec: DistractorSpec, h: int, w: int) -> float:
    """Expected masked fraction per view, ignoring overlap between shapes."""
    diag = np.hypot(h, w)
    a, b = spec.size_range
    mean_sq = diag ** 2 * (a * a + a * b + b * b) / 3.0
    disk = np.pi * mean_sq
    rect = 4.0 * mean_sq * 0.75  # E[aspect] over U(0.5, 1)
    area = {"disk": disk, "rectangle": rect, "mixed": 0.5 * (disk + rect)}[spec.shape]
    mean_count = 0.5 * (spec.count_range[0] + spec.count_range[1])
    return spec.per_view_probability * mean_count * area / (h * w)


# --- dataset I/O --------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    view_count: int
    width: int
    height: int
    views: list
    clean: list
    gt_masks: list
    cameras: str = "cameras.json"
    seed: int = 0
    scene_hash: str = ""
    contaminated_views: list = field(default_factory=list)
    test_views: list = field(default_factory=list)
    test_cameras: str | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["version"] = MANIFEST_VERSION
        return d

    def validate(self) -> None:
        for rel in [*self.views, *self.clean, *self.gt_masks, *self.test_views, self.cameras]:
            p = self.root / rel
            if not p.is_file():
                raise MissingFileError(p)
        for rel in [*self.views, *self.clean, *self.gt_masks, *self.test_views]:
            with Image.open(self.root / rel) as im:
                if im.size != (self.width, self.height):
                    raise DimensionMismatchError(self.root / rel, (self.height, self.width),
                                                 (im.size[1], im.size[0]))


@dataclass
class Dataset:
    """In-memory dataset: images are float arrays in [0, 1]."""

    images: np.ndarray                 # (V, H, W, 3)
    cameras: list
    clean: np.ndarray | None = None    # (V, H, W, 3)
    masks: np.ndarray | None = None    # (V, H, W) bool
    test_images: np.ndarray | None = None
    test_cameras: list = field(default_factory=list)
    root: Path | None = None
    manifest: DatasetManifest | None = None

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.images.shape[:3]))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype=np.float64).tobytes())
        for c in self.cameras:
            h.update(json.dumps(c.to_record(), sort_keys=True).encode())
        return h.hexdigest()[:16]


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_png(path, mode=None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    try:
        with Image.open(path) as im:
            if mode is not None and im.mode != mode:
                im = im.convert(mode)
            return np.asarray(im)
    except OSError as exc:
        raise MalformedFileError(path, f"unreadable image ({exc})") from exc


def generate_dataset(scene: AnalyticScene, cameras, spec: DistractorSpec, out_dir,
                     test_cameras=()) -> DatasetManifest:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    h, w = cameras[0].shape
    names = [f"view_{i:04d}.png" for i in range(len(cameras))]
    contaminated = []
    for i, cam in enumerate(cameras):
        if cam.shape != (h, w):
            raise InputError("all cameras must share one image size")
        clean, _ = render_clean(scene, cam)
        clean8 = to_uint8(clean)
        dirty, mask = inject_distractors(clean8 / 255.0, spec, rng_seed=i)
        write_png(root / "clean" / names[i], clean8)
        write_png(root / "views" / names[i], to_uint8(dirty))
        write_png(root / "gt_masks" / names[i], mask.astype(np.uint8) * 255)
        if mask.any():
            contaminated.append(names[i])
    save_cameras(root / "cameras.json", cameras)
    test_names = []
    if test_cameras:
        for i, cam in enumerate(test_cameras):
            img, _ = render_clean(scene, cam)
            test_names.append(f"test/view_{i:04d}.png")
            write_png(root / test_names[-1], to_uint8(img))
        save_cameras(root / "test_cameras.json", test_cameras)
    manifest = DatasetManifest(
        root=root, view_count=len(cameras), width=w, height=h,
        views=[f"views/{n}" for n in names], clean=[f"clean/{n}" for n in names],
        gt_masks=[f"gt_masks/{n}" for n in names], seed=spec.seed,
        scene_hash=scene.digest(), contaminated_views=[f"views/{n}" for n in contaminated],
        test_views=test_names, test_cameras="test_cameras.json" if test_cameras else None)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")
    manifest.validate()
    log.info("wrote %d views (%d contaminated) to %s", len(cameras), len(contaminated), root)
    return manifest


_MANIFEST_FIELDS = ("view_count", "width", "height", "views", "cameras")


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise MissingFileError(path, "manifest")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(path, f"invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise MalformedFileError(path, "expected an object")
    for key in _MANIFEST_FIELDS:
        if key not in raw:
            raise MalformedFileError(path, f"missing field '{key}'")
    raw.pop("version", None)
    known = DatasetManifest.__dataclass_fields__
    kwargs = {k: v for k, v in raw.items() if k in known}
    kwargs.setdefault("clean", [])
    kwargs.setdefault("gt_masks", [])
    return DatasetManifest(root=root, **kwargs)


def load_dataset(root) -> Dataset:
    """Read a dataset directory. Missing clean images or masks load as ``None``."""
    manifest = read_manifest(root)
    root = manifest.root
    cams = load_cameras(root / manifest.cameras)
    if len(cams) != manifest.view_count or len(manifest.views) != manifest.view_count:
        raise MalformedFileError(root / "manifest.json",
                                 f"view_count {manifest.view_count} disagrees with "
                                 f"{len(manifest.views)} views / {len(cams)} cameras")
    hw = (manifest.height, manifest.width)

    def _stack(rels, mode):
        out = []
        for rel in rels:
            arr = read_png(root / rel, mode)
            if arr.shape[:2] != hw:
                raise DimensionMismatchError(root / rel, hw, arr.shape[:2])
            out.append(arr)
        return np.stack(out)

    for cam in cams:
        if cam.shape != hw:
            raise DimensionMismatchError(root / manifest.cameras, hw, cam.shape)
    images = _stack(manifest.views, "RGB") / 255.0
    clean = masks = None
    if manifest.clean and all((root / r).is_file() for r in manifest.clean):
        clean = _stack(manifest.clean, "RGB") / 255.0
    if manifest.gt_masks and all((root / r).is_file() for r in manifest.gt_masks):
        masks = _stack(manifest.gt_masks, "L") > 127
    test_images, test_cams = None, []
    if manifest.test_views:
        test_images = _stack(manifest.test_views, "RGB") / 255.0
        test_cams = load_cameras(root / manifest.test_cameras)
    return Dataset(images=images, cameras=cams, clean=clean, masks=masks,
                   test_images=test_images, test_cameras=test_cams, root=root, manifest=manifest)


def dataset_from_arrays(images, cameras, clean=None, masks=None, test_images=None,
                        test_cameras=()) -> Dataset:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InputError("images must have shape (V, H, W, 3)")
    if len(cameras) != images.shape[0]:
        raise InputError("one camera per view required")
    return Dataset(images=images, cameras=list(cameras), clean=clean, masks=masks,
                   test_images=test_images, test_cameras=list(test_cameras))


# --- stock scenes ---------------------------------------------------------------

def two_sphere_scene(background=(0.1, 0.1, 0.15)) -> AnalyticScene:
    """Unit sphere at the origin and a half-size occluder beside it.

    The surfaces are 0.37 apart at their closest, more than the default
    occlusion threshold, so an occluded point never lies within the threshold
    of the occluder that hides it.
    """
    return AnalyticScene(
        primitives=(Sphere((0.0, 0.0, 0.0), 1.0, (0.8, 0.3, 0.3)),
                    Sphere((1.8, 0.0, 0.5), 0.5, (0.3, 0.7, 0.4))),
        background=background, ambient=0.3, near=0.5, far=12.0)


def two_sphere_cameras(n_views=12, size=64, n_test=0):
    """Ring cameras framing :func:`two_sphere_scene`; test views sit between training views."""
    kw = dict(radius=6.0, z=2.0, fx=0.875 * size, width=size, height=size)
    test = ring_cameras(n_test, phase=np.pi / max(n_views, 1), first_view_id=1000, **kw) if n_test else []
    return ring_cameras(n_views, **kw), test


def tabletop_scene(tiles=6, extent=1.2, background=(0.08, 0.08, 0.12), scale=1.0) -> AnalyticScene:
    """Spheres and a block on a checkered floor made of thin boxes.

    The floor texture gives multi-view depth a unique solution; a uniform
    floor would leave depth ambiguous for a radiance field. ``scale``
    multiplies every coordinate.
    """
    prims = []
    step = 2 * extent / tiles
    light = (0.85, 0.82, 0.7)
    dark = (0.35, 0.4, 0.5)
    for i in range(tiles):
        for j in range(tiles):
            x0, y0 = -extent + i * step, -extent + j * step
            prims.append(Box((x0, y0, -0.52), (x0 + step, y0 + step, -0.5),
                             light if (i + j) % 2 == 0 else dark))
    prims += [
        Sphere((0.0, 0.0, -0.1), 0.4, (0.85, 0.35, 0.3)),
        Sphere((0.55, -0.45, -0.25), 0.25, (0.3, 0.7, 0.4)),
        Sphere((-0.5, 0.5, -0.3), 0.2, (0.35, 0.45, 0.85)),
        Box((-0.7, -0.75, -0.5), (-0.35, -0.4, -0.1), (0.8, 0.7, 0.3)),
    ]
    scene = AnalyticScene(primitives=tuple(prims), background=background, ambient=0.35,
                          near=0.5, far=6.0)
    return scene if scale == 1.0 else scale_scene(scene, scale)


def scale_scene(scene: AnalyticScene, s: float) -> AnalyticScene:
    """Uniformly scale all geometry (and the near/far range) about the origin."""
    if not s > 0:
        raise InputError("scale must be > 0")
    prims = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            prims.append(Sphere(tuple(s * c for c in p.center), s * p.radius, p.albedo))
        else:
            prims.append(Box(tuple(s * c for c in p.min), tuple(s * c for c in p.max), p.albedo))
    return AnalyticScene(tuple(prims), scene.background, scene.ambient, s * scene.near, s * scene.far)


# Desk-scale benchmark: 20 ring views of the tabletop, 5 held-out views between them.
# The scale maps the floor onto [-1, 1]^2, the range the positional encoding expects.
BENCHMARK_SCENE = {"tiles": 12, "extent": 2.4, "scale": 1 / 2.4}


def benchmark_cameras(n_views=20, size=64, n_test=5):
    """Training and held-out ring cameras; test views sit between training views."""
    k = BENCHMARK_SCENE["scale"]
    kw = dict(radius=1.2 * k, z=3.0 * k, target=(0.0, 0.0, -0.45 * k), fx=60.0 * size / 64,
              width=size, height=size)
    train = ring_cameras(n_views, **kw)
    test = ring_cameras(n_test, phase=1.3 * np.pi / n_views, first_view_id=1000, **kw)
    return train, test


def benchmark_dataset(out_dir, seed=0, n_views=20, size=64, n_test=5) -> "Dataset":
    """Generate (or reuse, when the manifest matches) and load the benchmark dataset."""
    root = Path(out_dir)
    scene = tabletop_scene(**BENCHMARK_SCENE)
    if (root / "manifest.json").is_file():
        try:
            man = read_manifest(root)
            if man.seed == seed and man.scene_hash == scene.digest() and man.view_count == n_views \
                    and man.width == size:
                return load_dataset(root)
        except DataError:
            pass
    cams, tests = benchmark_cameras(n_views, size, n_test)
    generate_dataset(scene, cams, DistractorSpec(seed=seed), root, test_cameras=tests)
    return load_dataset(root)
