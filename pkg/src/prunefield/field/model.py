"""Positional encoding and the radiance-field MLP with hand-written backprop.

Parameters live in one flat float64 vector; named layers are views into it.
The color head is stored last, so ``params.last_layer`` is a contiguous tail
slice of the vector and of every gradient.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import InputError, MalformedFileError, MissingFileError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 6
    L_dir: int = 2

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise InputError("frequency counts must be >= 0")


def encoded_dim(L: int) -> int:
    return 3 + 6 * L


def encode(x, L: int) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``.

    Higher octaves use the double-angle identities instead of fresh sin/cos calls.
    """
    x = np.asarray(x)
    if L == 0:
        return x.copy()
    out = np.empty((*x.shape[:-1], 3 + 6 * L), dtype=x.dtype)
    out[..., :3] = x
    s = np.sin(np.pi * x)
    c = np.cos(np.pi * x)
    for k in range(L):
        if k:
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
        out[..., 3 + 6 * k:6 + 6 * k] = s
        out[..., 6 + 6 * k:9 + 6 * k] = c
    return out


@dataclass(frozen=True)
class Architecture:
    depth: int = 4
    width: int = 64
    encoding: EncodingConfig = EncodingConfig()

    @property
    def in_pos(self) -> int:
        return encoded_dim(self.encoding.L_pos)

    @property
    def in_dir(self) -> int:
        return encoded_dim(self.encoding.L_dir)

    def layer_shapes(self):
        shapes = []
        fan_in = self.in_pos
        for i in range(self.depth):
            shapes += [(f"W{i}", (fan_in, self.width)), (f"b{i}", (self.width,))]
            fan_in = self.width
        shapes += [("Ws", (self.width, 1)), ("bs", (1,))]
        shapes += [("Wc", (self.width + self.in_dir, 3)), ("bc", (3,))]
        return shapes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(depth=d["depth"], width=d["width"], encoding=EncodingConfig(**d["encoding"]))


class FieldParams:
    """Flat parameter vector plus the layer layout of an :class:`Architecture`."""

    def __init__(self, arch: Architecture, theta=None):
        self.arch = arch
        self._slices = {}
        off = 0
        for name, shape in arch.layer_shapes():
            n = int(np.prod(shape))
            self._slices[name] = (slice(off, off + n), shape)
            off += n
        self.size = off
        self.last_layer_slice = slice(self._slices["Wc"][0].start, off)
        if theta is None:
            theta = np.zeros(off)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (off,):
            raise InputError(f"expected {off} parameters, got {theta.shape}")
        self.theta = theta

    def layer(self, name, theta=None):
        sl, shape = self._slices[name]
        return (self.theta if theta is None else theta)[sl].reshape(shape)

    @property
    def last_layer(self) -> np.ndarray:
        return self.theta[self.last_layer_slice]

    @property
    def n_last(self) -> int:
        return self.last_layer_slice.stop - self.last_layer_slice.start

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, self.theta.copy())

    def with_theta(self, theta) -> "FieldParams":
        return FieldParams(self.arch, theta)


def init_params(arch: Architecture = Architecture(), seed: int = 0, sigma_bias: float = -1.0) -> FieldParams:
    rng = np.random.default_rng(seed)
    p = FieldParams(arch)
    for name, shape in arch.layer_shapes():
        sl, _ = p._slices[name]
        if name.startswith("W"):
            bound = np.sqrt(6.0 / shape[0]) if name not in ("Ws", "Wc") else np.sqrt(1.0 / shape[0])
            p.theta[sl] = rng.uniform(-bound, bound, size=shape).ravel()
    p.theta[p._slices["bs"][0]] = sigma_bias
    return p


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Forward:
    """Activations cached by :func:`forward` for :func:`backward`."""

    __slots__ = ("acts", "dir_enc", "s_raw", "sigma", "rgb", "n_rays", "n_samples")


def forward(params: FieldParams, x, d, dtype=np.float64):
    """Evaluate the field at points ``x`` (R, S, 3) seen along unit directions ``d`` (R, 3).

    Returns ``(rgb (R,S,3), sigma (R,S), cache)``.
    """
    arch = params.arch
    theta = params.theta.astype(dtype, copy=False)
    R, S = x.shape[:2]
    h = encode(np.asarray(x, dtype=dtype).reshape(R * S, 3), arch.encoding.L_pos)
    acts = [h]
    for i in range(arch.depth):
        h = h @ params.layer(f"W{i}", theta)
        h += params.layer(f"b{i}", theta)
        np.maximum(h, 0, out=h)
        acts.append(h)
    s_raw = (h @ params.layer("Ws", theta))[:, 0] + params.layer("bs", theta)[0]
    Wc = params.layer("Wc", theta)
    de = encode(np.asarray(d, dtype=dtype), arch.encoding.L_dir)
    dir_term = de @ Wc[arch.width:] + params.layer("bc", theta)         # (R, 3)
    c_raw = (h @ Wc[:arch.width]).reshape(R, S, 3) + dir_term[:, None, :]
    cache = Forward()
    cache.acts, cache.dir_enc = acts, de
    cache.s_raw = s_raw.reshape(R, S)
    cache.sigma = _softplus(cache.s_raw)
    cache.rgb = _sigmoid(c_raw)
    cache.n_rays, cache.n_samples = R, S
    return cache.rgb, cache.sigma, cache


def field_eval(params: FieldParams, x, d):
    """Single-point evaluation: returns ``(rgb (3,), sigma)``."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InputError("viewing direction must be unit length")
    rgb, sigma, _ = forward(params, np.asarray(x, dtype=np.float64).reshape(1, 1, 3), d.reshape(1, 3))
    return rgb[0, 0], float(sigma[0, 0])


def _color_head_delta(cache: Forward, grad_rgb):
    rgb = cache.rgb
    return (grad_rgb * rgb * (1.0 - rgb)).astype(rgb.dtype, copy=False)   # (R, S, 3)


def last_layer_grads(params: FieldParams, cache: Forward, grad_rgb) -> np.ndarray:
    """Per-ray gradient of the color head, flattened in parameter order: (R, n_last)."""
    R, S = cache.n_rays, cache.n_samples
    dc = _color_head_delta(cache, grad_rgb)
    h = cache.acts[-1].reshape(R, S, -1)
    g_h = np.einsum("rsi,rsj->rij", h, dc)                              # (R, width, 3)
    dsum = dc.sum(axis=1)                                               # (R, 3)
    g_d = cache.dir_enc[:, :, None] * dsum[:, None, :]                  # (R, in_dir, 3)
    return np.concatenate([g_h.reshape(R, -1), g_d.reshape(R, -1), dsum], axis=1)


def backward(params: FieldParams, cache: Forward, grad_rgb, grad_sigma, per_ray=False) -> np.ndarray:
    """Backpropagate ``grad_rgb`` (R,S,3) and ``grad_sigma`` (R,S) to the parameters.

    Returns the summed gradient (P,) or, with ``per_ray``, one row per ray (R, P).
    """
    arch = params.arch
    R, S = cache.n_rays, cache.n_samples
    dt = cache.rgb.dtype
    theta = params.theta.astype(dt, copy=False)
    grads = {}
    dc = _color_head_delta(cache, grad_rgb)
    ds = (grad_sigma * _sigmoid(cache.s_raw)).astype(dt, copy=False)    # (R, S)
    h = cache.acts[-1]
    Wc = params.layer("Wc", theta)
    if per_ray:
        grads["Wc"] = np.concatenate([
            np.einsum("rsi,rsj->rij", h.reshape(R, S, -1), dc),
            cache.dir_enc[:, :, None] * dc.sum(axis=1)[:, None, :]], axis=1)
        grads["bc"] = dc.sum(axis=1)
        grads["Ws"] = np.einsum("rsi,rs->ri", h.reshape(R, S, -1), ds)[..., None]
        grads["bs"] = ds.sum(axis=1)[:, None]
    else:
        dc2 = dc.reshape(R * S, 3)
        grads["Wc"] = np.concatenate([h.T @ dc2, cache.dir_enc.T @ dc.sum(axis=1)], axis=0)
        grads["bc"] = dc2.sum(axis=0)
        grads["Ws"] = h.T @ ds.reshape(-1, 1)
        grads["bs"] = np.array([ds.sum()])
    dh = dc.reshape(R * S, 3) @ Wc[:arch.width].T + ds.reshape(-1, 1) @ params.layer("Ws", theta).T
    for i in range(arch.depth - 1, -1, -1):
        dz = np.multiply(dh, cache.acts[i + 1] > 0, out=dh)
        a = cache.acts[i]
        if per_ray:
            grads[f"W{i}"] = np.einsum("rsi,rsj->rij", a.reshape(R, S, -1), dz.reshape(R, S, -1))
            grads[f"b{i}"] = dz.reshape(R, S, -1).sum(axis=1)
        else:
            grads[f"W{i}"] = a.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ params.layer(f"W{i}", theta).T
    shape = (R, params.size) if per_ray else (params.size,)
    out = np.empty(shape, dtype=np.float64)
    for name, (sl, _) in params._slices.items():
        g = grads[name]
        out[..., sl] = g.reshape(R, -1) if per_ray else g.ravel()
    return out


def save_checkpoint(path, params: FieldParams, **configs) -> None:
    """Write weights and configs to a single ``.npz`` with a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"version": CHECKPOINT_VERSION, "arch": params.arch.to_dict(),
              "configs": {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
                          for k, v in configs.items()}}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, theta=params.theta, header=np.array(json.dumps(header)))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(FieldParams, configs dict)``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "checkpoint")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            theta = z["theta"]
    except (OSError, KeyError, ValueError) as exc:
        raise MalformedFileError(path, f"unreadable checkpoint ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise MalformedFileError(path, f"unsupported checkpoint version {header.get('version')}")
    return FieldParams(Architecture.from_dict(header["arch"]), theta), header["configs"]
