"""Parameterised stochastic input transformations.

A :class:`TransformSpec` fixes the kind and its magnitude ``z``;
:func:`sample_params` turns it into a concrete :class:`TransformDraw` for a
batch, and :func:`apply_transform` / :func:`transform_vjp` apply the draw.
For a fixed draw every kind is an affine map of the input followed by a
clamp to [0, 1], so the vector-Jacobian product is exact.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from dpolab.core.dct import dct2, idct2
from dpolab.errors import ConfigError
from dpolab.rng import stream

# Translation offsets are drawn in pixels of this reference resolution and
# rescaled to the actual image size when applied.
TRANSLATION_REFERENCE_SIZE = 224
# Standard deviation of the additive spectrum-transform noise (tied to the
# default L-inf budget).
SPECTRUM_SIGMA = 16 / 255
FILL_VALUE = 0.0

# kind -> per-slot (name, grid start, grid stop, grid step, legal low, legal high, integral)
PARAMETERS = {
    "identity": [],
    "translation": [("z", 20, 220, 40, 0, 220, False)],
    "block_shuffle": [("cuts", 2, 10, 1, 0, 10, True)],
    "rotation": [("z", 10, 160, 30, 0, 160, False)],
    "noise": [("z", 0.02, 0.50, 0.02, 0.0, 0.50, False)],
    "resize": [("z", 0.1, 0.9, 0.1, 0.1, 1.0, False)],
    "admix": [("eta", 0.10, 0.50, 0.02, 0.0, 0.50, False)],
    "spectrum": [("rho", 0.3, 0.9, 0.1, 0.0, 0.9, False)],
    "bsr": [("b", 1, 9, 1, 1, 9, True), ("r", 20, 160, 20, 0, 160, False)],
}
KINDS = tuple(PARAMETERS)


def grid(kind, slot=0):
    """Search grid of one parameter slot, as listed in ``PARAMETERS``."""
    _, start, stop, step = PARAMETERS[kind][slot][:4]
    count = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 10) for k in range(count)]


def _grid_text(kind, slot):
    name, start, stop, step = PARAMETERS[kind][slot][:4]
    return f"{name} grid {start}..{stop} step {step}"


@dataclass(eq=False)
class TransformSpec:
    """Transformation kind plus magnitude vector ``z``.

    ``reference_pool`` (with optional ``reference_labels``) supplies the mixing
    partners for ``admix``.
    """

    kind: str
    z: tuple = ()
    reference_pool: np.ndarray = None
    reference_labels: np.ndarray = None

    def __post_init__(self):
        if self.kind not in PARAMETERS:
            raise ConfigError(f"unknown transform kind {self.kind!r}; choose from {', '.join(KINDS)}")
        z = self.z
        if np.isscalar(z):
            z = (z,)
        self.z = tuple(float(v) for v in z)
        slots = PARAMETERS[self.kind]
        if len(self.z) != len(slots):
            raise ConfigError(f"{self.kind} takes {len(slots)} parameter(s), got {len(self.z)}")
        for k, (value, slot) in enumerate(zip(self.z, slots)):
            name, lo, hi, integral = slot[0], slot[4], slot[5], slot[6]
            if not math.isfinite(value) or value < lo - 1e-12 or value > hi + 1e-12:
                raise ConfigError(
                    f"{self.kind}.{name}={value} outside legal range [{lo}, {hi}] ({_grid_text(self.kind, k)})"
                )
            if integral and value != int(value):
                raise ConfigError(f"{self.kind}.{name} must be an integer ({_grid_text(self.kind, k)}), got {value}")
        if self.kind == "admix":
            if self.reference_pool is None or len(self.reference_pool) == 0:
                raise ConfigError("admix needs a non-empty reference_pool")
            self.reference_pool = np.asarray(self.reference_pool, dtype=np.float64)
            if self.reference_labels is not None:
                self.reference_labels = np.asarray(self.reference_labels, dtype=np.int64)
                if len(self.reference_labels) != len(self.reference_pool):
                    raise ConfigError("reference_labels and reference_pool differ in length")

    def with_z(self, z):
        return TransformSpec(self.kind, z, self.reference_pool, self.reference_labels)

    def to_dict(self):
        return {"kind": self.kind, "z": list(self.z)}


@dataclass(eq=False)
class TransformDraw:
    """Concrete random parameters for one batch: ``params`` maps name to array."""

    kind: str
    shape: tuple
    params: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, TransformDraw):
            return NotImplemented
        if (self.kind, tuple(self.shape)) != (other.kind, tuple(other.shape)):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def sample_params(spec, seed, draw_index, shape, labels=None):
    """Draw the random parameters of ``spec`` for a batch of ``shape`` (N, C, H, W).

    A pure function of ``(spec, seed, draw_index, shape, labels)``.  ``labels``
    restricts admix partners to reference images of another class.
    """
    n, c, h, w = shape
    rng = stream(seed, "transform:" + spec.kind, draw_index)
    z = spec.z
    p = {}
    kind = spec.kind
    if kind == "translation":
        p["offsets"] = rng.uniform(0.0, 1.0, (n, 2)) * z[0]
    elif kind == "block_shuffle":
        cells = (int(z[0]) + 1) ** 2
        p["cuts"] = np.array(int(z[0]))
        p["perm"] = np.stack([rng.permutation(cells) for _ in range(n)]) if n else np.zeros((0, cells), int)
    elif kind == "rotation":
        p["angle"] = rng.uniform(0.0, 1.0, n) * z[0]
    elif kind == "noise":
        p["field"] = rng.uniform(-1.0, 1.0, shape) * z[0]
    elif kind == "resize":
        factor = rng.uniform(z[0], 1.0, n)
        size_h = np.maximum(1, np.round(factor * h)).astype(int)
        size_w = np.maximum(1, np.round(factor * w)).astype(int)
        p["factor"] = factor
        p["top"] = np.floor(rng.uniform(0.0, 1.0, n) * (h - size_h + 1)).astype(int)
        p["left"] = np.floor(rng.uniform(0.0, 1.0, n) * (w - size_w + 1)).astype(int)
    elif kind == "admix":
        pool = spec.reference_pool
        if pool.shape[1:] != (c, h, w):
            raise ConfigError(f"admix reference images {pool.shape[1:]} do not match batch {(c, h, w)}")
        idx = np.empty(n, dtype=int)
        u = rng.uniform(0.0, 1.0, n)
        for i in range(n):
            allowed = np.arange(len(pool))
            if labels is not None and spec.reference_labels is not None:
                others = allowed[spec.reference_labels != labels[i]]
                if len(others):
                    allowed = others
            idx[i] = allowed[min(int(u[i] * len(allowed)), len(allowed) - 1)]
        p["partner"] = idx
        p["eta"] = np.array(z[0])
        p["mix"] = pool[idx]
    elif kind == "spectrum":
        p["xi"] = rng.normal(0.0, SPECTRUM_SIGMA, shape)
        p["mask"] = 1.0 + z[0] * rng.uniform(-1.0, 1.0, shape)
    elif kind == "bsr":
        b, r = int(z[0]), z[1]
        p["blocks"] = np.array(b)
        p["perm"] = np.stack([rng.permutation(b * b) for _ in range(n)]) if n else np.zeros((0, b * b), int)
        p["angle"] = rng.uniform(-1.0, 1.0, (n, b * b)) * r
    return TransformDraw(kind, tuple(shape), p)


# -- resampling maps ---------------------------------------------------------
# A map gives, for every output pixel, four source pixel indices and bilinear
# weights; taps outside the image (or outside an allowed region) get weight 0.


def _bilinear(sy, sx, h, w, region=None):
    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = sy - y0, sx - x0
    y0, x0 = y0.astype(np.int64), x0.astype(np.int64)
    taps = ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx))
    idx, wts = [], []
    for dy, dx, wt in taps:
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        if region is not None:
            top, left, bottom, right = region
            ok &= (yy >= top) & (yy <= bottom) & (xx >= left) & (xx <= right)
        idx.append(np.where(ok, yy * w + xx, 0))
        wts.append(np.where(ok, wt, 0.0))
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def _pixel_grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy.ravel().astype(np.float64), xx.ravel().astype(np.float64)


def _rotate_coords(y, x, cy, cx, degrees):
    # inverse rotation: where does output (y, x) come from
    t = np.deg2rad(degrees)
    cos, sin = np.cos(t), np.sin(t)
    dy, dx = y - cy, x - cx
    return cy + cos * dy - sin * dx, cx + sin * dy + cos * dx


def _cell_layout(h, w, per_axis):
    ch, cw = h // per_axis, w // per_axis
    if ch < 1 or cw < 1:
        raise ConfigError(f"cannot split a {h}x{w} image into {per_axis}x{per_axis} cells")
    return ch, cw


def _shuffle_map(perm, per_axis, h, w, angles=None):
    """Cell permutation (and optional per-cell rotation) as a resampling map."""
    ch, cw = _cell_layout(h, w, per_axis)
    y, x = _pixel_grid(h, w)
    iy, ix = (y // ch).astype(int), (x // cw).astype(int)
    inside = (iy < per_axis) & (ix < per_axis)
    iy, ix = np.minimum(iy, per_axis - 1), np.minimum(ix, per_axis - 1)
    cell = iy * per_axis + ix
    idx_all, wts_all = [], []
    for b in range(len(perm)):
        src = perm[b][cell]
        sy0, sx0 = (src // per_axis) * ch, (src % per_axis) * cw
        ly, lx = y - iy * ch, x - ix * cw
        if angles is None:
            sy, sx = sy0 + ly, sx0 + lx
            region = None
        else:
            cy, cx = (ch - 1) / 2, (cw - 1) / 2
            ry, rx = _rotate_coords(ly, lx, cy, cx, angles[b][cell])
            sy, sx = sy0 + ry, sx0 + rx
            region = (sy0, sx0, sy0 + ch - 1, sx0 + cw - 1)
        sy, sx = np.where(inside, sy, y), np.where(inside, sx, x)
        if region is not None:
            region = tuple(np.where(inside, r, e) for r, e in zip(region, (0, 0, h - 1, w - 1)))
        idx, wts = _bilinear(sy, sx, h, w, region)
        idx_all.append(idx)
        wts_all.append(wts)
    return np.stack(idx_all), np.stack(wts_all)


def _resample_map(draw):
    n, _, h, w = draw.shape
    p = draw.params
    y, x = _pixel_grid(h, w)
    if draw.kind == "translation":
        sy = y[None] - p["offsets"][:, 0:1] * h / TRANSLATION_REFERENCE_SIZE
        sx = x[None] - p["offsets"][:, 1:2] * w / TRANSLATION_REFERENCE_SIZE
        return _bilinear(sy, sx, h, w)
    if draw.kind == "rotation":
        sy, sx = _rotate_coords(y[None], x[None], (h - 1) / 2, (w - 1) / 2, p["angle"][:, None])
        return _bilinear(sy, sx, h, w)
    if draw.kind == "resize":
        idx_all, wts_all = [], []
        for b in range(n):
            sh = max(1, int(round(p["factor"][b] * h)))
            sw = max(1, int(round(p["factor"][b] * w)))
            top, left = p["top"][b], p["left"][b]
            inside = (y >= top) & (y < top + sh) & (x >= left) & (x < left + sw)
            sy = np.clip((y - top + 0.5) * h / sh - 0.5, 0, h - 1)
            sx = np.clip((x - left + 0.5) * w / sw - 0.5, 0, w - 1)
            # out-of-placement pixels sample far outside the image -> zero fill
            idx, wts = _bilinear(np.where(inside, sy, -10.0), np.where(inside, sx, -10.0), h, w)
            idx_all.append(idx)
            wts_all.append(wts)
        return np.stack(idx_all), np.stack(wts_all)
    if draw.kind == "block_shuffle":
        return _shuffle_map(p["perm"], int(p["cuts"]) + 1, h, w)
    if draw.kind == "bsr":
        return _shuffle_map(p["perm"], int(p["blocks"]), h, w, p["angle"])
    raise AssertionError(draw.kind)


def _gather(x, idx, wts):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w).transpose(0, 2, 1)
    rows = np.arange(n)[:, None]
    out = wts[..., 0, None] * flat[rows, idx[..., 0]]
    for k in range(1, 4):
        out = out + wts[..., k, None] * flat[rows, idx[..., k]]
    return out.transpose(0, 2, 1).reshape(n, c, h, w)


def _scatter(g, idx, wts):
    n, c, h, w = g.shape
    hw = h * w
    gflat = g.reshape(n, c, hw)
    target = (np.arange(n)[:, None, None] * hw + idx).reshape(-1)
    out = np.empty((n, c, hw))
    for ch in range(c):
        contrib = (gflat[:, ch, :, None] * wts).reshape(-1)
        out[:, ch] = np.bincount(target, weights=contrib, minlength=n * hw).reshape(n, hw)
    return out.reshape(n, c, h, w)


GEOMETRIC = ("translation", "rotation", "resize", "block_shuffle", "bsr")


def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], (lambda a: a[0, 0])
    if x.ndim == 3:
        return x[None], (lambda a: a[0])
    if x.ndim == 4:
        return x, (lambda a: a)
    raise ConfigError(f"expected an image or NCHW batch, got shape {x.shape}")


def transform_vjp(images, draw):
    """Apply ``draw`` to an NCHW batch; return ``(output, vjp)``.

    ``vjp(g)`` maps a gradient on the output to the gradient on ``images``.
    """
    x = np.asarray(images, dtype=np.float64)
    if tuple(x.shape) != tuple(draw.shape):
        raise ConfigError(f"draw was sampled for shape {draw.shape}, batch has {x.shape}")
    kind, p = draw.kind, draw.params
    if kind == "identity":
        return x.copy(), (lambda g: g)
    if kind in GEOMETRIC:
        idx, wts = _resample_map(draw)
        pre = _gather(x, idx, wts)
        linear_t = lambda g: _scatter(g, idx, wts)  # noqa: E731
    elif kind == "noise":
        pre = x + p["field"]
        linear_t = lambda g: g  # noqa: E731
    elif kind == "admix":
        pre = x + p["eta"] * p["mix"]
        linear_t = lambda g: g  # noqa: E731
    elif kind == "spectrum":
        pre = idct2(dct2(x + p["xi"]) * p["mask"])
        # orthonormal DCT: the adjoint of idct2(M * dct2(.)) is the same map
        linear_t = lambda g: idct2(dct2(g) * p["mask"])  # noqa: E731
    else:
        raise AssertionError(kind)
    out = np.clip(pre, 0.0, 1.0)
    passthrough = (pre >= 0.0) & (pre <= 1.0)

    def vjp(g):
        return linear_t(np.where(passthrough, g, 0.0))

    return out, vjp


def apply_transform(image, draw):
    """Apply a sampled draw to an image (HW, CHW) or NCHW batch; output in [0, 1]."""
    x, unwrap = _as_batch(image)
    out, _ = transform_vjp(x, draw)
    return unwrap(out)
