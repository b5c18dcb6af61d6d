"""View generation: recorded random crops, flips, and color jitter.

Every view remembers the exact randomized draw that produced it
(`AugmentationRecord`), so patch positions can be mapped back into the
original image and across views.

Coordinate conventions used throughout:

* The original image is the continuous unit square; pixel (r, c) of an
  H x W image occupies [c/W, (c+1)/W] x [r/H, (r+1)/H] and its center
  is ((c+0.5)/W, (r+0.5)/H). Crop boxes are (x0, y0, w, h) in these
  normalized coordinates.
* A rendered view samples the original at the crop box: view pixel
  (r, c) reads the original at local coordinates u=(c+0.5)/W_out,
  v=(r+0.5)/H_out, flipped to 1-u when hflip is set, then mapped to
  x = x0 + u*w, y = y0 + v*h. Sampling-side flipping is exactly the
  column reversal of the resized crop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import ConfigError

Role = Literal["reference", "query"]

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class AugmentationRecord:
    """One randomized augmentation draw, sufficient to replay the view."""

    crop_box: tuple[float, float, float, float]  # x0, y0, w, h in [0,1] of the original
    hflip: bool
    jitter: tuple[float, float, float, float]  # brightness, contrast, saturation mult; hue offset
    out_size: tuple[int, int]  # H, W in pixels

    def __post_init__(self):
        x0, y0, w, h = self.crop_box
        if w <= 0 or h <= 0:
            raise ConfigError(f"crop box must have positive area, got {self.crop_box}")
        if x0 < -1e-9 or y0 < -1e-9 or x0 + w > 1 + 1e-9 or y0 + h > 1 + 1e-9:
            raise ConfigError(f"crop box {self.crop_box} outside the unit square")


IDENTITY_JITTER = (1.0, 1.0, 1.0, 0.0)


def identity_record(out_size: tuple[int, int]) -> AugmentationRecord:
    return AugmentationRecord((0.0, 0.0, 1.0, 1.0), False, IDENTITY_JITTER, out_size)


@dataclass
class View:
    """A rendered view plus its token bookkeeping."""

    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    record: AugmentationRecord
    patch_size: int
    kept_tokens: np.ndarray  # sorted unique token indices into the row-major grid

    @property
    def grid(self) -> tuple[int, int]:
        h, w, _ = self.pixels.shape
        return h // self.patch_size, w // self.patch_size

    @property
    def n_tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling law for view records."""

    ref_size: tuple[int, int]
    query_size: tuple[int, int]
    ref_scale: tuple[float, float] = (0.3, 1.0)
    query_scale: tuple[float, float] = (0.05, 0.3)
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)

    def scale_for(self, role: Role) -> tuple[float, float]:
        return self.ref_scale if role == "reference" else self.query_scale

    def size_for(self, role: Role) -> tuple[int, int]:
        return self.ref_size if role == "reference" else self.query_size


def sample_view_record(role: Role, rng: np.random.Generator, cfg: AugmentConfig) -> AugmentationRecord:
    """Draw one crop/flip/jitter record for the given role.

    Crop area fraction is uniform in the role's scale range and the
    aspect ratio log-uniform in ``aspect_range``; draws whose box does
    not fit the unit square are resampled.
    """
    lo, hi = cfg.scale_for(role)
    if not (0 < lo <= hi <= 1):
        raise ConfigError(f"empty or invalid scale range for {role}: ({lo}, {hi})")
    a_lo, a_hi = cfg.aspect_range
    if not (0 < a_lo <= a_hi):
        raise ConfigError(f"invalid aspect range ({a_lo}, {a_hi})")

    area = rng.uniform(lo, hi)
    # clip the drawn aspect so the box always fits the unit square; this
    # keeps the area marginal exactly uniform over the configured range
    # (an aspect of 1 fits whenever area <= 1)
    log_aspect = rng.uniform(np.log(a_lo), np.log(a_hi))
    log_aspect = float(np.clip(log_aspect, np.log(area), -np.log(area)))
    aspect = float(np.exp(log_aspect))
    w = float(np.sqrt(area * aspect))
    h = float(np.sqrt(area / aspect))
    x0 = float(rng.uniform(0.0, 1.0 - w))
    y0 = float(rng.uniform(0.0, 1.0 - h))

    hflip = bool(rng.uniform() < cfg.hflip_prob)

    if rng.uniform() < cfg.jitter_prob:
        b, c, s, hmax = cfg.jitter_strength
        jitter = (
            float(rng.uniform(1.0 - b, 1.0 + b)),
            float(rng.uniform(1.0 - c, 1.0 + c)),
            float(rng.uniform(1.0 - s, 1.0 + s)),
            float(rng.uniform(-hmax, hmax)),
        )
    else:
        jitter = IDENTITY_JITTER

    return AugmentationRecord((x0, y0, w, h), hflip, jitter, cfg.size_for(role))


def _bilinear_sample(image: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample image (H,W,3) at continuous pixel-center coords, edge-clamped."""
    h, w, _ = image.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    # hue sector selection; delta==0 pixels are gray and get hue 0
    safe = np.maximum(delta, 1e-12)
    hr = ((g - b) / safe) % 6.0
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    hue = np.where(maxc == r, hr, np.where(maxc == g, hg, hb))
    hue = np.where(delta > 0, hue / 6.0, 0.0)
    return np.stack([hue, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = (i.astype(np.int64) % 6)[..., None]
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    return np.select([i == k for k in range(6)], choices)


def apply_jitter(pixels: np.ndarray, jitter: tuple[float, float, float, float]) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in that fixed order."""
    b, c, s, hue = jitter
    out = pixels.astype(np.float64)
    if b != 1.0:
        out = np.clip(out * b, 0.0, 1.0)
    if c != 1.0:
        mean = float((out * _LUMA).sum(axis=-1).mean())
        out = np.clip((out - mean) * c + mean, 0.0, 1.0)
    if s != 1.0:
        luma = (out * _LUMA).sum(axis=-1, keepdims=True)
        out = np.clip((out - luma) * s + luma, 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def render_view(image: np.ndarray, record: AugmentationRecord, patch_size: int) -> View:
    """Crop + bilinear resize + flip + jitter, all driven by the record."""
    out_h, out_w = record.out_size
    if out_h % patch_size or out_w % patch_size:
        raise ConfigError(
            f"view size {record.out_size} not divisible by patch size {patch_size}"
        )
    x0, y0, w, h = record.crop_box
    src_h, src_w, _ = image.shape

    u = (np.arange(out_w) + 0.5) / out_w
    v = (np.arange(out_h) + 0.5) / out_h
    if record.hflip:
        u = 1.0 - u
    x = x0 + u * w
    y = y0 + v * h
    px = x * src_w - 0.5
    py = y * src_h - 0.5
    pixels = _bilinear_sample(image.astype(np.float64), *np.meshgrid(px, py))
    pixels = apply_jitter(np.clip(pixels, 0.0, 1.0), record.jitter)

    rows, cols = out_h // patch_size, out_w // patch_size
    kept = np.arange(rows * cols, dtype=np.int64)
    return View(pixels.astype(np.float32), record, patch_size, kept)


def patchify(view: View) -> np.ndarray:
    """Pixel boxes (x0, y0, x1, y1) of all tokens, row-major over the grid."""
    rows, cols = view.grid
    p = view.patch_size
    boxes = np.empty((rows * cols, 4), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            boxes[i * cols + j] = (j * p, i * p, (j + 1) * p, (i + 1) * p)
    return boxes


def token_vectors(view: View) -> np.ndarray:
    """Flattened P*P*3 pixel vectors of the kept tokens, in kept order."""
    rows, cols = view.grid
    p = view.patch_size
    out = np.empty((len(view.kept_tokens), p * p * 3), dtype=np.float32)
    for n, tok in enumerate(view.kept_tokens):
        i, j = divmod(int(tok), cols)
        out[n] = view.pixels[i * p : (i + 1) * p, j * p : (j + 1) * p].reshape(-1)
    return out


def drop_query_tokens(
    view: View,
    mode: Literal["random", "focal"],
    keep_ratio: float,
    rng: np.random.Generator,
) -> View:
    """Restrict a query view to a subset of its tokens.

    ``random`` keeps a uniform subset of ceil(keep_ratio * N) tokens;
    ``focal`` keeps a contiguous square block of side
    round(sqrt(keep_ratio * N)) centered at a uniformly drawn anchor.
    """
    if keep_ratio <= 0 or keep_ratio > 1:
        raise ConfigError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if keep_ratio == 1.0:
        return view
    rows, cols = view.grid
    n = view.n_tokens
    if mode == "random":
        k = int(np.ceil(keep_ratio * n))
        if k == 0:
            raise ConfigError("keep_ratio keeps zero tokens")
        kept = np.sort(rng.choice(view.kept_tokens, size=k, replace=False))
    elif mode == "focal":
        side = int(np.clip(round(np.sqrt(keep_ratio * n)), 1, min(rows, cols)))
        ar = int(rng.integers(0, rows))
        ac = int(rng.integers(0, cols))
        top = int(np.clip(ar - side // 2, 0, rows - side))
        left = int(np.clip(ac - side // 2, 0, cols - side))
        kept = np.sort(
            np.array(
                [(top + i) * cols + (left + j) for i in range(side) for j in range(side)],
                dtype=np.int64,
            )
        )
    else:
        raise ConfigError(f"unknown token-dropping mode {mode!r}")
    return replace(view, kept_tokens=kept)


# ---------------------------------------------------------------------------
# invertible coordinate mapping


def view_box_to_original(record: AugmentationRecord, box_px: np.ndarray) -> np.ndarray:
    """Map axis-aligned pixel boxes in view space to original-image rects.

    boxes are (..., 4) as (x0, y0, x1, y1); output uses the same layout
    in normalized original coordinates. Horizontal flip reverses the x
    interval before the affine crop mapping.
    """
    box = np.asarray(box_px, dtype=np.float64)
    out_h, out_w = record.out_size
    u0 = box[..., 0] / out_w
    u1 = box[..., 2] / out_w
    v0 = box[..., 1] / out_h
    v1 = box[..., 3] / out_h
    if record.hflip:
        u0, u1 = 1.0 - u1, 1.0 - u0
    x0c, y0c, w, h = record.crop_box
    return np.stack(
        [x0c + u0 * w, y0c + v0 * h, x0c + u1 * w, y0c + v1 * h], axis=-1
    )


def view_point_to_original(record: AugmentationRecord, xy_px: np.ndarray) -> np.ndarray:
    """Map view pixel points (..., 2) to normalized original coordinates."""
    pt = np.asarray(xy_px, dtype=np.float64)
    out_h, out_w = record.out_size
    u = pt[..., 0] / out_w
    v = pt[..., 1] / out_h
    if record.hflip:
        u = 1.0 - u
    x0c, y0c, w, h = record.crop_box
    return np.stack([x0c + u * w, y0c + v * h], axis=-1)


def original_point_to_view(record: AugmentationRecord, xy: np.ndarray) -> np.ndarray:
    """Inverse of view_point_to_original; output in view pixel coordinates."""
    pt = np.asarray(xy, dtype=np.float64)
    x0c, y0c, w, h = record.crop_box
    u = (pt[..., 0] - x0c) / w
    v = (pt[..., 1] - y0c) / h
    if record.hflip:
        u = 1.0 - u
    out_h, out_w = record.out_size
    return np.stack([u * out_w, v * out_h], axis=-1)
