"""Deterministic synthetic labeled scenes and real-image ingestion.

Scenes are colored shapes (rectangles, circles, triangles) over a
low-frequency textured background, with a per-pixel class map rendered
from the same geometry. Shape colors stay inside fixed per-class bands
so a linear probe on good patch features can separate the classes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

log = logging.getLogger(__name__)

# class 0 is background; classes 1..4 have well-separated base colors
DEFAULT_PALETTE = (
    (0.85, 0.2, 0.2),
    (0.2, 0.75, 0.25),
    (0.25, 0.35, 0.85),
    (0.85, 0.8, 0.2),
)


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 96
    n_shapes: tuple[int, int] = (3, 6)  # inclusive range
    min_shape: int = 14
    max_shape: int = 42
    palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    shape_color_jitter: float = 0.04  # per-shape offset within the class band
    pixel_noise: float = 0.04
    background_base: float = 0.5
    background_amplitude: float = 0.18
    # per-scene multiplicative lighting (global brightness x per-channel
    # cast); absolute colors vary scene to scene so a probe has to rely
    # on lighting-robust features rather than raw pixel values
    lighting_range: tuple[float, float] = (0.55, 1.1)
    color_cast: float = 0.12

    @property
    def class_count(self) -> int:
        return len(self.palette) + 1

    def color_band(self, cls: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel [lo, hi] interval containing every pixel of the class."""
        base = np.array(self.palette[cls - 1])
        spread = self.shape_color_jitter
        lo_light = self.lighting_range[0] * (1.0 - self.color_cast)
        hi_light = self.lighting_range[1] * (1.0 + self.color_cast)
        lo = np.clip((base - spread) * lo_light - self.pixel_noise, 0.0, 1.0)
        hi = np.clip((base + spread) * hi_light + self.pixel_noise, 0.0, 1.0)
        return lo, hi

    def __post_init__(self):
        if self.canvas < self.min_shape:
            raise ConfigError(
                f"canvas {self.canvas} smaller than minimum shape size {self.min_shape}"
            )


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # H x W int64 in [0, class_count)
    class_count: int


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    """Low-frequency gray noise: a coarse grid upsampled bilinearly."""
    n = spec.canvas
    coarse = rng.uniform(-1.0, 1.0, size=(5, 5))
    yy, xx = np.meshgrid(np.linspace(0, 4, n), np.linspace(0, 4, n), indexing="ij")
    x0 = np.clip(np.floor(xx).astype(int), 0, 3)
    y0 = np.clip(np.floor(yy).astype(int), 0, 3)
    fx = xx - x0
    fy = yy - y0
    vals = (
        coarse[y0, x0] * (1 - fx) * (1 - fy)
        + coarse[y0, x0 + 1] * fx * (1 - fy)
        + coarse[y0 + 1, x0] * (1 - fx) * fy
        + coarse[y0 + 1, x0 + 1] * fx * fy
    )
    gray = spec.background_base + spec.background_amplitude * vals
    return np.repeat(gray[:, :, None], 3, axis=2)


def _shape_mask(rng: np.random.Generator, spec: SceneSpec, n: int) -> np.ndarray:
    """Boolean mask of one random non-degenerate shape on the canvas."""
    kind = rng.integers(0, 3)
    yy, xx = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    size = int(rng.integers(spec.min_shape, min(spec.max_shape, n) + 1))
    cx = float(rng.uniform(size / 2, n - size / 2))
    cy = float(rng.uniform(size / 2, n - size / 2))
    if kind == 0:  # rectangle
        w = size
        h = int(rng.integers(spec.min_shape, min(spec.max_shape, n) + 1))
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if kind == 1:  # circle
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (size / 2) ** 2
    # triangle: three vertices on the bounding circle, half-plane test;
    # gaps of at least 0.7 rad keep every triangle non-degenerate
    base_angle = rng.uniform(0, 2 * np.pi)
    gaps = rng.uniform(0.7, 2.2, size=2)
    angles = base_angle + np.array([0.0, gaps[0], gaps[0] + gaps[1]])
    vx = cx + (size / 2) * np.cos(angles)
    vy = cy + (size / 2) * np.sin(angles)
    mask = np.ones_like(xx, dtype=bool)
    for i in range(3):
        x1, y1 = vx[i], vy[i]
        x2, y2 = vx[(i + 1) % 3], vy[(i + 1) % 3]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        ref = (x2 - x1) * (vy[(i + 2) % 3] - y1) - (y2 - y1) * (vx[(i + 2) % 3] - x1)
        mask &= cross * ref >= 0
    return mask


def generate_synthetic_scene(rng: np.random.Generator, spec: SceneSpec) -> LabeledImage:
    """One scene: later shapes occlude earlier ones; labels follow geometry."""
    n = spec.canvas
    pixels = _background(rng, spec)
    labels = np.zeros((n, n), dtype=np.int64)

    count = int(rng.integers(spec.n_shapes[0], spec.n_shapes[1] + 1))
    for _ in range(count):
        cls = int(rng.integers(1, spec.class_count))
        mask = _shape_mask(rng, spec, n)
        base = np.array(spec.palette[cls - 1])
        color = base + rng.uniform(-spec.shape_color_jitter, spec.shape_color_jitter, size=3)
        pixels[mask] = color
        labels[mask] = cls

    light = rng.uniform(*spec.lighting_range)
    cast = rng.uniform(1.0 - spec.color_cast, 1.0 + spec.color_cast, size=3)
    pixels *= light * cast
    pixels += rng.uniform(-spec.pixel_noise, spec.pixel_noise, size=pixels.shape)
    return LabeledImage(np.clip(pixels, 0.0, 1.0).astype(np.float32), labels, spec.class_count)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-index stream: order of generation never matters."""
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def build_corpus(n: int, seed: int, spec: SceneSpec) -> list[LabeledImage]:
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    return [generate_synthetic_scene(scene_rng(seed, i), spec) for i in range(n)]


def split_by_parity(corpus: list[LabeledImage]) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Even indices train, odd indices eval; stable across runs."""
    return corpus[0::2], corpus[1::2]


def load_image_directory(path: str | Path) -> list[np.ndarray]:
    """Decode every PNG in the directory to float [0,1], sorted by name.

    Unreadable files are skipped with a warning; grayscale images are
    replicated to three channels.
    """
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    images: list[np.ndarray] = []
    skipped = 0
    if not files:
        log.warning("no PNG files found in %s", path)
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except (OSError, UnidentifiedImageError, ValueError) as e:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", f, e)
            continue
        images.append(arr)
    if skipped:
        log.warning("skipped %d unreadable file(s) in %s", skipped, path)
    return images
