"""Synthetic shape-classification data and severity-indexed corruptions.

Images are ``float32 [C, H, W]`` in ``[0, 1]``. Every sample is generated from
its own child seed, so an image depends only on ``(seed, index)``.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import FormatError, read_arrays, write_arrays
from .vit import ConfigError

SHAPES = ("disk", "ring", "square", "frame", "diamond", "triangle", "plus", "cross", "hbar", "vbar")
CORRUPTIONS = ("gaussian_noise", "impulse_noise", "box_blur", "contrast", "brightness", "pixelate")
CATEGORY = {
    "gaussian_noise": "noise",
    "impulse_noise": "noise",
    "box_blur": "blur",
    "brightness": "weather",
    "contrast": "digital",
    "pixelate": "digital",
}
_SUPERSAMPLE = 2


def severity_table() -> dict:
    text = resources.files("etta").joinpath("severity.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


@dataclass(frozen=True)
class SampleSpec:
    class_id: int
    cx: float
    cy: float
    scale: float
    angle: float
    hue: float
    seed: int

    @property
    def kind(self) -> str:
        return SHAPES[self.class_id]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.kind!r}; choose from {CORRUPTIONS}")
        if not 1 <= self.severity <= 5:
            raise ConfigError("severity must be in 1..5")

    @property
    def value(self) -> float:
        return severity_table()[self.kind]["values"][self.severity - 1]


# -----------------------------------------------------------------------------
# rendering
# -----------------------------------------------------------------------------


def _mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "ring":
        rr = np.sqrt(u * u + v * v)
        return (rr >= 0.55) & (rr <= 1.0)
    if kind == "square":
        return np.maximum(au, av) <= 0.8
    if kind == "frame":
        m = np.maximum(au, av)
        return (m >= 0.5) & (m <= 0.9)
    if kind == "diamond":
        return au + av <= 1.1
    if kind == "triangle":
        return (v <= 0.75) & (au <= 0.6 * (v + 0.95))
    if kind == "plus":
        return ((au <= 0.28) & (av <= 1.0)) | ((av <= 0.28) & (au <= 1.0))
    if kind == "cross":
        s = np.sqrt(0.5)
        return _mask("plus", s * (u - v), s * (u + v))
    if kind == "hbar":
        return (av <= 0.3) & (au <= 1.0)
    if kind == "vbar":
        return (au <= 0.3) & (av <= 1.0)
    raise ConfigError(f"unknown shape {kind!r}")


def sample_spec(class_id: int, image_size: int, rng: np.random.Generator, seed: int = 0) -> SampleSpec:
    scale = rng.uniform(0.18, 0.3) * image_size
    margin = scale + 1
    return SampleSpec(
        class_id=class_id,
        cx=rng.uniform(margin, image_size - margin),
        cy=rng.uniform(margin, image_size - margin),
        scale=scale,
        angle=rng.uniform(-np.pi / 12, np.pi / 12),
        hue=rng.uniform(0, 1),
        seed=seed,
    )


def render(spec: SampleSpec, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Anti-aliased shape on a tinted, gently shaded, noisy background."""
    rng = np.random.default_rng(spec.seed)
    n = image_size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - spec.cx) / spec.scale, (yy - spec.cy) / spec.scale
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    cover = _mask(spec.kind, u, v).astype(np.float64)
    cover = cover.reshape(image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE).mean(axis=(1, 3))

    fg = np.array(colorsys.hsv_to_rgb(spec.hue, rng.uniform(0.5, 1.0), rng.uniform(0.65, 1.0)))
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.6), rng.uniform(0.05, 0.4)))
    ramp = np.linspace(-1, 1, image_size)
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    shade = gx * ramp[None, :] + gy * ramp[:, None]
    img = bg[:, None, None] + shade[None] + cover[None] * (fg - bg)[:, None, None]
    img = img + rng.normal(0, 0.02, size=img.shape)
    if channels == 1:
        img = img.mean(axis=0, keepdims=True)
    elif channels != 3:
        raise ConfigError("only 1 or 3 channels are supported")
    return np.clip(img, 0, 1).astype(np.float32)


# second seed word separating the datasets drawn from one experiment seed
TRAIN, TEST, SOURCE, STREAM, HELDOUT = range(5)


def gen_dataset(num_per_class: int, image_size: int = 32, channels: int = 3, seed: int | tuple = 0,
                num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Balanced, shuffled dataset: ``(images [n, C, H, W] float32, labels [n] int64)``.

    ``seed`` may be an int or a tuple of ints (e.g. ``(seed, TEST)``).
    """
    if not 1 <= num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes must lie in 1..{len(SHAPES)}")
    n = num_per_class * num_classes
    root = np.random.SeedSequence(list(seed) if isinstance(seed, tuple) else seed)
    order = np.random.default_rng(root.spawn(1)[0]).permutation(n)
    labels = (np.arange(n) % num_classes)[order].astype(np.int64)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        spec = sample_spec(int(labels[i]), image_size, rng, seed=int(rng.integers(2**63)))
        images[i] = render(spec, image_size, channels)
    return images, labels


# -----------------------------------------------------------------------------
# corruptions
# -----------------------------------------------------------------------------


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return img.copy()
    return img + rng.normal(0, sigma, size=img.shape)


def impulse_noise(img: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    hit = rng.random(img.shape) < amount
    salt = rng.random(img.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def box_blur(img: np.ndarray, kernel: int) -> np.ndarray:
    k = int(kernel)
    if k <= 1:
        return img.copy()
    lo, hi = k // 2, (k - 1) // 2
    padded = np.pad(img, ((0, 0), (lo, hi), (lo, hi)), mode="reflect")
    return sliding_window_view(padded, (k, k), axis=(1, 2)).mean(axis=(-1, -2))


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img.copy()
    mean = img.mean()
    return (img - mean) * factor + mean


def brightness(img: np.ndarray, shift: float) -> np.ndarray:
    return img + shift


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Nearest-neighbour down-sample (block centre pixel) then block up-sample."""
    b = int(block)
    h, w = img.shape[-2:]
    rows = np.minimum((np.arange(h) // b) * b + b // 2, h - 1)
    cols = np.minimum((np.arange(w) // b) * b + b // 2, w - 1)
    return img[:, rows][:, :, cols]


def corrupt(img: np.ndarray, spec: CorruptionSpec, value: float | None = None) -> np.ndarray:
    """Apply ``spec`` to one ``[C, H, W]`` image; ``value`` overrides the severity table."""
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image must lie in [0, 1]")
    v = spec.value if value is None else value
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_noise":
        out = gaussian_noise(img, v, rng)
    elif spec.kind == "impulse_noise":
        out = impulse_noise(img, v, rng)
    elif spec.kind == "box_blur":
        out = box_blur(img, v)
    elif spec.kind == "contrast":
        out = contrast(img, v)
    elif spec.kind == "brightness":
        out = brightness(img, v)
    else:
        out = pixelate(img, v)
    return np.clip(out, 0, 1).astype(np.float32)


def corrupt_batch(images: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    seeds = np.random.SeedSequence([seed, CORRUPTIONS.index(kind), severity]).generate_state(len(images), np.uint64)
    return np.stack([corrupt(img, CorruptionSpec(kind, severity, int(s))) for img, s in zip(images, seeds)])


# -----------------------------------------------------------------------------
# files
# -----------------------------------------------------------------------------


def export_dataset(path, images: np.ndarray, labels: np.ndarray, meta: dict | None = None) -> None:
    write_arrays(path, {"images": images, "labels": labels.astype(np.int64)}, "dataset", meta)


def ingest_raw(path, image_size: int = 32, channels: int = 3, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Load and validate a dataset container with ``images`` and ``labels`` entries."""
    _, arrays = read_arrays(path, "dataset")
    if set(arrays) != {"images", "labels"}:
        raise FormatError(f"{path}: expected arrays 'images' and 'labels', found {sorted(arrays)}")
    images, labels = arrays["images"], arrays["labels"]
    if images.ndim != 4 or images.shape[1:] != (channels, image_size, image_size):
        raise FormatError(f"{path}: images {images.shape} do not match ({channels}, {image_size}, {image_size})")
    if labels.shape != (images.shape[0],):
        raise FormatError(f"{path}: {labels.shape} labels for {images.shape[0]} images")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"{path}: labels outside [0, {num_classes})")
    if not np.isfinite(images).all():
        raise FormatError(f"{path}: non-finite pixels")
    return images.astype(np.float32), labels


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) of a ``[3, H, W]`` image in ``[0, 1]``."""
    c, h, w = image.shape
    if c != 3:
        image = np.repeat(image[:1], 3, axis=0)
    pix = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())
