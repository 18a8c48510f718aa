"""Synthetic multi-object scenes, dataset I/O and the frozen patch encoder."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin
from torch import nn

from .slotcore import ConfigurationError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("flat", "gradient", "texture")
TEXTURE_AMPLITUDE = 0.15


class GenerationError(RuntimeError):
    pass


class DatasetError(OSError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    object_count_range: tuple = (2, 4)
    shapes: tuple = SHAPES
    # objects are drawn with radius in this range, as a fraction of image size
    size_range: tuple = (0.2, 0.3)
    color_jitter: float = 0.04
    background: str = "texture"
    seed: int = 0
    patch_size: int = 4

    def __post_init__(self):
        lo, hi = self.object_count_range
        if not 1 <= lo <= hi <= 8:
            raise ConfigurationError(f"object_count_range must lie in [1, 8], got {self.object_count_range}")
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be a multiple of the encoder patch size")
        if self.background not in BACKGROUNDS + ("mixed",):
            raise ConfigurationError(f"unknown background mode {self.background!r}")
        if not set(self.shapes) <= set(SHAPES) or not self.shapes:
            raise ConfigurationError(f"shapes must be a non-empty subset of {SHAPES}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("object_count_range", "shapes", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneSample:
    image: np.ndarray        # [H, W, 3] float in [0, 1]
    instance_mask: np.ndarray  # [H, W] uint8, 0 = background
    category_mask: np.ndarray  # [H, W] uint8, 0 = background, 1 + shape index
    metadata: dict = field(default_factory=dict)

    @property
    def fgbg_mask(self):
        return (self.instance_mask > 0).astype(np.uint8)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _background(mode, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / size
    if mode == "flat":
        return np.broadcast_to(rng.uniform(0.2, 0.8, 3), (size, size, 3)).copy()
    if mode == "gradient":
        a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / (np.ptp(t) + 1e-12)
        return a + (b - a) * t[..., None]
    # procedural texture: low-saturation base with fine high-frequency gratings and pixel noise,
    # so no patch-scale region of the background is systematically brighter than another
    base = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, 3)
    tex = np.zeros((size, size))
    for _ in range(2):
        freq = rng.uniform(0.3, 0.45) * size
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    tex = tex / 2 + rng.standard_normal((size, size))
    return np.clip(base + TEXTURE_AMPLITUDE * tex[..., None], 0, 1)


def _shape_mask(shape, cy, cx, r, size, angle):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "square":
        half = r / math.sqrt(2) * 1.15
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    # equilateral triangle inscribed in radius r
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        a = angle + np.pi / 2 + 2 * np.pi * k / 3
        inside &= (np.cos(a) * dx + np.sin(a) * dy) <= r / 2
    return inside


def generate_scene(config, index, max_retries=100):
    """Render scene ``index`` of the stream defined by ``config``; pure in (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    mode = config.background
    if mode == "mixed":
        mode = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    image = _background(mode, size, rng)
    lo, hi = config.object_count_range
    n_objects = int(rng.integers(lo, hi + 1))
    min_pixels = math.ceil(0.01 * size * size)

    for _ in range(max_retries):
        labels = np.zeros((size, size), np.uint8)
        categories = np.zeros((size, size), np.uint8)
        objects = []
        for k in range(n_objects):
            shape_idx = int(rng.integers(len(config.shapes)))
            shape = config.shapes[shape_idx]
            r = rng.uniform(*config.size_range) * size
            cy, cx = rng.uniform(r * 0.6, size - r * 0.6, 2)
            angle = rng.uniform(0, 2 * np.pi)
            hue = rng.uniform()
            color = np.clip(_hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)), 0, 1)
            m = _shape_mask(shape, cy, cx, r, size, angle)
            labels[m] = k + 1
            categories[m] = SHAPES.index(shape) + 1
            objects.append(dict(shape=shape, color=color.round(6).tolist(), center=[float(cy), float(cx)],
                                radius=float(r), angle=float(angle)))
        counts = np.bincount(labels.ravel(), minlength=n_objects + 1)
        if (counts[1:] >= min_pixels).all():
            break
    else:
        raise GenerationError(f"could not place {n_objects} visible objects for index {index}")

    for k, obj in enumerate(objects):
        m = labels == k + 1
        jitter = rng.uniform(-config.color_jitter, config.color_jitter, (int(m.sum()), 3))
        image[m] = np.clip(np.asarray(obj["color"]) + jitter, 0, 1)

    meta = dict(seed=config.seed, index=index, background=mode, objects=objects)
    return SceneSample(image.astype(np.float32), labels, categories, meta)


def generate_dataset(config, indices, workers=None):
    """Generate several scenes, optionally in worker processes (``SLOTFORGE_NUM_WORKERS``)."""
    indices = list(indices)
    if workers is None:
        workers = int(os.environ.get("SLOTFORGE_NUM_WORKERS", "1"))
    if workers <= 1 or len(indices) < 2:
        return [generate_scene(config, i) for i in indices]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(generate_scene, [config] * len(indices), indices))


def stack_images(samples):
    return np.stack([s.image for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directory I/O
# ---------------------------------------------------------------------------

def _png_info(config_hash):
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text("config_hash", config_hash)
    return info


def save_png(path, array, config_hash=None):
    Image.fromarray(np.ascontiguousarray(array)).save(path, pnginfo=_png_info(config_hash))


def load_png(path):
    with Image.open(path) as im:
        return np.array(im)


def quantize(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_dataset(directory, config, count, config_hash=None, start=0, workers=None):
    """Write ``count`` scenes to ``directory`` as images/, masks/, fgbg/, categories/ PNGs + manifest.json."""
    root = Path(directory)
    for sub in ("images", "masks", "fgbg", "categories"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(config, range(start, start + count), workers)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        save_png(root / "images" / name, quantize(s.image), config_hash)
        save_png(root / "masks" / name, s.instance_mask, config_hash)
        save_png(root / "fgbg" / name, s.fgbg_mask, config_hash)
        save_png(root / "categories" / name, s.category_mask, config_hash)
        entries.append(dict(file=name, **s.metadata))
    manifest = dict(count=count, config=asdict(config), config_hash=config_hash, samples=entries)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return samples


def load_dataset(directory):
    """Load a directory written by :func:`write_dataset`.

    Images come back as float32 in [0, 1] (8-bit quantized); masks bit-exact.
    An empty or missing directory yields an empty list with a warning.
    """
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not root.exists() or not any(root.iterdir()):
        log.warning("dataset directory %s is empty", root)
        return []
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["samples"]
        count = manifest["count"]
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    if count != len(entries):
        raise DatasetError(f"manifest {manifest_path} lists count={count} but {len(entries)} samples")
    images = sorted((root / "images").glob("*.png"))
    if len(images) != count:
        raise DatasetError(f"{root / 'images'} holds {len(images)} files, manifest says {count}")
    samples = []
    for entry in entries:
        name = entry["file"]
        try:
            image = load_png(root / "images" / name).astype(np.float32) / 255.0
            inst = load_png(root / "masks" / name)
            cat = load_png(root / "categories" / name)
        except (OSError, FileNotFoundError) as exc:
            raise DatasetError(f"cannot read sample {name} under {root}: {exc}") from exc
        meta = {k: v for k, v in entry.items() if k != "file"}
        samples.append(SceneSample(image, inst, cat, meta))
    return samples


# ---------------------------------------------------------------------------
# frozen encoder
# ---------------------------------------------------------------------------

def sinusoidal_position_codes(h, w, dim):
    """2D sine/cosine codes ``[h, w, dim]``; half the channels encode rows, half columns."""
    if dim % 4:
        raise ConfigurationError("position code dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys = (np.arange(h) + 0.5)[:, None] * freqs
    xs = (np.arange(w) + 0.5)[:, None] * freqs
    row = np.concatenate([np.sin(ys), np.cos(ys)], axis=1)
    col = np.concatenate([np.sin(xs), np.cos(xs)], axis=1)
    codes = np.concatenate([np.broadcast_to(row[:, None], (h, w, 2 * quarter)),
                            np.broadcast_to(col[None, :], (h, w, 2 * quarter))], axis=-1)
    return torch.tensor(codes, dtype=torch.float32)


class PatchEncoder(nn.Module):
    """Frozen random patch embedding: linear projection of non-overlapping patches plus position codes.

    Pixels are shifted by -0.5 before projection so that features of
    different colors point in different directions rather than sharing a
    large common offset.
    """

    def __init__(self, patch_size=8, dim=64, channels=3, seed=0, position_scale=0.0, bias_scale=0.1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        fan_in = patch_size * patch_size * channels
        self.patch_size = patch_size
        self.dim = dim
        self.position_scale = position_scale
        self.register_buffer("weight", torch.randn(fan_in, dim, generator=gen) * fan_in ** -0.5)
        self.register_buffer("bias", torch.randn(dim, generator=gen) * bias_scale)
        self._codes = {}

    def position_codes(self, h, w):
        if (h, w) not in self._codes:
            self._codes[h, w] = sinusoidal_position_codes(h, w, self.dim) * self.position_scale
        return self._codes[h, w]

    def forward(self, images):
        return encode(images, self)


def encode(images, encoder):
    """Map ``[..., H, W, 3]`` images in [0, 1] to a ``[..., H/p, W/p, D]`` feature map."""
    images = torch.as_tensor(images)
    p = encoder.patch_size
    H, W, C = images.shape[-3:]
    if H % p or W % p:
        raise ConfigurationError(f"image size {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    x = images.to(encoder.weight.dtype) - 0.5
    x = x.reshape(*x.shape[:-3], h, p, w, p, C).movedim(-4, -3)
    x = x.reshape(*x.shape[:-3], p * p * C)
    codes = encoder.position_codes(h, w).to(x.dtype)
    return x @ encoder.weight + encoder.bias + codes
