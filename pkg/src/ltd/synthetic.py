"""Seeded toy real/fake image set.

Real images are smooth composites: a near-gray base colour, a linear colour
gradient, one to three soft-edged discs and faint Gaussian noise.  Fake
images are the same kind of composite with a one-pixel checkerboard added,
the periodic trace left by naive transposed-convolution upsampling.  Its
amplitude and phase are drawn per image.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import LTDIOError, ParameterError
from .imaging import save_image
from .manifest import DatasetManifest, ManifestRecord, write_manifest

BASE_LEVEL = 0.7
CONTENT_SCALE = 0.15
NOISE_STD = 0.01
CHECKER_AMPLITUDE = (0.25, 0.35)


def smooth_composite(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    s = CONTENT_SCALE
    base = BASE_LEVEL + s * rng.uniform(-0.2, 0.2) + s * rng.uniform(-0.05, 0.05, 3)
    gx, gy = s * rng.uniform(-0.3, 0.3, (2, 3))
    img = base + gx * (xx[..., None] - 0.5) + gy * (yy[..., None] - 0.5)
    for _ in range(rng.integers(1, 4)):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.35)
        colour = s * rng.uniform(-0.3, 0.3, 3)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img = img + colour * (1.0 / (1.0 + np.exp((dist - r) / 0.04)))[..., None]
    return img + rng.normal(0.0, NOISE_STD, img.shape)


def checkerboard(rng, size):
    amp = rng.uniform(*CHECKER_AMPLITUDE)
    py, px = rng.integers(0, 2, 2)
    idx = np.arange(size)
    signs = ((idx[:, None] + py + idx[None, :] + px) % 2) * 2.0 - 1.0
    return amp * signs[..., None]


def synth_image(seed, label, index, size):
    """One float image in [0, 1]; depends only on (seed, label, index, size)."""
    rng = np.random.default_rng([seed, label, index])
    img = smooth_composite(rng, size)
    if label == 1:
        img = img + checkerboard(rng, size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_synthetic_dataset(n_per_class, image_size=32, seed=0, out_dir="."):
    """Write 2 * n_per_class PNGs under ``out_dir/images`` and ``out_dir/manifest.jsonl``."""
    if n_per_class < 1:
        raise ParameterError("n_per_class must be at least 1")
    if image_size < 2:
        raise ParameterError("image_size must be at least 2")
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise LTDIOError(f"cannot create {img_dir}: {exc}") from exc
    records = []
    for label, group in ((0, "real"), (1, "checkerboard")):
        for i in range(n_per_class):
            name = f"{'fake' if label else 'real'}_{i:05d}.png"
            save_image(synth_image(seed, label, i, image_size), os.path.join(img_dir, name))
            records.append(ManifestRecord(f"images/{name}", label, group))
    manifest = DatasetManifest(records, os.path.abspath(out_dir), os.path.join(out_dir, "manifest.jsonl"))
    write_manifest(manifest, manifest.source)
    return manifest
