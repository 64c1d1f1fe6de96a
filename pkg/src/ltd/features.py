"""Manifest -> per-layer CLS features, optionally fanned out over threads.

Work is split into fixed-size chunks independent of the thread count and the
chunk results are joined in index order, so the number of workers never
changes a single bit of the output.  Each image's augmentation randomness is
seeded from (seed, epoch, manifest index).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backbone import encode_layers
from .errors import ConfigError
from .imaging import apply_degradations, load_image, preprocess, preprocess_sizes

CHUNK = 32


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("LTD_THREADS", "").strip()
        if not env:
            return os.cpu_count() or 1
        try:
            threads = int(env)
        except ValueError as exc:
            raise ConfigError(f"LTD_THREADS must be an integer, got {env!r}") from exc
    if threads < 1:
        raise ConfigError(f"thread count must be at least 1, got {threads}")
    return int(threads)


def image_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, index, 0x1A6])


def model_input(path, weights, degrade=None, train=False, rng=None):
    resize, crop = preprocess_sizes(weights.config.image_size)
    img = apply_degradations(load_image(path), degrade)
    return preprocess(img, train=train, rng=rng, resize=resize, crop=crop)


def _encode_chunk(manifest, indices, weights, degrade, train, seed, epoch):
    batch = np.stack([
        model_input(manifest.resolve(i), weights, degrade, train, image_rng(seed, epoch, i) if train else None)
        for i in indices
    ])
    return encode_layers(batch, weights)


def extract_features(manifest, weights, indices=None, degrade=None, train=False, seed=0, epoch=0,
                     threads=1, chunk=CHUNK):
    """(N, depth, width) float32 features for ``indices`` (default: all records)."""
    indices = list(range(len(manifest))) if indices is None else [int(i) for i in indices]
    if not indices:
        return np.zeros((0, weights.config.depth, weights.config.width), np.float32)
    chunks = [indices[i:i + chunk] for i in range(0, len(indices), chunk)]
    work = lambda idx: _encode_chunk(manifest, idx, weights, degrade, train, seed, epoch)  # noqa: E731
    threads = resolve_threads(threads)
    if threads == 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
            parts = list(pool.map(work, chunks))
    return np.concatenate(parts, axis=0)
