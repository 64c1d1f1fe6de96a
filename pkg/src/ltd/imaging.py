"""Image decoding, preprocessing and robustness degradations.

Images are float32 arrays of shape (H, W, 3), channel-last, values in [0, 1].
Every function here returns a fresh array clamped to [0, 1].  Resampling
arithmetic runs in float64 and is rounded back to float32 at the end.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import CodecError, DimensionError, LTDIOError, ParameterError


def _finish(arr):
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def check_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionError(f"expected an (H, W, 3) image with H, W >= 1, got {img.shape}")
    return img


def load_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError as exc:
        raise LTDIOError(f"image not found: {path}") from exc
    except OSError as exc:
        raise CodecError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path, **kwargs):
    try:
        Image.fromarray(to_uint8(check_image(img)), mode="RGB").save(path, **kwargs)
    except OSError as exc:
        raise LTDIOError(f"cannot write image {path}: {exc}") from exc


# -- resampling -----------------------------------------------------------

def _axis_weights(n_in, n_out):
    # half-pixel centres, edge clamped (no antialiasing)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img, height, width):
    img = check_image(img)
    if height < 1 or width < 1:
        raise DimensionError(f"cannot resize to {height}x{width}")
    x = img.astype(np.float64)
    lo, hi, fr = _axis_weights(x.shape[0], height)
    x = x[lo] * (1.0 - fr)[:, None, None] + x[hi] * fr[:, None, None]
    lo, hi, fr = _axis_weights(x.shape[1], width)
    x = x[:, lo] * (1.0 - fr)[None, :, None] + x[:, hi] * fr[None, :, None]
    return _finish(x)


def center_crop(img, size):
    h, w = img.shape[:2]
    if size > h or size > w:
        raise DimensionError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size].copy()


def crop_offsets(shape, size, train, rng=None):
    h, w = shape[:2]
    if not train:
        return (h - size) // 2, (w - size) // 2
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def preprocess(image, train=False, rng=None, resize=256, crop=224):
    """Square bilinear resize to ``resize``, then a ``crop`` x ``crop`` crop.

    Eval mode takes the centre crop.  Train mode takes a uniformly random crop
    and flips horizontally with probability 1/2, drawing from ``rng``.
    Channel normalisation is left to the backbone.
    """
    img = check_image(image)
    if crop > resize:
        raise DimensionError(f"crop {crop} exceeds resize {resize}")
    if train and rng is None:
        raise ParameterError("train-mode preprocessing needs a random generator")
    img = resize_bilinear(img, resize, resize)
    top, left = crop_offsets(img.shape, crop, train, rng)
    out = img[top:top + crop, left:left + crop]
    if train and rng.random() < 0.5:
        out = out[:, ::-1]
    return _finish(out)


def preprocess_sizes(image_size):
    """(resize, crop) keeping the 256 -> 224 ratio for a backbone input of ``image_size``."""
    return int(round(image_size * 256 / 224)), image_size


# -- degradations ----------------------------------------------------------

def degrade_jpeg(image, quality):
    """Baseline JPEG round trip at ``quality``; chroma kept at full resolution (4:4:4)."""
    if not (isinstance(quality, (int, np.integer)) and 1 <= quality <= 100):
        raise ParameterError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(check_image(image)), mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise CodecError(f"JPEG round trip failed: {exc}") from exc
    return _finish(out)


def degrade_downsample(image, factor):
    img = check_image(image)
    if not 0.0 < factor <= 1.0:
        raise ParameterError(f"downsample factor must lie in (0, 1], got {factor}")
    h, w = int(np.floor(img.shape[0] * factor)), int(np.floor(img.shape[1] * factor))
    if h < 1 or w < 1:
        raise DimensionError(f"downsampling {img.shape[:2]} by {factor} leaves no pixels")
    if (h, w) == img.shape[:2]:
        return _finish(img)
    return resize_bilinear(img, h, w)


def gaussian_kernel(kernel, sigma):
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"blur kernel must be odd and >= 1, got {kernel}")
    if not sigma > 0:
        raise ParameterError(f"blur sigma must be positive, got {sigma}")
    x = np.arange(kernel) - kernel // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def degrade_blur(image, kernel=3, sigma=0.8):
    """Separable Gaussian blur with mirror ('reflect') borders."""
    img = check_image(image)
    k = gaussian_kernel(kernel, sigma)
    r = kernel // 2
    if r == 0:
        return _finish(img)
    x = img.astype(np.float64)
    pad_h = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="reflect" if x.shape[0] > r else "symmetric")
    x = sum(k[i] * pad_h[i:i + img.shape[0]] for i in range(kernel))
    pad_w = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="reflect" if x.shape[1] > r else "symmetric")
    x = sum(k[i] * pad_w[:, i:i + img.shape[1]] for i in range(kernel))
    return _finish(x)


@dataclass(frozen=True)
class DegradeSpec:
    kind: str
    quality: int = 80
    factor: float = 0.5
    kernel: int = 3
    sigma: float = 0.8

    def __post_init__(self):
        if self.kind not in ("jpeg", "downsample", "blur"):
            raise ParameterError(f"unknown degradation {self.kind!r}")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ParameterError(f"JPEG quality must lie in [1, 100], got {self.quality}")
        if self.kind == "downsample" and not 0.0 < self.factor <= 1.0:
            raise ParameterError(f"downsample factor must lie in (0, 1], got {self.factor}")
        if self.kind == "blur":
            gaussian_kernel(self.kernel, self.sigma)

    def apply(self, image):
        if self.kind == "jpeg":
            return degrade_jpeg(image, self.quality)
        if self.kind == "downsample":
            return degrade_downsample(image, self.factor)
        return degrade_blur(image, self.kernel, self.sigma)

    def to_dict(self):
        if self.kind == "jpeg":
            return {"kind": "jpeg", "quality": self.quality}
        if self.kind == "downsample":
            return {"kind": "downsample", "factor": self.factor}
        return {"kind": "blur", "kernel": self.kernel, "sigma": self.sigma}


def apply_degradations(image, specs):
    out = check_image(image)
    for spec in specs or ():
        out = spec.apply(out)
    return _finish(out)
