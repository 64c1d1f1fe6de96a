"""Frozen ViT image encoder that reports the CLS token after every layer."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .archive import read_archive, write_archive
from .errors import ArchiveError, ConfigError, DimensionError, MissingTensorError, ShapeMismatchError
from .nn import block_forward, block_param_count, block_shapes, constant, init_block, trunc_normal


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 28
    patch_size: int = 7
    depth: int = 8
    width: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    activation: str = "gelu"
    ln_pre: bool = False
    patch_bias: bool = True
    ln_eps: float = 1e-5

    @classmethod
    def toy(cls):
        return cls()

    @classmethod
    def clip_vit_l14(cls):
        # CLIP ViT-L/14 vision tower layout.
        return cls(image_size=224, patch_size=14, depth=24, width=1024, heads=16,
                   activation="quick_gelu", ln_pre=True, patch_bias=False)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def mlp_hidden(self):
        return int(round(self.mlp_ratio * self.width))

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid ** 2 + 1

    def validate(self):
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 2:
            raise ConfigError("backbone needs at least two layers")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_ratio too small")
        if self.activation not in ag.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        return self


DEFAULT_NORM = {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]}


def expected_shapes(config):
    """Name -> shape table fully determined by ``config`` (insertion order = archive order)."""
    d = config.width
    shapes = {"patch_embed.weight": (config.patch_size ** 2 * 3, d)}
    if config.patch_bias:
        shapes["patch_embed.bias"] = (d,)
    shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (config.num_tokens, d)
    if config.ln_pre:
        shapes["ln_pre.weight"] = (d,)
        shapes["ln_pre.bias"] = (d,)
    for i in range(config.depth):
        for name, shape in block_shapes(d, config.mlp_hidden).items():
            shapes[f"blocks.{i}.{name}"] = shape
    return shapes


def parameter_count(config):
    d, p = config.width, config.patch_size
    n = 3 * p * p * d + d + config.num_tokens * d
    n += d if config.patch_bias else 0
    n += 2 * d if config.ln_pre else 0
    return n + config.depth * block_param_count(d, config.mlp_hidden)


class BackboneWeights:
    """Immutable weight set; arrays are flagged read-only on construction."""

    frozen = True

    def __init__(self, config, tensors, norm=None):
        self.config = config.validate()
        self.norm = {k: [float(x) for x in v] for k, v in (norm or DEFAULT_NORM).items()}
        self.tensors = {}
        for name, arr in tensors.items():
            arr = np.array(arr, dtype=np.float32)
            arr.flags.writeable = False
            self.tensors[name] = arr
        audit_shapes(self.config, self.tensors)
        self._hash = None

    def __getitem__(self, name):
        return self.tensors[name]

    def content_hash(self, recompute=False):
        """sha256 over names, shapes, bytes and normalisation constants."""
        if self._hash is None or recompute:
            h = hashlib.sha256()
            for name in sorted(self.tensors):
                arr = self.tensors[name]
                h.update(name.encode())
                h.update(repr(arr.shape).encode())
                h.update(arr.tobytes())
            h.update(repr(sorted(self.norm.items())).encode())
            self._hash = h.hexdigest()
        return self._hash

    def parameter_count(self):
        return int(sum(a.size for a in self.tensors.values()))


def audit_shapes(config, tensors):
    expected = expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensorError(name)
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatchError(f"tensor {name}: expected {shape}, found {tuple(tensors[name].shape)}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ShapeMismatchError(f"unexpected tensors: {extra}")


def init_random_backbone(config, seed):
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.width
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.startswith("blocks."):
            continue
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape, np.float32)
        elif name.startswith("ln_pre"):
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = trunc_normal(rng, shape)
    for i in range(config.depth):
        tensors.update(init_block(rng, d, config.mlp_hidden, prefix=f"blocks.{i}."))
    return BackboneWeights(config, tensors)


RESIDUAL_OUTPUTS = ("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias")


def zero_residual(weights):
    """Copy with every block's attention and MLP output projection zeroed.

    Each block then returns its input unchanged, so the CLS token is identical
    after every layer.
    """
    tensors = {k: (np.zeros_like(v) if k.startswith("blocks.") and k.split(".", 2)[2] in RESIDUAL_OUTPUTS else v)
               for k, v in weights.tensors.items()}
    return BackboneWeights(weights.config, tensors, weights.norm)


def save_backbone(path, weights):
    write_archive(path, weights.tensors, kind="backbone", config=weights.config.to_dict(), norm=weights.norm)


def load_weight_archive(path):
    header, tensors = read_archive(path)
    if "config" not in header:
        raise ArchiveError(f"{path}: header has no config")
    config = BackboneConfig.from_dict(header["config"])
    norm = header.get("norm", DEFAULT_NORM)
    if len(norm.get("mean", [])) != 3 or len(norm.get("std", [])) != 3:
        raise ArchiveError(f"{path}: norm must give three channel means and stds")
    return config, BackboneWeights(config, tensors, norm)


def patchify(images, patch):
    """(B, H, W, 3) -> (B, N, patch*patch*3), row-major over the patch grid."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g_h * g_w, patch * patch * c))


def encode_layers(images, weights):
    """CLS token after every transformer layer.

    ``images`` is one (H, W, 3) image or a (B, H, W, 3) batch with values in
    [0, 1]; channel normalisation with the archive's constants happens here.
    Returns (depth, width) or (B, depth, width) float32.
    """
    cfg = weights.config
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(f"expected images of shape (*, {cfg.image_size}, {cfg.image_size}, 3), got {images.shape}")
    mean = np.asarray(weights.norm["mean"], np.float32)
    std = np.asarray(weights.norm["std"], np.float32)
    x = (images - mean) / std
    p = {k: constant(v) for k, v in weights.tensors.items()}
    b = x.shape[0]
    with ag.no_grad(), ag.precision(np.float32):
        tokens = ag.matmul(constant(patchify(x, cfg.patch_size)), p["patch_embed.weight"])
        if cfg.patch_bias:
            tokens = tokens + p["patch_embed.bias"]
        cls = constant(np.broadcast_to(weights["cls_token"], (b, 1, cfg.width)).copy())
        h = ag.concat([cls, tokens], axis=1) + p["pos_embed"]
        if cfg.ln_pre:
            h = ag.layer_norm(h, p["ln_pre.weight"], p["ln_pre.bias"], cfg.ln_eps)
        rows = []
        for i in range(cfg.depth):
            h = block_forward(h, p, f"blocks.{i}.", cfg.heads, cfg.activation, cfg.ln_eps)
            rows.append(h.data[:, 0])
    out = np.stack(rows, axis=1).astype(np.float32)
    return out[0] if single else out
