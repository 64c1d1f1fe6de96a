"""Trainable detector head over per-layer CLS features.

Pipeline for a batch of layer features (B, l, D):

1. pick a start index among the C candidate windows (straight-through
   Gumbel-Softmax in training, plain argmax at inference);
2. gather the n consecutive layer rows of that window;
3. difference adjacent rows (the transition discrepancy);
4. prepend a learnable class token to each sequence, add positional embeddings;
5. run both sequences through the transformer block(s), shared by default;
6. concatenate the two position-0 outputs and classify with
   LayerNorm -> Linear -> GELU -> Linear.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, NumericError
from .nn import block_forward, block_param_count, block_shapes, constant, init_block, trunc_normal

BRANCHES = ("both", "raw", "ltd")


def default_layer_range(depth):
    """(layer_lo, layer_hi, window) used when the caller does not choose one."""
    if depth >= 24:
        return round(depth * 11 / 24), round(depth * 19 / 24), 5
    lo, hi = depth // 4, depth - 2
    return lo, hi, max(2, min(5, (hi - lo + 1) // 2 + 1))


@dataclass(frozen=True)
class HeadConfig:
    width: int
    layer_lo: int
    layer_hi: int
    window: int
    tau: float = 1.0
    shared_block: bool = True
    trainable_blocks: int = 1
    head_hidden: Optional[int] = None
    heads: int = 8
    mlp_ratio: float = 4.0
    pos_enc: bool = True
    branch: str = "both"
    gumbel_per: str = "image"

    @classmethod
    def default(cls, depth, width, **overrides):
        lo, hi, n = default_layer_range(depth)
        fields = dict(width=width, layer_lo=lo, layer_hi=hi, window=n)
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields).validate(depth)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    @property
    def candidates(self):
        return (self.layer_hi - self.layer_lo + 1) - self.window + 1

    @property
    def hidden(self):
        return self.head_hidden or self.width

    @property
    def mlp_hidden(self):
        return int(round(self.mlp_ratio * self.width))

    @property
    def branches(self):
        return {"both": ("f", "d"), "raw": ("f",), "ltd": ("d",)}[self.branch]

    def validate(self, depth=None):
        if self.layer_lo < 0 or self.layer_lo > self.layer_hi:
            raise ConfigError(f"bad layer range {self.layer_lo}..{self.layer_hi}")
        if depth is not None and self.layer_hi >= depth:
            raise ConfigError(f"layer_hi {self.layer_hi} outside a {depth}-layer backbone")
        if self.window < 2:
            raise ConfigError("window size must be at least 2")
        if self.candidates < 1:
            raise ConfigError(f"window {self.window} does not fit in layers {self.layer_lo}..{self.layer_hi}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.trainable_blocks < 1:
            raise ConfigError("need at least one trainable block")
        if self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.branch not in BRANCHES:
            raise ConfigError(f"branch must be one of {BRANCHES}")
        if self.gumbel_per not in ("image", "batch"):
            raise ConfigError("gumbel_per must be 'image' or 'batch'")
        if self.hidden < 1:
            raise ConfigError("head_hidden must be positive")
        return self

    def block_prefixes(self, branch):
        """Name prefixes of the block stack used by ``branch`` ('f' or 'd')."""
        tag = "block" if self.shared_block else f"block_{branch}"
        return [f"{tag}.{j}." for j in range(self.trainable_blocks)]

    def parameter_shapes(self):
        d, n = self.width, self.window
        shapes = {"pi": (self.candidates,)}
        for b in self.branches:
            shapes[f"{b}_cls"] = (d,)
        if self.pos_enc:
            if "f" in self.branches:
                shapes["f_pos"] = (n + 1, d)
            if "d" in self.branches:
                shapes["d_pos"] = (n, d)
        prefixes = []
        for b in self.branches:
            prefixes += [p for p in self.block_prefixes(b) if p not in prefixes]
        for prefix in prefixes:
            for name, shape in block_shapes(d, self.mlp_hidden).items():
                shapes[prefix + name] = shape
        k = d * len(self.branches)
        shapes.update({
            "classifier.ln.weight": (k,),
            "classifier.ln.bias": (k,),
            "classifier.fc1.weight": (k, self.hidden),
            "classifier.fc1.bias": (self.hidden,),
            "classifier.fc2.weight": (self.hidden, 1),
            "classifier.fc2.bias": (1,),
        })
        return shapes

    def parameter_count(self):
        d, n, h = self.width, self.window, self.hidden
        nb = len(self.branches)
        count = self.candidates + nb * d
        if self.pos_enc:
            count += (n + 1) * d * ("f" in self.branches) + n * d * ("d" in self.branches)
        stacks = 1 if self.shared_block else nb
        count += stacks * self.trainable_blocks * block_param_count(d, self.mlp_hidden)
        k = nb * d
        return count + 2 * k + k * h + h + h + 1


class LTDHeadParams:
    """Named trainable tensors of the head.

    With a shared block both branches look up the same ``block.*`` entries,
    so there is exactly one tensor (and one optimizer slot) per weight.
    """

    def __init__(self, config, tensors):
        self.config = config
        shapes = config.parameter_shapes()
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise DimensionError(f"head parameters mismatch config (missing {missing}, unexpected {extra})")
        self.tensors = {}
        for name in shapes:
            t = tensors[name]
            if not isinstance(t, Tensor):
                t = Tensor(t, requires_grad=True, name=name)
            if t.shape != shapes[name]:
                raise DimensionError(f"{name}: expected {shapes[name]}, got {t.shape}")
            t.requires_grad = True
            t.name = name
            self.tensors[name] = t

    @classmethod
    def init(cls, config, seed):
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in config.parameter_shapes().items():
            if name == "pi":
                arrays[name] = np.zeros(shape, np.float32)
            elif name.endswith("_cls") or name.endswith("_pos"):
                arrays[name] = trunc_normal(rng, shape)
        for prefix in dict.fromkeys(p for b in config.branches for p in config.block_prefixes(b)):
            arrays.update(init_block(rng, config.width, config.mlp_hidden, prefix=prefix))
        k, h = config.width * len(config.branches), config.hidden
        arrays["classifier.ln.weight"] = np.ones(k, np.float32)
        arrays["classifier.ln.bias"] = np.zeros(k, np.float32)
        # fan-in scaling keeps the hidden activations O(1) after the LayerNorm
        arrays["classifier.fc1.weight"] = trunc_normal(rng, (k, h), std=1.0 / np.sqrt(k))
        arrays["classifier.fc1.bias"] = np.zeros(h, np.float32)
        arrays["classifier.fc2.weight"] = np.zeros((h, 1), np.float32)
        arrays["classifier.fc2.bias"] = np.zeros(1, np.float32)
        return cls(config, arrays)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def parameters(self):
        return list(self.tensors.values())

    def named_parameters(self):
        return list(self.tensors.items())

    def parameter_count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype):
        """Copy with every tensor converted to ``dtype``."""
        with ag.precision(dtype):
            return LTDHeadParams(self.config, {k: Tensor(t.data, requires_grad=True) for k, t in self.tensors.items()})


class SelectionResult(NamedTuple):
    hard: np.ndarray
    soft: Tensor
    start_index: np.ndarray


def gumbel_noise(rng, shape):
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def select_window(pi, tau, mode="infer", rng=None, batch=None, noise=None, per="image"):
    """Choose one start index per sample.

    train: soft = softmax((log_softmax(pi) + g) / tau), hard = one_hot(argmax);
    infer: no noise, hard = one_hot(argmax pi), soft = softmax(pi / tau).
    ``noise`` overrides the Gumbel sample (shape (B, C) or (C,)).
    Returned arrays carry a leading batch axis when ``batch`` is given.
    """
    pi = ag.as_tensor(pi)
    c = pi.shape[-1]
    if c < 1:
        raise ConfigError("no candidate windows")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    rows = 1 if batch is None else batch
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ConfigError("train-mode selection needs a random generator")
            noise = gumbel_noise(rng, (rows if per == "image" else 1, c))
        noise = np.broadcast_to(np.asarray(noise, dtype=pi.dtype), (rows, c))
        scores = (ag.log_softmax(pi, axis=-1) + noise) * (1.0 / tau)
        soft = ag.softmax(scores, axis=-1)
        idx = np.argmax(scores.data, axis=-1)
    elif mode == "infer":
        scores = pi * (1.0 / tau)
        soft = ag.softmax(ag.broadcast_to(scores, (rows, c)), axis=-1)
        idx = np.full(rows, int(np.argmax(pi.data)))
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    hard = np.zeros((rows, c), dtype=pi.dtype)
    hard[np.arange(rows), idx] = 1.0
    if batch is None:
        return SelectionResult(hard[0], soft[0], idx[0])
    return SelectionResult(hard, soft, idx)


def candidate_windows(features, config):
    """(B, l, D) -> (B, C, n, D) stack of every candidate window."""
    feats = np.asarray(features)
    lo, n, c = config.layer_lo, config.window, config.candidates
    if config.layer_hi >= feats.shape[-2]:
        raise DimensionError(f"layer range up to {config.layer_hi} but features have {feats.shape[-2]} layers")
    return np.stack([feats[..., lo + i: lo + i + n, :] for i in range(c)], axis=-3)


def gather_window(features, sel, config):
    """Rows layer_lo + start .. + n - 1 as a straight-through mixture.

    The forward value is exactly the selected slice (one-hot weights); the
    gradient reaches the selection logits through the soft weights only.
    """
    feats = np.asarray(features)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    wins = candidate_windows(feats, config)
    b, c, n, d = wins.shape
    hard = np.reshape(sel.hard, (-1, c))
    soft = sel.soft.reshape(-1, c)
    if hard.shape[0] != b:
        raise DimensionError(f"selection for {hard.shape[0]} samples, features for {b}")
    weights = ag.straight_through(hard, soft).reshape(b, 1, c)
    flat = constant(wins.reshape(b, c, n * d).astype(weights.dtype))
    out = ag.matmul(weights, flat).reshape(b, n, d)
    return out[0] if single else out


def compute_ltd(window):
    """Adjacent-row differences: row k is window[k + 1] - window[k]."""
    window = ag.as_tensor(window)
    if window.shape[-2] < 2:
        raise DimensionError("need at least two rows to difference")
    hi = window[..., 1:, :]
    lo = window[..., :-1, :]
    return hi - lo


def assemble_branches(window, ltd, params):
    """Prepend the branch class tokens and add positional embeddings.

    Returns ``(seq_f, seq_d)``; a branch disabled by the config comes back as None.
    """
    cfg = params.config
    window, ltd = ag.as_tensor(window), ag.as_tensor(ltd)
    if window.shape[-2:] != (cfg.window, cfg.width) or ltd.shape[-2:] != (cfg.window - 1, cfg.width):
        raise DimensionError(f"window {window.shape} / ltd {ltd.shape} do not match n={cfg.window}, D={cfg.width}")
    out = []
    for tag, rows in (("f", window), ("d", ltd)):
        if tag not in cfg.branches:
            out.append(None)
            continue
        lead = rows.shape[:-2]
        cls = ag.broadcast_to(params[f"{tag}_cls"], lead + (1, cfg.width))
        seq = ag.concat([cls, rows], axis=-2)
        if cfg.pos_enc:
            seq = seq + params[f"{tag}_pos"]
        out.append(seq)
    return tuple(out)


def run_branch(seq, params, tag):
    cfg = params.config
    single = seq.ndim == 2
    if single:
        seq = seq.reshape(1, *seq.shape)
    for prefix in cfg.block_prefixes(tag):
        seq = block_forward(seq, params.tensors, prefix, cfg.heads, "gelu")
    return seq[:, 0, :] if not single else seq[0, 0, :]


def classify(pooled, params):
    p = params.tensors
    x = ag.layer_norm(pooled, p["classifier.ln.weight"], p["classifier.ln.bias"])
    x = ag.gelu(ag.matmul(x, p["classifier.fc1.weight"]) + p["classifier.fc1.bias"])
    return ag.matmul(x, p["classifier.fc2.weight"]) + p["classifier.fc2.bias"]


class HeadOutput(NamedTuple):
    logits: Tensor
    selection: SelectionResult


def forward_head(features, params, mode="infer", rng=None, noise=None, return_selection=False):
    """Logits for a (B, l, D) batch of layer features (or a scalar for one (l, D))."""
    cfg = params.config
    feats = np.asarray(features)
    single = feats.ndim == 2
    if single:
        feats = feats[None]
    if feats.ndim != 3 or feats.shape[-1] != cfg.width:
        raise DimensionError(f"features {feats.shape} do not match head width {cfg.width}")
    b = feats.shape[0]
    sel = select_window(params["pi"], cfg.tau, mode, rng=rng, batch=b, noise=noise, per=cfg.gumbel_per)
    window = gather_window(feats, sel, cfg)
    ltd = compute_ltd(window)
    seq_f, seq_d = assemble_branches(window, ltd, params)
    pooled = [run_branch(s, params, tag) for s, tag in ((seq_f, "f"), (seq_d, "d")) if s is not None]
    pooled = pooled[0] if len(pooled) == 1 else ag.concat(pooled, axis=-1)
    logits = classify(pooled, params).reshape(b)
    if single:
        logits = logits.reshape(())
    if return_selection:
        return HeadOutput(logits, sel)
    return logits


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def predict(logit, threshold=0.5):
    """(probability, label) with label 1 (fake) iff probability > threshold."""
    z = np.asarray(logit.data if isinstance(logit, Tensor) else logit, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("non-finite logit")
    prob = sigmoid(z)
    label = (prob > threshold).astype(int)
    if prob.ndim == 0:
        return float(prob), int(label)
    return prob, label
