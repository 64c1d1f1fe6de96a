"""Initialisers and the pre-norm transformer block shared by backbone and head."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def constant(arr):
    """Wrap an array as a non-differentiable tensor without copying it."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.is_leaf = True
    t.name = None
    return t


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated at two standard deviations (by resampling)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def block_shapes(width, mlp_hidden):
    d, m = width, mlp_hidden
    return {
        "ln1.weight": (d,),
        "ln1.bias": (d,),
        "attn.qkv.weight": (d, 3 * d),
        "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d),
        "attn.proj.bias": (d,),
        "ln2.weight": (d,),
        "ln2.bias": (d,),
        "mlp.fc1.weight": (d, m),
        "mlp.fc1.bias": (m,),
        "mlp.fc2.weight": (m, d),
        "mlp.fc2.bias": (d,),
    }


def block_param_count(width, mlp_hidden):
    d, m = width, mlp_hidden
    return 4 * d * d + 2 * d * m + 9 * d + m


def init_block(rng, width, mlp_hidden, prefix="", dtype=np.float32):
    out = {}
    for name, shape in block_shapes(width, mlp_hidden).items():
        if name.startswith("ln") and name.endswith("weight"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith("bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = trunc_normal(rng, shape, dtype=dtype)
        out[prefix + name] = arr
    return out


def linear(x, weight, bias=None):
    y = ag.matmul(x, weight)
    return y if bias is None else y + bias


def attention(x, p, prefix, heads):
    b, t, d = x.shape
    dh = d // heads
    qkv = linear(x, p[prefix + "attn.qkv.weight"], p[prefix + "attn.qkv.bias"])
    qkv = ag.transpose(qkv.reshape(b, t, 3, heads, dh), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    mixed = ag.matmul(ag.softmax(scores, axis=-1), v)
    mixed = ag.transpose(mixed, (0, 2, 1, 3)).reshape(b, t, d)
    return linear(mixed, p[prefix + "attn.proj.weight"], p[prefix + "attn.proj.bias"])


def block_forward(x, p, prefix, heads, activation="gelu", eps=1e-5):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)).  ``x`` is (B, T, D)."""
    act = ag.ACTIVATIONS[activation]
    h = ag.layer_norm(x, p[prefix + "ln1.weight"], p[prefix + "ln1.bias"], eps)
    x = x + attention(h, p, prefix, heads)
    h = ag.layer_norm(x, p[prefix + "ln2.weight"], p[prefix + "ln2.bias"], eps)
    h = act(linear(h, p[prefix + "mlp.fc1.weight"], p[prefix + "mlp.fc1.bias"]))
    return x + linear(h, p[prefix + "mlp.fc2.weight"], p[prefix + "mlp.fc2.bias"])
