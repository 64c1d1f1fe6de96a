"""Whole-head gradient check against central differences (float64).

Every tensor except the selection logits is checked against differences of
the real train-mode loss with the Gumbel noise held fixed.  The forward value
of the window selection is an exact one-hot, so the true derivative of that
loss with respect to the logits is zero almost everywhere.  The logits are
therefore checked against differences of the straight-through surrogate,
where the selection weights are hard(pi0) - soft(pi0) + soft(pi), whose value
at pi0 equals the forward pass.
"""

import time

import numpy as np

from ltd import autograd as ag
from ltd.head import (LTDHeadParams, assemble_branches, candidate_windows, classify, compute_ltd, forward_head,
                      run_branch)
from ltd.nn import constant
from ltd.train import bce_loss
from oracles import central_diff, rel_err


def _np_soft(pi, noise, tau):
    s = pi - pi.max()
    logp = s - np.log(np.exp(s).sum())
    z = (logp + noise) / tau
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _loss_from_weights(feats, params, weights, labels):
    cfg = params.config
    wins = candidate_windows(feats, cfg)
    b, c, n, d = wins.shape
    window = ag.matmul(ag.as_tensor(weights).reshape(b, 1, c), constant(wins.reshape(b, c, n * d))).reshape(b, n, d)
    seq_f, seq_d = assemble_branches(window, compute_ltd(window), params)
    pooled = [run_branch(s, params, t) for s, t in ((seq_f, "f"), (seq_d, "d")) if s is not None]
    pooled = pooled[0] if len(pooled) == 1 else ag.concat(pooled, axis=-1)
    return bce_loss(classify(pooled, params).reshape(b), labels)


def prepare(params32, seed=0, batch=2, depth=8, margin=0.5):
    """Float64 copy of the head with a non-zero output layer, features, labels and fixed noise."""
    rng = np.random.default_rng(seed)
    cfg = params32.config
    with ag.float64():
        params = params32.astype(np.float64)
    # a zero output layer would hide every upstream gradient
    params["classifier.fc2.weight"].data[:] = rng.normal(0, 0.5, params["classifier.fc2.weight"].shape)
    params["classifier.fc2.bias"].data[:] = 0.1
    params["pi"].data[:] = rng.normal(0, 0.3, params["pi"].shape)
    feats = rng.normal(size=(batch, depth, cfg.width))
    labels = np.arange(batch) % 2
    # resample noise until the winning candidate leads by a clear margin, so +-h never flips it
    while True:
        noise = -np.log(-np.log(rng.uniform(size=(batch, cfg.candidates))))
        z = _np_soft(params["pi"].data, noise, cfg.tau)
        top = np.sort(np.log(z), axis=-1)
        if cfg.candidates == 1 or (top[:, -1] - top[:, -2]).min() > margin:
            return params, feats, labels, noise


def check_head_gradients(params32, h=1e-3, seed=0, batch=2, depth=8):
    """Return ({name: relative error}, seconds)."""
    t0 = time.perf_counter()
    params, feats, labels, noise = prepare(params32, seed, batch, depth)
    cfg = params.config
    with ag.float64():
        ag.reset_tape()
        loss = bce_loss(forward_head(feats, params, "train", noise=noise), labels)
        ag.backward(loss, params.parameters())
        analytic = {k: t.grad.copy() for k, t in params.named_parameters()}
        params.zero_grad()

        def full_loss():
            with ag.no_grad():
                return float(bce_loss(forward_head(feats, params, "train", noise=noise), labels).data)

        pi0 = params["pi"].data.copy()
        soft0 = _np_soft(pi0, noise, cfg.tau)
        hard0 = np.zeros_like(soft0)
        hard0[np.arange(batch), soft0.argmax(-1)] = 1.0

        def surrogate_loss():
            w = hard0 - soft0 + _np_soft(params["pi"].data, noise, cfg.tau)
            with ag.no_grad():
                return float(_loss_from_weights(feats, params, w, labels).data)

        assert abs(surrogate_loss() - full_loss()) < 1e-12
        errors = {}
        for name, t in params.named_parameters():
            fn = surrogate_loss if name == "pi" else full_loss
            errors[name] = rel_err(analytic[name], central_diff(fn, t.data, h))
    return errors, time.perf_counter() - t0


def small_head(config, seed=0):
    return LTDHeadParams.init(config, seed)
