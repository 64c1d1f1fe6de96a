"""BCE training of the detector head over frozen-backbone features, plus evaluation
and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .archive import read_archive, write_archive
from .errors import ArchiveError, ConfigError, ContractError, ManifestError, NumericError
from .backbone import encode_layers
from .features import extract_features, model_input, resolve_threads
from .head import HeadConfig, LTDHeadParams, forward_head, predict, sigmoid
from .metrics import UndefinedMetricError, accuracy, average_precision, build_report
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

TRAIN_CHUNK = 8
EVAL_CHUNK = 32


def bce_loss(logits, labels):
    """Mean binary cross-entropy with logits.

    Per sample: max(z, 0) - z*y + log(1 + exp(-|z|)); d/dz = sigmoid(z) - y.
    """
    z = ag.as_tensor(logits)
    y = np.broadcast_to(np.asarray(labels, dtype=z.dtype), z.shape)
    zd = z.data
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = max(z.size, 1)

    def rule(g):
        return ((sigmoid(zd).astype(zd.dtype) - y) * (g / n),)

    return ag.make_op(np.asarray(per.mean(), dtype=zd.dtype), (z,), rule, "bce_loss")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    feature_cache: bool = False
    grad_clip: Optional[float] = None

    @classmethod
    def toy(cls, **overrides):
        return cls(**{"batch_size": 32, **overrides}).validate()

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        # lr == 0 is allowed: it freezes the head, which is handy for checks
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")
        return self


@dataclass
class Checkpoint:
    """Head weights, optimizer state and bookkeeping after ``epoch`` epochs."""

    head: LTDHeadParams
    optim: AdamState
    train_config: TrainConfig
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    backbone_hash: str = ""
    best: Optional[dict] = None  # {"epoch", "metrics", "arrays"} of the best epoch so far

    @property
    def head_config(self):
        return self.head.config

    def selected_window_start(self):
        cfg = self.head.config
        return cfg.layer_lo + int(np.argmax(self.head["pi"].data))


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint

    @property
    def history(self):
        return self.last.history


class TrainingAborted(NumericError):
    """Non-finite value during training; ``checkpoint`` is the last good state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def stratified_order(labels, rng):
    """Seeded shuffle that spreads each class evenly through the epoch.

    Each class is permuted on its own; the k-th of n_c items gets position
    (k + 0.5) / n_c and the merged order sorts by position (ties: real first).
    With balanced classes every even-sized batch holds both classes equally.
    """
    labels = np.asarray(labels)
    keys, items = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(idx.size)]
        keys.append(np.column_stack([(np.arange(idx.size) + 0.5) / max(idx.size, 1), np.full(idx.size, cls)]))
        items.append(perm)
    keys, items = np.concatenate(keys), np.concatenate(items)
    order = np.lexsort((keys[:, 1], keys[:, 0]))
    return items[order]


def head_logits(params, features, chunk=EVAL_CHUNK):
    """Infer-mode logits, computed in fixed chunks without recording gradients."""
    feats = np.asarray(features)
    out = []
    with ag.no_grad():
        for i in range(0, feats.shape[0], chunk):
            out.append(forward_head(feats[i:i + chunk], params, mode="infer").data)
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def _val_metrics(params, features, labels):
    z = head_logits(params, features)
    probs = sigmoid(z)
    acc = accuracy(probs, labels)[0]
    try:
        ap = average_precision(probs, labels)
    except UndefinedMetricError:
        ap = None
    return {"val_acc": acc, "val_ap": ap}


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = np.float32(max_norm / total)
        grads = [g * scale for g in grads]
    return grads


def _snapshot(params, state, cfg, epoch, metrics, history, bb_hash, best):
    head = LTDHeadParams(params.config, params.arrays())
    optim = dataclasses.replace(state, m=[m.copy() for m in state.m], v=[v.copy() for v in state.v])
    return Checkpoint(head, optim, cfg, epoch, dict(metrics), [dict(r) for r in history], bb_hash,
                      None if best is None else dict(best))


def _best_checkpoint(last):
    if last.best is None or last.best["epoch"] == last.epoch:
        return dataclasses.replace(last, best=None)
    b = last.best
    head = LTDHeadParams(last.head.config, b["arrays"])
    return Checkpoint(head, last.optim, last.train_config, b["epoch"], dict(b["metrics"]),
                      [r for r in last.history if r["epoch"] <= b["epoch"]], last.backbone_hash, None)


def train(train_manifest, val_manifest, weights, cfg=None, head_config=None, log_path=None,
          resume=None, threads=1, epochs=None):
    """Train a head; returns ``TrainResult(best, last)``.

    ``best`` is the epoch with the highest validation accuracy (ties go to the
    earlier epoch).  ``resume`` continues from a ``last`` checkpoint and
    reproduces the uninterrupted run exactly.  ``epochs`` overrides the total
    epoch count (used to stop early for a later resume).
    """
    cfg = (cfg or TrainConfig.toy()).validate()
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise ManifestError("empty manifest")
    labels = np.asarray(train_manifest.labels)
    if labels.min() == labels.max():
        raise ManifestError("training data holds a single class; both real and fake are required")
    threads = resolve_threads(threads)
    bb_hash = weights.content_hash()
    depth, width = weights.config.depth, weights.config.width

    if resume is not None:
        params = LTDHeadParams(resume.head.config, resume.head.arrays())
        state = dataclasses.replace(resume.optim, m=[m.copy() for m in resume.optim.m],
                                    v=[v.copy() for v in resume.optim.v])
        if resume.backbone_hash and resume.backbone_hash != bb_hash:
            raise ConfigError("checkpoint was trained on a different backbone")
        history, best, start = [dict(r) for r in resume.history], resume.best, resume.epoch + 1
        cfg = resume.train_config
    else:
        head_config = head_config or HeadConfig.default(depth, width)
        params = LTDHeadParams.init(head_config, cfg.seed)
        state = AdamState.fresh(params.parameters(), lr=cfg.lr)
        history, best, start = [], None, 1
    hcfg = params.config
    if hcfg.width != width:
        raise ConfigError(f"head width {hcfg.width} does not match backbone width {width}")
    hcfg.validate(depth)
    total = cfg.epochs if epochs is None else epochs
    plist = params.parameters()
    if len(plist) != len(state.m) or sum(p.size for p in plist) != hcfg.parameter_count():
        raise ContractError("optimizer state does not cover exactly the head parameters")

    val_feats = extract_features(val_manifest, weights, threads=threads)
    val_labels = np.asarray(val_manifest.labels)
    cache = extract_features(train_manifest, weights, threads=threads) if cfg.feature_cache else None
    y_all = labels.astype(np.float32)

    last_good = _snapshot(params, state, cfg, start - 1, history[-1] if history else {}, history, bb_hash, best)
    log_fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start, total + 1):
            order = stratified_order(labels, np.random.default_rng([cfg.seed, epoch, 0x5F]))
            loss_sum = 0.0
            try:
                for step, b in enumerate(range(0, len(order), cfg.batch_size)):
                    idx = order[b:b + cfg.batch_size]
                    if cache is not None:
                        feats = cache[idx]
                    else:
                        feats = extract_features(train_manifest, weights, idx, train=True, seed=cfg.seed,
                                                 epoch=epoch, threads=threads, chunk=TRAIN_CHUNK)
                    rng = np.random.default_rng([cfg.seed, epoch, step, 0x6B])
                    ag.reset_tape()
                    logits = forward_head(feats, params, mode="train", rng=rng)
                    loss = bce_loss(logits, y_all[idx])
                    ag.backward(loss, plist)
                    grads = [p.grad for p in plist]
                    if not all(np.isfinite(g).all() for g in grads):
                        raise NumericError(f"non-finite gradient at epoch {epoch}, step {step}")
                    if cfg.grad_clip is not None:
                        grads = _clip(grads, cfg.grad_clip)
                    with np.errstate(over="ignore", invalid="ignore"):  # caught by the check below
                        adam_step(plist, grads, state)
                    params.zero_grad()
                    if not all(np.isfinite(p.data).all() for p in plist):
                        raise NumericError(f"non-finite parameter after epoch {epoch}, step {step}")
                    loss_sum += float(loss.data) * len(idx)
            except NumericError as exc:
                ag.reset_tape()
                raise TrainingAborted(f"training aborted: {exc}", last_good) from exc
            if weights.content_hash(recompute=True) != bb_hash:
                raise ContractError("backbone weights changed during training")

            row = {"epoch": epoch, "train_loss": loss_sum / len(order)}
            row.update(_val_metrics(params, val_feats, val_labels))
            row["selected_window_start"] = hcfg.layer_lo + int(np.argmax(params["pi"].data))
            history.append(row)
            log.info("epoch %d  loss %.6f  val_acc %.4f  val_ap %s  window@%d", epoch, row["train_loss"],
                     row["val_acc"], "n/a" if row["val_ap"] is None else f"{row['val_ap']:.4f}",
                     row["selected_window_start"])
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
            metrics = {k: row[k] for k in ("train_loss", "val_acc", "val_ap")}
            if best is None or row["val_acc"] > best["metrics"]["val_acc"]:
                best = {"epoch": epoch, "metrics": metrics, "arrays": params.arrays()}
            last_good = _snapshot(params, state, cfg, epoch, metrics, history, bb_hash, best)
    finally:
        if log_fh:
            log_fh.close()

    if weights.content_hash(recompute=True) != bb_hash:
        raise ContractError("backbone weights changed during training")
    return TrainResult(_best_checkpoint(last_good), last_good)


def check_compatible(head_config, weights):
    if head_config.width != weights.config.width:
        raise ConfigError(f"checkpoint width {head_config.width} does not match backbone width "
                          f"{weights.config.width}")
    if head_config.layer_hi >= weights.config.depth:
        raise ConfigError(f"checkpoint uses layer {head_config.layer_hi} but backbone has "
                          f"{weights.config.depth} layers")


def evaluate(checkpoint, manifest, weights, degrade=None, threads=1, threshold=0.5):
    """Score every record (degradations first) and build a MetricsReport."""
    head = checkpoint.head if isinstance(checkpoint, Checkpoint) else checkpoint
    check_compatible(head.config, weights)
    if isinstance(checkpoint, Checkpoint) and checkpoint.backbone_hash and \
            checkpoint.backbone_hash != weights.content_hash():
        log.warning("backbone hash differs from the one recorded at training time")
    degrade = list(degrade or ())
    feats = extract_features(manifest, weights, degrade=degrade, threads=threads)
    probs = sigmoid(head_logits(head, feats))
    return build_report([r.path for r in manifest], probs, manifest.labels, [r.group for r in manifest],
                        threshold, [d.to_dict() for d in degrade])


def score_image(checkpoint, weights, path, threshold=0.5):
    """(probability, label) for a single image file."""
    head = checkpoint.head if isinstance(checkpoint, Checkpoint) else checkpoint
    check_compatible(head.config, weights)
    feats = encode_layers(model_input(path, weights), weights)
    with ag.no_grad():
        z = forward_head(feats, head, mode="infer")
    return predict(z, threshold)


# -- checkpoint files --------------------------------------------------------

def save_checkpoint(ckpt, path, backbone_path=None):
    names = [n for n, _ in ckpt.head.named_parameters()]
    tensors = {f"head/{n}": t.data for n, t in ckpt.head.named_parameters()}
    tensors.update({f"optim/m/{n}": m for n, m in zip(names, ckpt.optim.m)})
    tensors.update({f"optim/v/{n}": v for n, v in zip(names, ckpt.optim.v)})
    best = None
    if ckpt.best is not None:
        best = {"epoch": ckpt.best["epoch"], "metrics": ckpt.best["metrics"]}
        if ckpt.best["epoch"] != ckpt.epoch:
            tensors.update({f"best/{n}": a for n, a in ckpt.best["arrays"].items()})
    o = ckpt.optim
    write_archive(
        path, tensors, kind="checkpoint",
        head_config=ckpt.head.config.to_dict(), train_config=ckpt.train_config.to_dict(),
        optim={"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t},
        epoch=ckpt.epoch, metrics=ckpt.metrics, history=ckpt.history, best=best,
        backbone_hash=ckpt.backbone_hash,
        backbone_path=None if backbone_path is None else os.path.abspath(backbone_path),
    )


def load_checkpoint(path):
    header, tensors = read_archive(path)
    if header.get("kind") != "checkpoint":
        raise ArchiveError(f"{path} is not a checkpoint archive")
    try:
        hcfg = HeadConfig.from_dict(header["head_config"])
        tcfg = TrainConfig.from_dict(header["train_config"])
        names = list(hcfg.parameter_shapes())
        head = LTDHeadParams(hcfg, {n: tensors[f"head/{n}"] for n in names})
        o = header["optim"]
        optim = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["t"],
                          [tensors[f"optim/m/{n}"] for n in names], [tensors[f"optim/v/{n}"] for n in names])
    except KeyError as exc:
        raise ArchiveError(f"{path}: checkpoint lacks {exc}") from exc
    except TypeError as exc:
        raise ArchiveError(f"{path}: malformed checkpoint config: {exc}") from exc
    best = header.get("best")
    if best is not None:
        if best["epoch"] == header["epoch"]:
            arrays = head.arrays()
        else:
            arrays = {n: tensors[f"best/{n}"] for n in names}
        best = {"epoch": best["epoch"], "metrics": best["metrics"], "arrays": arrays}
    ckpt = Checkpoint(head, optim, tcfg, header["epoch"], header.get("metrics", {}), header.get("history", []),
                      header.get("backbone_hash", ""), best)
    return ckpt, header.get("backbone_path")
