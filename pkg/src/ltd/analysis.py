"""Adjacent-layer consistency profiles and CSV feature export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LTDIOError, ManifestError
from .features import extract_features

PROFILE_FIELDS = ("class", "layer", "next_layer", "count", "cos_mean", "cos_std", "l2_mean", "l2_std")


def adjacent_cosine(features):
    """Cosine between rows k and k+1 along the layer axis; (..., l, D) -> (..., l-1).

    Computed as 1 - |u - v|^2 / 2 on the unit vectors, which is exact for
    identical rows and orthogonal rows.  A zero row has cosine 1 with another
    zero row and 0 otherwise.
    """
    f = np.asarray(features, dtype=np.float64)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    unit = np.divide(f, norm, out=np.zeros_like(f), where=norm > 0)
    diff = unit[..., 1:, :] - unit[..., :-1, :]
    cos = 1.0 - 0.5 * np.sum(diff * diff, axis=-1)
    zero = norm[..., 0] == 0
    both_zero = zero[..., 1:] & zero[..., :-1]
    one_zero = zero[..., 1:] ^ zero[..., :-1]
    cos = np.where(both_zero, 1.0, np.where(one_zero, 0.0, cos))
    return np.clip(cos, -1.0, 1.0)


def adjacent_l2(features):
    f = np.asarray(features, dtype=np.float64)
    return np.linalg.norm(f[..., 1:, :] - f[..., :-1, :], axis=-1)


@dataclass
class LayerProfile:
    """One row per (class, adjacent layer pair); classes are 'all', 'real', 'fake'."""

    rows: list

    def select(self, cls):
        return [r for r in self.rows if r["class"] == cls]

    def to_csv(self, path):
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(PROFILE_FIELDS)
                for r in self.rows:
                    w.writerow([r["class"], r["layer"], r["next_layer"], r["count"]] +
                               [repr(float(r[k])) for k in PROFILE_FIELDS[4:]])
        except OSError as exc:
            raise LTDIOError(f"cannot write profile {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path):
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                rows = []
                for r in reader:
                    rows.append({"class": r["class"], "layer": int(r["layer"]), "next_layer": int(r["next_layer"]),
                                 "count": int(r["count"]),
                                 **{k: float(r[k]) for k in PROFILE_FIELDS[4:]}})
        except OSError as exc:
            raise LTDIOError(f"cannot read profile {path}: {exc}") from exc
        return cls(rows)


def profile_from_features(features, labels, per_class=True):
    feats = np.asarray(features)
    if feats.shape[0] == 0:
        raise ManifestError("empty manifest")
    cos, l2 = adjacent_cosine(feats), adjacent_l2(feats)
    labels = np.asarray(labels)
    groups = [("all", np.ones(len(labels), bool))]
    if per_class:
        groups += [("real", labels == 0), ("fake", labels == 1)]
    rows = []
    for name, mask in groups:
        if not mask.any():
            continue
        c, d = cos[mask], l2[mask]
        for k in range(cos.shape[1]):
            rows.append({"class": name, "layer": k, "next_layer": k + 1, "count": int(mask.sum()),
                         "cos_mean": float(c[:, k].mean()), "cos_std": float(c[:, k].std()),
                         "l2_mean": float(d[:, k].mean()), "l2_std": float(d[:, k].std())})
    return LayerProfile(rows)


def layer_profiles(weights, manifest, per_class=True, threads=1):
    """Mean/std of adjacent-layer cosine and L2 distance of the CLS token over a manifest."""
    if len(manifest) == 0:
        raise ManifestError("empty manifest")
    feats = extract_features(manifest, weights, threads=threads)
    return profile_from_features(feats, manifest.labels, per_class)


def feature_rows(features, paths, labels, layers, diff=False):
    """Yield (path, label, layer, vector) in image-major, then layer order.

    With ``diff`` the vector for layer k is f[k+1] - f[k].
    """
    feats = np.asarray(features)
    depth = feats.shape[1]
    top = depth - 1 if diff else depth
    for k in layers:
        if not 0 <= k < top:
            raise DimensionError(f"layer {k} outside 0..{top - 1}" + (" for differences" if diff else ""))
    for f, path, label in zip(feats, paths, labels):
        for k in layers:
            yield path, int(label), int(k), (f[k + 1] - f[k]) if diff else f[k]


def write_feature_csv(path, rows, width):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "layer"] + [f"dim_{i}" for i in range(width)])
            n = 0
            for p, label, k, vec in rows:
                w.writerow([p, label, k] + ["%.9g" % v for v in vec])
                n += 1
    except OSError as exc:
        raise LTDIOError(f"cannot write features {path}: {exc}") from exc
    return n


def read_feature_csv(path):
    """(meta rows [(path, label, layer)], float32 matrix)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            meta, values = [], []
            for row in reader:
                meta.append((row[0], int(row[1]), int(row[2])))
                values.append([float(x) for x in row[3:]])
    except OSError as exc:
        raise LTDIOError(f"cannot read features {path}: {exc}") from exc
    return meta, np.asarray(values, dtype=np.float32)


def export_features(weights, manifest, layers, out_path, diff=False, threads=1):
    """Write per-(image, layer) CLS vectors (or adjacent differences); returns the row count."""
    layers = [int(k) for k in layers]
    if not layers:
        raise DimensionError("no layers requested")
    top = weights.config.depth - (1 if diff else 0)
    bad = [k for k in layers if not 0 <= k < top]
    if bad:
        raise DimensionError(f"layers {bad} outside 0..{top - 1}")
    feats = extract_features(manifest, weights, threads=threads)
    rows = feature_rows(feats, [r.path for r in manifest], manifest.labels, layers, diff)
    return write_feature_csv(out_path, rows, weights.config.width)
