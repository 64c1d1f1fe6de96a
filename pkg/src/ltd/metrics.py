"""Acc@threshold and average precision with the fake class (label 1) as positive."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import LTDValidationError


class UndefinedMetricError(LTDValidationError):
    """Metric has no defined value for this input (e.g. AP without positives)."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise LTDValidationError("empty score list")
    if scores.shape != labels.shape:
        raise LTDValidationError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise LTDValidationError("labels must be 0 or 1")
    if not np.isfinite(scores).all():
        raise LTDValidationError("scores must be finite")
    return scores, labels.astype(int)


def accuracy(scores, labels, threshold=0.5):
    """(overall, fake, real); a class with no samples gives None."""
    scores, labels = _check(scores, labels)
    correct = (scores > threshold).astype(int) == labels
    per_class = []
    for cls in (1, 0):
        mask = labels == cls
        per_class.append(float(correct[mask].mean()) if mask.any() else None)
    return float(correct.mean()), per_class[0], per_class[1]


def average_precision(scores, labels):
    """Mean of precision@rank over the positives.

    Ranking is by descending score; equal scores keep their input order
    (stable sort), so the result is defined for ties.
    """
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive (fake) labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


@dataclass
class GroupReport:
    n: int
    n_real: int
    n_fake: int
    acc_overall: float
    acc_fake: Optional[float]
    acc_real: Optional[float]
    ap: Optional[float]

    @classmethod
    def build(cls, scores, labels, threshold=0.5):
        scores, labels = _check(scores, labels)
        overall, fake, real = accuracy(scores, labels, threshold)
        ap = average_precision(scores, labels) if labels.any() else None
        n_fake = int(labels.sum())
        return cls(int(labels.size), int(labels.size) - n_fake, n_fake, overall, fake, real, ap)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class MetricsReport:
    acc_overall: float
    acc_fake: Optional[float]
    acc_real: Optional[float]
    ap: Optional[float]
    n_real: int
    n_fake: int
    threshold: float = 0.5
    groups: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)
    degradations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "acc_overall": self.acc_overall,
            "acc_fake": self.acc_fake,
            "acc_real": self.acc_real,
            "ap": self.ap,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "threshold": self.threshold,
            "degradations": list(self.degradations),
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
            "scores": [{"path": p, "score": s, "label": y} for p, s, y in self.scores],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json(indent=2) + "\n")

    def summary(self):
        return {k: getattr(self, k) for k in ("acc_overall", "acc_fake", "acc_real", "ap", "n_real", "n_fake")}


def build_report(paths, scores, labels, groups=None, threshold=0.5, degradations=()):
    scores, labels = _check(scores, labels)
    whole = GroupReport.build(scores, labels, threshold)
    by_group = {}
    if groups is not None:
        groups = list(groups)
        for name in sorted(set(groups)):
            idx = [i for i, g in enumerate(groups) if g == name]
            by_group[name] = GroupReport.build(scores[idx], labels[idx], threshold)
    listing = [(str(p), float(s), int(y)) for p, s, y in zip(paths, scores, labels)]
    return MetricsReport(whole.acc_overall, whole.acc_fake, whole.acc_real, whole.ap,
                         whole.n_real, whole.n_fake, threshold, by_group, listing, list(degradations))
