"""JSON-lines dataset manifests: one {"path", "label", "group"} record per line."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

from .errors import LTDIOError, ManifestError

log = logging.getLogger(__name__)

REAL, FAKE = 0, 1


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    group: str = ""

    def to_dict(self):
        return {"path": self.path, "label": self.label, "group": self.group}


@dataclass
class DatasetManifest:
    records: list
    base_dir: str = "."
    source: str = field(default="", compare=False)

    def __post_init__(self):
        seen = set()
        for i, r in enumerate(self.records):
            if r.label not in (REAL, FAKE):
                raise ManifestError(f"record {i}: label must be 0 or 1, got {r.label!r}")
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path!r}")
            seen.add(r.path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self):
        return [r.label for r in self.records]

    def counts(self):
        n_fake = sum(r.label for r in self.records)
        return {"real": len(self.records) - n_fake, "fake": n_fake}

    def resolve(self, record_or_index):
        rec = self.records[record_or_index] if isinstance(record_or_index, int) else record_or_index
        if os.path.isabs(rec.path):
            return rec.path
        return os.path.normpath(os.path.join(self.base_dir, rec.path))

    def subset(self, indices):
        return DatasetManifest([self.records[i] for i in indices], self.base_dir, self.source)


def parse_record(obj, lineno):
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    path = obj.get("path")
    if not isinstance(path, str) or not path:
        raise ManifestError(f"line {lineno}: missing or empty 'path'")
    label = obj.get("label")
    # bool is an int subclass; true/false are not accepted labels
    if isinstance(label, bool) or label not in (REAL, FAKE):
        raise ManifestError(f"line {lineno}: label must be 0 or 1, got {label!r}")
    group = obj.get("group", "")
    if not isinstance(group, str):
        raise ManifestError(f"line {lineno}: 'group' must be a string")
    return ManifestRecord(path, int(label), group)


def load_manifest(path):
    """Read a manifest; relative image paths resolve against the manifest's directory."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError as exc:
        raise LTDIOError(f"manifest not found: {path}") from exc
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not valid UTF-8") from exc
    except OSError as exc:
        raise LTDIOError(f"cannot read manifest {path}: {exc}") from exc

    records, seen = [], {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        rec = parse_record(obj, lineno)
        if rec.path in seen:
            raise ManifestError(f"line {lineno}: duplicate path {rec.path!r} (first on line {seen[rec.path]})")
        seen[rec.path] = lineno
        records.append(rec)
    if not records:
        raise ManifestError("empty manifest")
    manifest = DatasetManifest(records, os.path.dirname(os.path.abspath(path)), str(path))
    c = manifest.counts()
    log.info("manifest %s: %d records (%d real, %d fake)", path, len(manifest), c["real"], c["fake"])
    return manifest


def write_manifest(manifest, path):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in manifest.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    except OSError as exc:
        raise LTDIOError(f"cannot write manifest {path}: {exc}") from exc
