"""Image manifest readers: which images to encode, with split and labels.

CSV columns: id, path, split, c1, c2, c3 (optional conf1..conf3). The JSON
form is a list of {id, path, split, labels, confidence?} objects. Paths are
resolved relative to the manifest file.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import SchemaError

SPLITS = ("train", "val", "test")
NUM_CRITERIA = 3


@dataclass
class ManifestRow:
    id: str
    path: Path
    split: str
    labels: tuple[int, ...]
    confidence: tuple[float, ...] | None = None


def _validate_row(rid, path, split, labels, confidence, where: str) -> ManifestRow:
    if not rid:
        raise SchemaError(f"{where}: empty id")
    if split not in SPLITS:
        raise SchemaError(f"{where}: unknown split {split!r}")
    if len(labels) != NUM_CRITERIA or any(v not in (0, 1) for v in labels):
        raise SchemaError(f"{where}: labels must be {NUM_CRITERIA} flags in {{0,1}}, got {labels!r}")
    if confidence is not None:
        if len(confidence) != NUM_CRITERIA or any(not 0.0 <= v <= 1.0 for v in confidence):
            raise SchemaError(f"{where}: confidence must be {NUM_CRITERIA} floats in [0,1]")
        if tuple(1 if v >= 0.5 else 0 for v in confidence) != tuple(labels):
            raise SchemaError(f"{where}: confidence does not round to labels")
    return ManifestRow(
        id=rid,
        path=path,
        split=split,
        labels=tuple(int(v) for v in labels),
        confidence=tuple(float(v) for v in confidence) if confidence is not None else None,
    )


def _read_csv(path: Path) -> list[ManifestRow]:
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "path", "split", "c1", "c2", "c3"}
        fields = set(reader.fieldnames or [])
        if not required <= fields:
            raise SchemaError(f"{path}: CSV manifest needs columns {sorted(required)}")
        has_conf = {"conf1", "conf2", "conf3"} <= fields
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}: line {lineno}"
            try:
                labels = [int(row[f"c{i}"]) for i in (1, 2, 3)]
                conf = [float(row[f"conf{i}"]) for i in (1, 2, 3)] if has_conf else None
            except (TypeError, ValueError):
                raise SchemaError(f"{where}: labels/confidence must be numeric") from None
            rows.append(
                _validate_row(row["id"], path.parent / row["path"], row["split"], labels, conf, where)
            )
    return rows


def _read_json(path: Path) -> list[ManifestRow]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: JSON manifest must be a list of objects")
    rows = []
    for i, obj in enumerate(data):
        where = f"{path}: entry {i}"
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: expected an object")
        unknown = set(obj) - {"id", "path", "split", "labels", "confidence"}
        if unknown:
            raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
        for key in ("id", "path", "split", "labels"):
            if key not in obj:
                raise SchemaError(f"{where}: missing key {key!r}")
        rows.append(
            _validate_row(
                obj["id"], path.parent / obj["path"], obj["split"],
                obj["labels"], obj.get("confidence"), where,
            )
        )
    return rows


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"manifest not found: {path}")
    rows = _read_csv(path) if path.suffix.lower() == ".csv" else _read_json(path)
    if not rows:
        raise SchemaError(f"{path}: manifest is empty")
    seen: set[str] = set()
    for row in rows:
        if row.id in seen:
            raise SchemaError(f"{path}: duplicate manifest id {row.id!r}")
        seen.add(row.id)
    return rows
