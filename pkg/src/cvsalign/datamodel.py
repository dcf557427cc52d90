"""Feature records, datasets and the features-v1 JSONL format.

One file = one header line `{"schema": "features-v1", "dim": D}` followed by
one JSON object per record. Loading is strict: unknown keys, dimension drift,
duplicate ids and label/confidence inconsistencies are all schema errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError

NUM_CRITERIA = 3
SPLITS = ("train", "val", "test")

FEATURES_SCHEMA = "features-v1"
_HEADER_KEYS = {"schema", "dim", "provenance"}
_RECORD_KEYS = {"id", "split", "embedding", "labels", "confidence"}


@dataclass
class FeatureRecord:
    """One image's frozen embedding, its binary criterion labels and split."""

    id: str
    split: str
    embedding: np.ndarray
    labels: tuple[int, ...]
    confidence: tuple[float, ...] | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.split == other.split
            and self.labels == other.labels
            and self.confidence == other.confidence
            and self.embedding.shape == other.embedding.shape
            and bool((self.embedding == other.embedding).all())
        )


@dataclass
class Dataset:
    dim: int
    records: list[FeatureRecord]
    provenance: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise SchemaError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.embedding.shape != (self.dim,):
                raise SchemaError(
                    f"record {rec.id!r} has embedding of length {rec.embedding.shape[0]}, expected {self.dim}"
                )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.provenance == other.provenance
            and self.records == other.records
        )


def _validate_record(obj: dict, dim: int, lineno: int) -> FeatureRecord:
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise SchemaError(f"line {lineno}: unknown record keys {sorted(unknown)}")
    for key in ("id", "split", "embedding", "labels"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing key {key!r}")
    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise SchemaError(f"line {lineno}: id must be a non-empty string")
    split = obj["split"]
    if split not in SPLITS:
        raise SchemaError(f"line {lineno}: record {rid!r} has unknown split {split!r}")
    embedding = obj["embedding"]
    if not isinstance(embedding, list) or not all(isinstance(v, (int, float)) for v in embedding):
        raise SchemaError(f"line {lineno}: record {rid!r} embedding must be a list of numbers")
    if len(embedding) != dim:
        raise SchemaError(
            f"line {lineno}: record {rid!r} has embedding of length {len(embedding)}, expected {dim}"
        )
    emb = np.array(embedding, dtype=np.float64)
    if not np.isfinite(emb).all():
        raise SchemaError(f"line {lineno}: record {rid!r} embedding has non-finite entries")
    labels = obj["labels"]
    if (
        not isinstance(labels, list)
        or len(labels) != NUM_CRITERIA
        or any(v not in (0, 1) or isinstance(v, bool) for v in labels)
    ):
        raise SchemaError(
            f"line {lineno}: record {rid!r} labels must be {NUM_CRITERIA} flags in {{0,1}}, got {labels!r}"
        )
    confidence = None
    if "confidence" in obj and obj["confidence"] is not None:
        conf = obj["confidence"]
        if (
            not isinstance(conf, list)
            or len(conf) != NUM_CRITERIA
            or not all(isinstance(v, (int, float)) and 0.0 <= v <= 1.0 for v in conf)
        ):
            raise SchemaError(
                f"line {lineno}: record {rid!r} confidence must be {NUM_CRITERIA} floats in [0,1]"
            )
        rounded = tuple(1 if v >= 0.5 else 0 for v in conf)
        if rounded != tuple(labels):
            raise SchemaError(
                f"line {lineno}: record {rid!r} confidence {conf!r} does not round to labels {labels!r}"
            )
        confidence = tuple(float(v) for v in conf)
    return FeatureRecord(
        id=rid, split=split, embedding=emb, labels=tuple(int(v) for v in labels), confidence=confidence
    )


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"features file not found: {path}")
    records: list[FeatureRecord] = []
    dim = None
    provenance = ""
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}: line {lineno}: expected a JSON object")
            if dim is None:
                unknown = set(obj) - _HEADER_KEYS
                if obj.get("schema") != FEATURES_SCHEMA or unknown:
                    raise SchemaError(
                        f"{path}: line {lineno}: expected header {{'schema': '{FEATURES_SCHEMA}', 'dim': D}}"
                    )
                if not isinstance(obj.get("dim"), int) or obj["dim"] < 1:
                    raise SchemaError(f"{path}: line {lineno}: header dim must be a positive integer")
                dim = obj["dim"]
                provenance = str(obj.get("provenance", ""))
                continue
            try:
                records.append(_validate_record(obj, dim, lineno))
            except SchemaError as exc:
                raise SchemaError(f"{path}: {exc}") from None
    if dim is None:
        raise SchemaError(f"{path}: empty file, missing header line")
    try:
        return Dataset(dim=dim, records=records, provenance=provenance)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write features-v1 JSONL. Floats use shortest round-trip decimals."""
    path = Path(path)
    header: dict = {"schema": FEATURES_SCHEMA, "dim": dataset.dim}
    if dataset.provenance:
        header["provenance"] = dataset.provenance
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records:
            obj: dict = {
                "id": rec.id,
                "split": rec.split,
                "embedding": [float(v) for v in rec.embedding],
                "labels": list(rec.labels),
            }
            if rec.confidence is not None:
                obj["confidence"] = list(rec.confidence)
            fh.write(json.dumps(obj) + "\n")


def split_view(dataset: Dataset, split: str) -> list[FeatureRecord]:
    """Order-stable filtered view; an empty split yields an empty list."""
    if split not in SPLITS:
        raise SchemaError(f"unknown split {split!r}, expected one of {SPLITS}")
    return [rec for rec in dataset.records if rec.split == split]
