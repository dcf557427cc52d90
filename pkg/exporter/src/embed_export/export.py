"""Run frozen encoders over a manifest and emit the three JSONL schemas.

The output files follow the consumer's wire formats exactly: features-v1,
prompts-v1 and subsets-v1 headers with strict record keys. Floats are
written with shortest round-trip precision. Record order follows the
manifest / text-file order.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import build_text_encoder, build_vision_encoder
from .errors import ConfigError, ExportError, SchemaError
from .manifest import NUM_CRITERIA, ManifestRow, read_manifest

NUM_SUBSETS = 2**NUM_CRITERIA
POLARITIES = ("positive", "negative")
MODES = ("fixed_class", "text_augmented")


@dataclass
class ExportConfig:
    vision_encoder: str = "toy"
    text_encoder: str = "hashed"
    dim: int = 32
    batch_size: int = 8
    seed: int = 0
    vision_weights: str | None = None
    mode: str = "text_augmented"

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")


def _check_dim(embs: np.ndarray, dim: int, what: str) -> None:
    if embs.ndim != 2 or embs.shape[1] != dim:
        raise ExportError(f"{what}: encoder produced shape {embs.shape}, expected (*, {dim})")
    if not np.isfinite(embs).all():
        raise ExportError(f"{what}: encoder produced non-finite values")


def export_features(
    manifest_path: str | Path,
    out_path: str | Path,
    config: ExportConfig,
    skip_unreadable: bool = False,
    log=sys.stderr,
) -> int:
    """Encode every manifest image, one features-v1 record per row."""
    rows = read_manifest(manifest_path)
    encoder = build_vision_encoder(
        config.vision_encoder, config.dim, config.seed, config.vision_weights
    )
    out_path = Path(out_path)

    readable: list[tuple[ManifestRow, Image.Image]] = []
    for row in rows:
        try:
            with Image.open(row.path) as img:
                readable.append((row, img.convert("RGB")))
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            if not skip_unreadable:
                raise ExportError(f"unreadable image for id {row.id!r}: {row.path} ({exc})") from exc
            print(f"embed-export: skipping unreadable image {row.path} (id {row.id})", file=log)

    header = {
        "schema": "features-v1",
        "dim": config.dim,
        "provenance": f"embed-export vision={config.vision_encoder} seed={config.seed}",
    }
    written = 0
    with out_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for start in range(0, len(readable), config.batch_size):
            chunk = readable[start : start + config.batch_size]
            embs = encoder.encode_batch([img for _, img in chunk])
            _check_dim(embs, config.dim, f"features batch at {start}")
            for (row, _), emb in zip(chunk, embs):
                obj: dict = {
                    "id": row.id,
                    "split": row.split,
                    "embedding": [float(v) for v in emb],
                    "labels": list(row.labels),
                }
                if row.confidence is not None:
                    obj["confidence"] = list(row.confidence)
                fh.write(json.dumps(obj) + "\n")
                written += 1
    return written


def load_prompt_texts(path: str | Path) -> tuple[list[dict], list[dict]]:
    """Parse the prompt text file into (criteria entries, subset entries)."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"prompt text file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict) or "criteria" not in data:
        raise SchemaError(f"{path}: expected an object with a 'criteria' list")
    criteria = data["criteria"]
    subsets = data.get("subsets", [])
    if not isinstance(criteria, list) or not criteria:
        raise SchemaError(f"{path}: 'criteria' must be a non-empty list")
    for i, obj in enumerate(criteria):
        where = f"{path}: criteria[{i}]"
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: expected an object")
        if "polarity" not in obj:
            raise SchemaError(f"{where}: missing polarity annotation")
        if obj["polarity"] not in POLARITIES:
            raise SchemaError(f"{where}: polarity must be one of {POLARITIES}")
        if not isinstance(obj.get("criterion"), int) or not 1 <= obj["criterion"] <= NUM_CRITERIA:
            raise SchemaError(f"{where}: criterion must be an integer in 1..{NUM_CRITERIA}")
        if not isinstance(obj.get("text"), str) or not obj["text"].strip():
            raise SchemaError(f"{where}: text must be a non-empty string")
    seen_masks = set()
    for i, obj in enumerate(subsets):
        where = f"{path}: subsets[{i}]"
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: expected an object")
        subset = obj.get("subset")
        if not isinstance(subset, list) or not all(
            isinstance(v, int) and 1 <= v <= NUM_CRITERIA for v in subset
        ):
            raise SchemaError(f"{where}: subset must be a list of indices in 1..{NUM_CRITERIA}")
        if len(set(subset)) != len(subset):
            raise SchemaError(f"{where}: subset has repeated indices")
        if not isinstance(obj.get("text"), str) or not obj["text"].strip():
            raise SchemaError(f"{where}: text must be a non-empty string")
        mask = sum(1 << (v - 1) for v in subset)
        if mask in seen_masks:
            raise SchemaError(f"{where}: duplicate subset {sorted(subset)}")
        seen_masks.add(mask)
    return criteria, subsets


def export_prompts(
    texts_path: str | Path,
    out_prompts: str | Path,
    config: ExportConfig,
    out_subsets: str | Path | None = None,
) -> tuple[int, int]:
    """Encode prompt texts into prompts-v1 (and optionally subsets-v1)."""
    criteria, subsets = load_prompt_texts(texts_path)
    if out_subsets is not None and len(subsets) != NUM_SUBSETS:
        raise SchemaError(
            f"subset export needs all {NUM_SUBSETS} criterion subsets, got {len(subsets)}"
        )
    encoder = build_text_encoder(config.text_encoder, config.dim, config.seed)

    embs = encoder.encode_batch([obj["text"] for obj in criteria])
    _check_dim(embs, config.dim, "prompt texts")
    out_prompts = Path(out_prompts)
    with out_prompts.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": "prompts-v1", "dim": config.dim, "mode": config.mode}) + "\n")
        for obj, emb in zip(criteria, embs):
            fh.write(
                json.dumps(
                    {
                        "criterion": obj["criterion"],
                        "polarity": obj["polarity"],
                        "text": obj["text"],
                        "embedding": [float(v) for v in emb],
                        "designated": bool(obj.get("designated", False)),
                    }
                )
                + "\n"
            )

    n_subsets = 0
    if out_subsets is not None:
        sub_embs = encoder.encode_batch([obj["text"] for obj in subsets])
        _check_dim(sub_embs, config.dim, "subset texts")
        with Path(out_subsets).open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"schema": "subsets-v1", "dim": config.dim}) + "\n")
            for obj, emb in zip(subsets, sub_embs):
                fh.write(
                    json.dumps(
                        {
                            "subset": sorted(obj["subset"]),
                            "text": obj["text"],
                            "embedding": [float(v) for v in emb],
                        }
                    )
                    + "\n"
                )
                n_subsets += 1
    return len(criteria), n_subsets


def example_prompts_path() -> Path:
    return Path(__file__).parent / "data" / "example_prompts.json"
