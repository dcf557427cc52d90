"""Prompt banks: criterion texts with frozen embeddings, and their files.

Training selects one prompt per image and criterion whose polarity mirrors
the binary label (positive prompt iff the criterion is present); inference
uses the designated clinician entries. The multi-class bank holds one prompt
per criterion subset (all 2^K of them, empty set included), kept in canonical
bitmask order: subset {i} contributes bit 2^(i-1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import NUM_CRITERIA
from .errors import ConfigError, ParseError, SchemaError

PROMPTS_SCHEMA = "prompts-v1"
SUBSETS_SCHEMA = "subsets-v1"
MODES = ("fixed_class", "text_augmented")
POLARITIES = ("positive", "negative")
NUM_SUBSETS = 2**NUM_CRITERIA

# Strasberg's three criteria, used as the bundled fixed-class positives.
CRITERION_TEXTS = (
    "the cystic duct and the cystic artery, connected to the gallbladder",
    "a hepatocystic triangle cleared from fat and connective tissues",
    "the lower part of the gallbladder separated from the liver bed",
)
NEGATIVE_TEXTS = (
    "A general medical image not showing the cystic duct or the cystic artery",
    "A general medical image not showing a cleared hepatocystic triangle",
    "A general medical image not showing the lower gallbladder separated from the liver bed",
)

_PROMPT_KEYS = {"criterion", "polarity", "text", "embedding", "designated"}
_SUBSET_KEYS = {"subset", "text", "embedding"}


@dataclass
class PromptEntry:
    criterion: int  # 1..NUM_CRITERIA
    polarity: str
    text: str
    embedding: np.ndarray
    designated: bool = False


@dataclass
class SubsetPrompt:
    subset: frozenset[int]
    text: str
    embedding: np.ndarray

    @property
    def bitmask(self) -> int:
        return sum(1 << (i - 1) for i in self.subset)


def subset_text(subset: frozenset[int]) -> str:
    """Default wording for a criterion-subset prompt."""
    if not subset:
        return "A laparoscopic image with none of the criteria achieved"
    parts = [CRITERION_TEXTS[i - 1] for i in sorted(subset)]
    return "A laparoscopic image showing " + "; and ".join(parts)


class PromptBank:
    """Per-criterion positive/negative prompt entries with frozen embeddings."""

    def __init__(self, dim: int, entries: list[PromptEntry], mode: str) -> None:
        if mode not in MODES:
            raise SchemaError(f"unknown prompt bank mode {mode!r}")
        self.dim = dim
        self.entries = entries
        self.mode = mode
        self._by_slot: dict[tuple[int, str], list[PromptEntry]] = {}
        self._designated: dict[tuple[int, str], PromptEntry] = {}
        for entry in entries:
            if not 1 <= entry.criterion <= NUM_CRITERIA:
                raise SchemaError(f"prompt criterion must be in 1..{NUM_CRITERIA}, got {entry.criterion}")
            if entry.polarity not in POLARITIES:
                raise SchemaError(f"prompt polarity must be one of {POLARITIES}, got {entry.polarity!r}")
            if not entry.text:
                raise SchemaError("prompt text must be non-empty")
            if entry.embedding.shape != (dim,):
                raise SchemaError(
                    f"prompt embedding for criterion {entry.criterion} has length "
                    f"{entry.embedding.shape[0]}, expected {dim}"
                )
            slot = (entry.criterion, entry.polarity)
            self._by_slot.setdefault(slot, []).append(entry)
            if entry.designated:
                if slot in self._designated:
                    raise SchemaError(
                        f"duplicate designated {entry.polarity} prompt for criterion C{entry.criterion}"
                    )
                self._designated[slot] = entry
        for criterion in range(1, NUM_CRITERIA + 1):
            for polarity in POLARITIES:
                candidates = self._by_slot.get((criterion, polarity), [])
                if not candidates:
                    raise SchemaError(f"criterion C{criterion} has no {polarity} prompt")
                if mode == "fixed_class" and len(candidates) != 1:
                    raise SchemaError(
                        f"fixed_class bank needs exactly one {polarity} prompt for C{criterion}, "
                        f"got {len(candidates)}"
                    )
        if mode == "fixed_class":
            # The unique entries double as the inference designations.
            for slot, candidates in self._by_slot.items():
                self._designated.setdefault(slot, candidates[0])

    def candidates(self, criterion: int, polarity: str) -> list[PromptEntry]:
        return self._by_slot[(criterion, polarity)]

    def designated(self, criterion: int, polarity: str) -> PromptEntry | None:
        return self._designated.get((criterion, polarity))


class MultiClassBank:
    """The 2^K subset prompts used by multi-class inference."""

    def __init__(self, dim: int, prompts: list[SubsetPrompt]) -> None:
        self.dim = dim
        seen: dict[int, SubsetPrompt] = {}
        for prompt in prompts:
            if not prompt.subset <= set(range(1, NUM_CRITERIA + 1)):
                raise SchemaError(f"subset {sorted(prompt.subset)} has indices outside 1..{NUM_CRITERIA}")
            if not prompt.text:
                raise SchemaError("subset prompt text must be non-empty")
            if prompt.embedding.shape != (dim,):
                raise SchemaError(
                    f"subset {sorted(prompt.subset)} embedding has length "
                    f"{prompt.embedding.shape[0]}, expected {dim}"
                )
            if prompt.bitmask in seen:
                raise SchemaError(f"duplicate subset {sorted(prompt.subset)}")
            seen[prompt.bitmask] = prompt
        if len(seen) != NUM_SUBSETS:
            missing = [m for m in range(NUM_SUBSETS) if m not in seen]
            raise SchemaError(f"multi-class bank must cover all {NUM_SUBSETS} subsets, missing masks {missing}")
        self.prompts = [seen[mask] for mask in range(NUM_SUBSETS)]

    def embeddings(self) -> np.ndarray:
        """(2^K, dim) matrix in canonical bitmask order."""
        return np.stack([p.embedding for p in self.prompts])


def sample_training_prompt(
    bank: PromptBank, criterion: int, label: int, rng: np.random.Generator
) -> PromptEntry:
    """Uniformly sample a prompt of the polarity selected by the label."""
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label!r}")
    polarity = "positive" if label == 1 else "negative"
    candidates = bank.candidates(criterion, polarity)
    if len(candidates) == 1:
        return candidates[0]
    return candidates[int(rng.integers(len(candidates)))]


def inference_text_features(bank: PromptBank) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Designated inference embeddings in criterion order.

    Returns (T, T_plus, T_minus), each (K, dim); T is the designated positive
    description per criterion, reused by standard inference.
    """
    plus, minus = [], []
    for criterion in range(1, NUM_CRITERIA + 1):
        pos = bank.designated(criterion, "positive")
        if pos is None:
            raise ConfigError(f"no designated positive inference prompt for criterion C{criterion}")
        neg = bank.designated(criterion, "negative")
        if neg is None:
            raise ConfigError(f"no designated negative inference prompt for criterion C{criterion}")
        plus.append(pos.embedding)
        minus.append(neg.embedding)
    t_plus = np.stack(plus)
    t_minus = np.stack(minus)
    return t_plus, t_plus, t_minus


def criterion_membership(bank: MultiClassBank) -> np.ndarray:
    """K x 2^K binary matrix; M[i-1, j] = 1 iff subset j includes criterion i."""
    m = np.zeros((NUM_CRITERIA, NUM_SUBSETS))
    for j, prompt in enumerate(bank.prompts):
        for i in prompt.subset:
            m[i - 1, j] = 1.0
    return m


def _load_jsonl(path: Path) -> list[tuple[int, dict]]:
    if not path.exists():
        raise SchemaError(f"prompt file not found: {path}")
    rows = []
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
            rows.append((lineno, obj))
    if not rows:
        raise SchemaError(f"{path}: empty file, missing header line")
    return rows


def _embedding_from(obj: dict, dim: int, where: str) -> np.ndarray:
    emb = obj.get("embedding")
    if not isinstance(emb, list) or len(emb) != dim:
        raise SchemaError(f"{where}: embedding must be a list of {dim} numbers")
    arr = np.array(emb, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise SchemaError(f"{where}: embedding has non-finite entries")
    return arr


def load_prompt_bank(path: str | Path) -> PromptBank:
    path = Path(path)
    rows = _load_jsonl(path)
    lineno, header = rows[0]
    if header.get("schema") != PROMPTS_SCHEMA or set(header) - {"schema", "dim", "mode"}:
        raise SchemaError(f"{path}: line {lineno}: expected header with schema '{PROMPTS_SCHEMA}'")
    if not isinstance(header.get("dim"), int) or header["dim"] < 1:
        raise SchemaError(f"{path}: header dim must be a positive integer")
    dim = header["dim"]
    mode = header.get("mode")
    if mode not in MODES:
        raise SchemaError(f"{path}: header mode must be one of {MODES}, got {mode!r}")
    entries = []
    for lineno, obj in rows[1:]:
        where = f"{path}: line {lineno}"
        unknown = set(obj) - _PROMPT_KEYS
        if unknown:
            raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
        for key in ("criterion", "polarity", "text", "embedding"):
            if key not in obj:
                raise SchemaError(f"{where}: missing key {key!r}")
        if not isinstance(obj["criterion"], int):
            raise SchemaError(f"{where}: criterion must be an integer")
        if not isinstance(obj["text"], str):
            raise SchemaError(f"{where}: text must be a string")
        designated = obj.get("designated", False)
        if not isinstance(designated, bool):
            raise SchemaError(f"{where}: designated must be a boolean")
        entries.append(
            PromptEntry(
                criterion=obj["criterion"],
                polarity=obj["polarity"],
                text=obj["text"],
                embedding=_embedding_from(obj, dim, where),
                designated=designated,
            )
        )
    try:
        return PromptBank(dim=dim, entries=entries, mode=mode)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def save_prompt_bank(bank: PromptBank, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": PROMPTS_SCHEMA, "dim": bank.dim, "mode": bank.mode}) + "\n")
        for entry in bank.entries:
            fh.write(
                json.dumps(
                    {
                        "criterion": entry.criterion,
                        "polarity": entry.polarity,
                        "text": entry.text,
                        "embedding": [float(v) for v in entry.embedding],
                        "designated": entry.designated,
                    }
                )
                + "\n"
            )


def load_subset_bank(path: str | Path) -> MultiClassBank:
    path = Path(path)
    rows = _load_jsonl(path)
    lineno, header = rows[0]
    if header.get("schema") != SUBSETS_SCHEMA or set(header) - {"schema", "dim"}:
        raise SchemaError(f"{path}: line {lineno}: expected header with schema '{SUBSETS_SCHEMA}'")
    if not isinstance(header.get("dim"), int) or header["dim"] < 1:
        raise SchemaError(f"{path}: header dim must be a positive integer")
    dim = header["dim"]
    prompts = []
    for lineno, obj in rows[1:]:
        where = f"{path}: line {lineno}"
        unknown = set(obj) - _SUBSET_KEYS
        if unknown:
            raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
        for key in ("subset", "text", "embedding"):
            if key not in obj:
                raise SchemaError(f"{where}: missing key {key!r}")
        subset = obj["subset"]
        if not isinstance(subset, list) or not all(isinstance(i, int) for i in subset):
            raise SchemaError(f"{where}: subset must be a list of criterion indices")
        if len(set(subset)) != len(subset):
            raise SchemaError(f"{where}: subset has repeated indices")
        if not isinstance(obj["text"], str):
            raise SchemaError(f"{where}: text must be a string")
        prompts.append(
            SubsetPrompt(
                subset=frozenset(subset),
                text=obj["text"],
                embedding=_embedding_from(obj, dim, where),
            )
        )
    try:
        return MultiClassBank(dim=dim, prompts=prompts)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from None


def save_subset_bank(bank: MultiClassBank, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SUBSETS_SCHEMA, "dim": bank.dim}) + "\n")
        for prompt in bank.prompts:
            fh.write(
                json.dumps(
                    {
                        "subset": sorted(prompt.subset),
                        "text": prompt.text,
                        "embedding": [float(v) for v in prompt.embedding],
                    }
                )
                + "\n"
            )
