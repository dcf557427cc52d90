"""The three inference strategies, producing per-criterion scores in [0, 1].

standard: sigmoid of the cosine similarity to one designated prompt per
criterion. posneg: two-way softmax between the designated positive and
negative similarities. multiclass: softmax over the 2^K subset prompts,
aggregated per criterion through the membership matrix. No temperature is
applied unless an explicit logit scale is passed (ablation flag).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import AdapterModel
from .datamodel import NUM_CRITERIA, FeatureRecord
from .errors import ParseError, SchemaError
from .numerics import DenseMatrix, add_row_vector, l2_normalize_rows, matmul, rowsum_ordered, transpose
from .prompts import (
    NUM_SUBSETS,
    MultiClassBank,
    PromptBank,
    criterion_membership,
    inference_text_features,
)

STRATEGIES = ("standard", "posneg", "multiclass")

_SCORE_KEYS = {"id", "strategy", "scores", "subset_probs"}


@dataclass
class StrategyScores:
    strategy: str
    ids: list[str]
    scores: np.ndarray  # N x K in [0, 1]
    subset_probs: np.ndarray | None = None  # N x 2^K, multiclass only


def _project_rows(model: AdapterModel, rows: np.ndarray, side: str) -> np.ndarray:
    """Adapter-project and unit-normalize (n, D) rows; same kernels as training."""
    w = model.w_img if side == "img" else model.w_txt
    b = model.b_img if side == "img" else model.b_txt
    m = matmul(DenseMatrix(rows), transpose(w))
    return l2_normalize_rows(add_row_vector(m, b)).array


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / rowsum_ordered(e)[:, None]


def infer_standard(
    model: AdapterModel, embedding: np.ndarray, t: np.ndarray, logit_scale: float = 1.0
) -> np.ndarray:
    """sigmoid(s(v, t_i)) per criterion; t is the K x D designated prompts."""
    sims = _similarities(model, embedding[None, :], t)[0]
    return _sigmoid(sims * logit_scale)


def infer_posneg(
    model: AdapterModel,
    embedding: np.ndarray,
    t_plus: np.ndarray,
    t_minus: np.ndarray,
    logit_scale: float = 1.0,
) -> np.ndarray:
    """p+_i from the two-way softmax over [s+_i, s-_i]."""
    s_plus = _similarities(model, embedding[None, :], t_plus)[0]
    s_minus = _similarities(model, embedding[None, :], t_minus)[0]
    pair = np.stack([s_plus, s_minus], axis=-1) * logit_scale
    return _softmax_last(pair)[:, 0]


def infer_multiclass(
    model: AdapterModel,
    embedding: np.ndarray,
    subset_bank: MultiClassBank,
    logit_scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-criterion scores plus the 2^K subset probabilities."""
    sims = _similarities(model, embedding[None, :], subset_bank.embeddings())
    probs = _softmax_last(sims * logit_scale)
    membership = criterion_membership(subset_bank)
    agg = matmul(DenseMatrix(membership), transpose(DenseMatrix(probs))).array.T
    return agg[0], probs[0]


def _similarities(model: AdapterModel, image_rows: np.ndarray, prompt_rows: np.ndarray) -> np.ndarray:
    v = _project_rows(model, image_rows, "img")
    t = _project_rows(model, prompt_rows, "txt")
    return matmul(DenseMatrix(v), transpose(DenseMatrix(t))).array


def score_records(
    model: AdapterModel,
    records: list[FeatureRecord],
    bank: PromptBank,
    strategy: str,
    subset_bank: MultiClassBank | None = None,
    logit_scale: float = 1.0,
) -> StrategyScores:
    """Apply one strategy to every record, in record order."""
    if strategy not in STRATEGIES:
        raise SchemaError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    ids = [rec.id for rec in records]
    if not records:
        return StrategyScores(strategy=strategy, ids=ids, scores=np.zeros((0, NUM_CRITERIA)))
    images = np.stack([rec.embedding for rec in records])

    if strategy == "multiclass":
        if subset_bank is None:
            raise SchemaError("multiclass inference needs a subset bank")
        sims = _similarities(model, images, subset_bank.embeddings())
        probs = _softmax_last(sims * logit_scale)
        membership = criterion_membership(subset_bank)
        scores = matmul(DenseMatrix(probs), transpose(DenseMatrix(membership))).array
        return StrategyScores(strategy=strategy, ids=ids, scores=scores, subset_probs=probs)

    t, t_plus, t_minus = inference_text_features(bank)
    if strategy == "standard":
        sims = _similarities(model, images, t)
        return StrategyScores(strategy=strategy, ids=ids, scores=_sigmoid(sims * logit_scale))

    s_plus = _similarities(model, images, t_plus)
    s_minus = _similarities(model, images, t_minus)
    pair = np.stack([s_plus, s_minus], axis=-1) * logit_scale
    shifted = pair - pair.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    scores = e[..., 0] / (e[..., 0] + e[..., 1])
    return StrategyScores(strategy=strategy, ids=ids, scores=scores)


def infer_zero_shot(
    records: list[FeatureRecord],
    bank: PromptBank,
    strategy: str,
    subset_bank: MultiClassBank | None = None,
    logit_scale: float = 1.0,
) -> StrategyScores:
    """Strategy inference with identity adapters (no training, no checkpoint)."""
    model = AdapterModel.identity(bank.dim)
    return score_records(model, records, bank, strategy, subset_bank, logit_scale)


def save_scores(scores: StrategyScores, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i, rid in enumerate(scores.ids):
            obj: dict = {
                "id": rid,
                "strategy": scores.strategy,
                "scores": [float(v) for v in scores.scores[i]],
            }
            if scores.subset_probs is not None:
                obj["subset_probs"] = [float(v) for v in scores.subset_probs[i]]
            fh.write(json.dumps(obj) + "\n")


def load_scores(path: str | Path) -> StrategyScores:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"scores file not found: {path}")
    ids: list[str] = []
    rows: list[list[float]] = []
    probs: list[list[float]] = []
    strategy = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            unknown = set(obj) - _SCORE_KEYS
            if unknown:
                raise SchemaError(f"{path}: line {lineno}: unknown keys {sorted(unknown)}")
            for key in ("id", "strategy", "scores"):
                if key not in obj:
                    raise SchemaError(f"{path}: line {lineno}: missing key {key!r}")
            if strategy is None:
                strategy = obj["strategy"]
                if strategy not in STRATEGIES:
                    raise SchemaError(f"{path}: line {lineno}: unknown strategy {strategy!r}")
            elif obj["strategy"] != strategy:
                raise SchemaError(f"{path}: line {lineno}: mixed strategies in one file")
            vals = obj["scores"]
            if not isinstance(vals, list) or len(vals) != NUM_CRITERIA:
                raise SchemaError(f"{path}: line {lineno}: scores must hold {NUM_CRITERIA} floats")
            ids.append(obj["id"])
            rows.append([float(v) for v in vals])
            if strategy == "multiclass":
                sp = obj.get("subset_probs")
                if not isinstance(sp, list) or len(sp) != NUM_SUBSETS:
                    raise SchemaError(
                        f"{path}: line {lineno}: multiclass scores need {NUM_SUBSETS} subset_probs"
                    )
                probs.append([float(v) for v in sp])
    if strategy is None:
        raise SchemaError(f"{path}: empty scores file")
    return StrategyScores(
        strategy=strategy,
        ids=ids,
        scores=np.array(rows),
        subset_probs=np.array(probs) if probs else None,
    )
