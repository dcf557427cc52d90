"""Adapter projections, batch similarity distributions and the contrastive loss.

Image and text embeddings pass through small linear adapters, are unit
normalized, and their pairwise cosine similarities are scaled by exp(theta)
(theta learnable, so the effective temperature stays positive) before a
row softmax in both directions. The loss is the row-mean KL divergence from
the normalized ground-truth match distribution to each predicted
distribution, averaged over the two directions and summed over criteria.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import NUM_CRITERIA
from .errors import DegenerateBatchError, NumericError, ShapeError
from .numerics import (
    DenseMatrix,
    GradTape,
    add_row_vector,
    kl_mean_rows,
    l2_normalize_rows,
    matmul,
    rowsum_ordered,
    scale_by_exp,
    softmax_rows,
    transpose,
    weighted_sum_scalars,
)

THETA_INIT = 2.6593

PARAM_NAMES = ("w_img", "b_img", "w_txt", "b_txt", "theta_temp")


@dataclass
class AdapterModel:
    """Trainable linear maps per modality plus the temperature parameter."""

    w_img: DenseMatrix  # D x D
    b_img: DenseMatrix  # 1 x D
    w_txt: DenseMatrix  # D x D
    b_txt: DenseMatrix  # 1 x D
    theta_temp: DenseMatrix  # 1 x 1

    @classmethod
    def identity(cls, dim: int, theta: float = THETA_INIT) -> "AdapterModel":
        return cls(
            w_img=DenseMatrix.identity(dim),
            b_img=DenseMatrix.zeros(1, dim),
            w_txt=DenseMatrix.identity(dim),
            b_txt=DenseMatrix.zeros(1, dim),
            theta_temp=DenseMatrix.scalar(theta),
        )

    @property
    def dim(self) -> int:
        return self.w_img.rows

    def params(self) -> dict[str, DenseMatrix]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def to_jsonable(self) -> dict:
        return {name: getattr(self, name).array.tolist() for name in PARAM_NAMES}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "AdapterModel":
        return cls(**{name: DenseMatrix(obj[name]) for name in PARAM_NAMES})


@dataclass
class CriterionBatch:
    """Sampled prompts for one criterion: embeddings row-aligned with images."""

    prompt_embs: DenseMatrix  # N x D
    prompt_labels: np.ndarray  # N in {0,1}: polarity of each sampled prompt


@dataclass
class SimilarityBatch:
    """Per-criterion similarity matrices, softmax distributions and targets."""

    sims: list[DenseMatrix]  # K of N x N cosine similarities
    img_to_txt: list[DenseMatrix]  # K of N x N row-stochastic
    txt_to_img: list[DenseMatrix]  # K of N x N row-stochastic
    match: list[np.ndarray]  # K of N x N binary ground-truth matches


def _project_side(
    embs: DenseMatrix, weight: DenseMatrix, bias: DenseMatrix, tape: GradTape | None
) -> DenseMatrix:
    return l2_normalize_rows(add_row_vector(matmul(embs, transpose(weight, tape), tape), bias, tape), tape)


def project(
    model: AdapterModel,
    image_embs: DenseMatrix,
    prompt_embs: list[DenseMatrix],
    tape: GradTape | None = None,
) -> tuple[DenseMatrix, list[DenseMatrix]]:
    """Adapter-project and unit-normalize both modalities.

    V = normalize(image_embs @ w_img^T + b_img); one T_i per criterion with
    the text adapter. All output rows have unit norm.
    """
    if image_embs.cols != model.dim:
        raise ShapeError(f"image embeddings have dim {image_embs.cols}, model expects {model.dim}")
    v = _project_side(image_embs, model.w_img, model.b_img, tape)
    ts = []
    for embs in prompt_embs:
        if embs.cols != model.dim:
            raise ShapeError(f"prompt embeddings have dim {embs.cols}, model expects {model.dim}")
        ts.append(_project_side(embs, model.w_txt, model.b_txt, tape))
    return v, ts


def similarity_matrix(v: DenseMatrix, t: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Cosine similarities S = V @ T^T for unit-row inputs."""
    return matmul(v, transpose(t, tape), tape)


def batch_distributions(
    sims: DenseMatrix, theta_temp: DenseMatrix, tape: GradTape | None = None
) -> tuple[DenseMatrix, DenseMatrix]:
    """Row softmax of exp(theta)-scaled scores, in both directions."""
    p_img2txt = softmax_rows(scale_by_exp(sims, theta_temp, tape), tape)
    p_txt2img = softmax_rows(scale_by_exp(transpose(sims, tape), theta_temp, tape), tape)
    return p_img2txt, p_txt2img


def match_matrix(row_labels: np.ndarray, col_labels: np.ndarray) -> np.ndarray:
    """Binary matrix: entry (j, k) is 1 iff the two binary labels agree."""
    rows = np.asarray(row_labels).astype(np.int64)
    cols = np.asarray(col_labels).astype(np.int64)
    return (rows[:, None] == cols[None, :]).astype(np.float64)


def target_matrix(row_labels: np.ndarray, col_labels: np.ndarray) -> np.ndarray:
    """Row-normalized match distribution, uniform over matching columns.

    The last matching entry of each row absorbs the rounding of 1/c so the
    left-to-right row sum is exactly 1.0.
    """
    raw = match_matrix(row_labels, col_labels)
    out = np.zeros_like(raw)
    for j in range(raw.shape[0]):
        cols = np.flatnonzero(raw[j])
        if cols.size == 0:
            raise DegenerateBatchError(f"row {j} has no matching column; batch is degenerate")
        out[j, cols] = 1.0 / cols.size
        partial = 0.0
        for v in out[j, : cols[-1]]:
            partial += v
        out[j, cols[-1]] = 1.0 - partial
    return out


def kl_contrastive_loss(
    predicted: DenseMatrix, target: np.ndarray, tape: GradTape | None = None
) -> DenseMatrix:
    """Row-mean KL(target || predicted), both arguments row-stochastic."""
    q = np.asarray(target, dtype=np.float64)
    if q.ndim != 2 or predicted.array.shape != q.shape:
        raise ShapeError(f"kl_contrastive_loss: shapes differ {predicted.array.shape} vs {q.shape}")
    for name, arr in (("predicted", predicted.array), ("target", q)):
        sums = rowsum_ordered(arr)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise NumericError(f"kl_contrastive_loss: {name} rows must sum to 1 within 1e-6")
    return kl_mean_rows(predicted, q, tape)


def total_loss(
    model: AdapterModel,
    image_embs: DenseMatrix,
    image_labels: np.ndarray,
    criterion_batches: list[CriterionBatch],
    tape: GradTape | None = None,
) -> tuple[DenseMatrix, SimilarityBatch]:
    """Symmetric contrastive loss summed over criteria.

    image_labels is N x K; criterion_batches holds the sampled prompt
    embeddings and their polarity labels, one entry per criterion. Criterion
    terms are accumulated in fixed order for bit reproducibility.
    """
    labels = np.asarray(image_labels)
    n = image_embs.rows
    if labels.shape != (n, NUM_CRITERIA):
        raise ShapeError(f"image_labels must be {n}x{NUM_CRITERIA}, got {labels.shape}")
    if len(criterion_batches) != NUM_CRITERIA:
        raise ShapeError(f"expected {NUM_CRITERIA} criterion batches, got {len(criterion_batches)}")

    v, ts = project(model, image_embs, [cb.prompt_embs for cb in criterion_batches], tape)
    terms: list[DenseMatrix] = []
    batch = SimilarityBatch(sims=[], img_to_txt=[], txt_to_img=[], match=[])
    for i, cb in enumerate(criterion_batches):
        sims = similarity_matrix(v, ts[i], tape)
        p_img2txt, p_txt2img = batch_distributions(sims, model.theta_temp, tape)
        q_img2txt = target_matrix(labels[:, i], cb.prompt_labels)
        q_txt2img = target_matrix(cb.prompt_labels, labels[:, i])
        terms.append(kl_contrastive_loss(p_img2txt, q_img2txt, tape))
        terms.append(kl_contrastive_loss(p_txt2img, q_txt2img, tape))
        batch.sims.append(sims)
        batch.img_to_txt.append(p_img2txt)
        batch.txt_to_img.append(p_txt2img)
        batch.match.append(match_matrix(labels[:, i], cb.prompt_labels))
    loss = weighted_sum_scalars(terms, [0.5] * len(terms), tape)
    return loss, batch
