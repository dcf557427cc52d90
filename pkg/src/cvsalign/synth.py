"""Synthetic embeddings with controllable class structure, plus null oracles.

Records live at signed combinations of K orthonormal prototype directions
(+mu_i when criterion i holds, -mu_i when it does not) plus Gaussian noise,
prompt embeddings sit at +/-mu_i with a small jitter, and subset prompts at
the exact signed prototype sums. At sigma 0 every inference strategy
separates the labels perfectly; at large sigma scores are pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import NUM_CRITERIA, Dataset, FeatureRecord
from .errors import ConfigError, NumericError
from .metrics import average_precision
from .prompts import (
    CRITERION_TEXTS,
    NEGATIVE_TEXTS,
    NUM_SUBSETS,
    MultiClassBank,
    PromptBank,
    PromptEntry,
    SubsetPrompt,
    subset_text,
)

PROMPT_JITTER = 0.02
PARAPHRASES_PER_POLARITY = 4

_POSITIVE_WRAPPERS = (
    "{}",
    "Seeing {} in the image",
    "A laparoscopic view showing {}",
    "An endoscopic frame where {} is clearly visible",
)
_NEGATIVE_WRAPPERS = (
    "{}",
    "{} anywhere in the view",
    "An unremarkable frame; {}",
    "Image without the target anatomy: {}",
)


@dataclass
class SynthConfig:
    dim: int = 16
    n_train: int = 600
    n_val: int = 200
    n_test: int = 200
    prevalence: tuple[float, float, float] = (0.5, 0.5, 0.5)
    noise_sigma: float = 0.1
    seed: int = 0
    mode: str = "text_augmented"

    def __post_init__(self) -> None:
        if self.dim < NUM_CRITERIA:
            raise ConfigError(f"dim must be >= {NUM_CRITERIA}, got {self.dim}")
        if len(self.prevalence) != NUM_CRITERIA:
            raise ConfigError(f"prevalence needs {NUM_CRITERIA} values, got {len(self.prevalence)}")
        for p in self.prevalence:
            if not 0.0 < p < 1.0:
                raise ConfigError(f"prevalence values must lie in (0, 1), got {p}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    def provenance(self) -> str:
        prev = ",".join(repr(p) for p in self.prevalence)
        return (
            f"synth dim={self.dim} n={self.n_train}/{self.n_val}/{self.n_test} "
            f"prevalence={prev} sigma={self.noise_sigma!r} seed={self.seed}"
        )


def _orthonormal_directions(dim: int, rng: np.random.Generator) -> np.ndarray:
    """(K, dim) rows of a random orthonormal frame."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))[None, :]
    return q[:, :NUM_CRITERIA].T.copy()


def generate(config: SynthConfig) -> tuple[Dataset, PromptBank, MultiClassBank]:
    """Build one dataset plus matching prompt and subset banks."""
    rng = np.random.default_rng(config.seed)
    mu = _orthonormal_directions(config.dim, rng)

    n_para = 1 if config.mode == "fixed_class" else PARAPHRASES_PER_POLARITY
    entries: list[PromptEntry] = []
    for i in range(NUM_CRITERIA):
        for polarity, center, texts in (
            ("positive", mu[i], _POSITIVE_WRAPPERS),
            ("negative", -mu[i], _NEGATIVE_WRAPPERS),
        ):
            base = CRITERION_TEXTS[i] if polarity == "positive" else NEGATIVE_TEXTS[i]
            for k in range(n_para):
                emb = center + PROMPT_JITTER * rng.standard_normal(config.dim)
                entries.append(
                    PromptEntry(
                        criterion=i + 1,
                        polarity=polarity,
                        text=texts[k % len(texts)].format(base),
                        embedding=emb,
                        designated=(k == 0),
                    )
                )
    bank = PromptBank(dim=config.dim, entries=entries, mode=config.mode)

    subsets = []
    for mask in range(NUM_SUBSETS):
        members = frozenset(i + 1 for i in range(NUM_CRITERIA) if mask & (1 << i))
        signs = np.array([1.0 if (i + 1) in members else -1.0 for i in range(NUM_CRITERIA)])
        emb = (signs[:, None] * mu).sum(axis=0)
        subsets.append(SubsetPrompt(subset=members, text=subset_text(members), embedding=emb))
    subset_bank = MultiClassBank(dim=config.dim, prompts=subsets)

    records: list[FeatureRecord] = []
    prevalence = np.array(config.prevalence)
    for split, count in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        for j in range(count):
            labels = (rng.random(NUM_CRITERIA) < prevalence).astype(int)
            signs = 2.0 * labels - 1.0
            emb = (signs[:, None] * mu).sum(axis=0)
            if config.noise_sigma > 0.0:
                emb = emb + config.noise_sigma * rng.standard_normal(config.dim)
            records.append(
                FeatureRecord(
                    id=f"{split}-{j:05d}",
                    split=split,
                    embedding=emb,
                    labels=tuple(int(v) for v in labels),
                )
            )
    dataset = Dataset(dim=config.dim, records=records, provenance=config.provenance())
    return dataset, bank, subset_bank


def null_ap_distribution(
    n: int, prevalence: float, trials: int, seed: int = 0
) -> tuple[float, float | None]:
    """Mean and sample std of AP when scores are uniform random.

    The label vector has round(prevalence * n) positives; each trial draws
    fresh scores. With a single trial the std is undefined (None).
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    n_pos = round(prevalence * n)
    if not 0 < n_pos <= n:
        raise NumericError(f"prevalence {prevalence} with n={n} leaves no positive labels")
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng = np.random.default_rng(seed)
    values = [average_precision(rng.random(n), labels) for _ in range(trials)]
    mean = sum(values) / trials
    if trials == 1:
        return mean, None
    var = sum((v - mean) ** 2 for v in values) / (trials - 1)
    return mean, float(np.sqrt(var))
