"""Frame-level average precision per criterion and its mean.

AP is the mean of precision values at the ranks of positive items under
score-descending order; ties are broken by the stable original index so the
metric is deterministic and exactly reproducible by a quadratic oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import NUM_CRITERIA, FeatureRecord
from .errors import CoverageError, NumericError

CRITERION_NAMES = tuple(f"C{i}" for i in range(1, NUM_CRITERIA + 1))
REPORT_SCHEMA = "report-v1"


@dataclass
class EvalReport:
    strategy: str
    split: str
    ap: dict[str, float]  # per criterion name
    map: float
    counts: dict[str, dict[str, int]]  # per criterion: positives / negatives
    seed: int | None = None
    config_digest: str | None = None

    def to_jsonable(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "strategy": self.strategy,
            "split": self.split,
            "ap": self.ap,
            "map": self.map,
            "counts": self.counts,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "EvalReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise CoverageError(f"not an evaluation report (schema {obj.get('schema')!r})")
        return cls(
            strategy=obj["strategy"],
            split=obj["split"],
            ap={k: float(v) for k, v in obj["ap"].items()},
            map=float(obj["map"]),
            counts=obj["counts"],
            seed=obj.get("seed"),
            config_digest=obj.get("config_digest"),
        )

    def text_table(self) -> str:
        cols = ["mAP", *CRITERION_NAMES]
        values = [self.map, *(self.ap[name] for name in CRITERION_NAMES)]
        head = " ".join(f"{c:>8}" for c in cols)
        row = " ".join(f"{v:8.4f}" for v in values)
        return f"strategy={self.strategy} split={self.split}\n{head}\n{row}"


def average_precision(scores, labels) -> float:
    """AP of one criterion: mean precision at each positive's rank."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise NumericError(f"average_precision: scores and labels must be equal-length vectors")
    if not np.isfinite(s).all():
        raise NumericError("average_precision: scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise NumericError("average_precision: labels must be binary")
    positives = int(y.sum())
    if positives == 0:
        raise NumericError("average_precision is undefined with zero positive labels")
    order = np.argsort(-s, kind="stable")
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if y[idx] == 1:
            hits += 1
            precisions.append(hits / rank)
    # fsum makes the result independent of summation order, so an oracle may
    # visit the positives in any order and still match bit for bit.
    return math.fsum(precisions) / positives


def evaluate(
    ids: list[str],
    scores: np.ndarray,
    records: list[FeatureRecord],
    strategy: str,
    split: str,
    seed: int | None = None,
    config_digest: str | None = None,
    skip_undefined: bool = False,
) -> EvalReport:
    """Score a full split: per-criterion AP plus their mean.

    `scores` is len(ids) x K, row-aligned with `ids`. Every record of the
    split must be scored exactly once; anything else is a coverage error.
    By default a criterion with zero positives is a hard error; with
    `skip_undefined` it is excluded from the mean and reported as NaN.
    """
    by_id = {rid: row for rid, row in zip(ids, scores)}
    if len(by_id) != len(ids):
        dupes = sorted({rid for rid in ids if ids.count(rid) > 1})
        raise CoverageError(f"duplicate score ids {dupes}")
    record_ids = {rec.id for rec in records}
    missing = sorted(record_ids - set(by_id))
    if missing:
        raise CoverageError(f"no score for record id {missing[0]!r} ({len(missing)} missing)")
    extra = sorted(set(by_id) - record_ids)
    if extra:
        raise CoverageError(f"score for unknown record id {extra[0]!r} ({len(extra)} extra)")

    label_matrix = np.array([rec.labels for rec in records])
    score_matrix = np.array([by_id[rec.id] for rec in records])
    ap: dict[str, float] = {}
    counts: dict[str, dict[str, int]] = {}
    defined: list[float] = []
    for i, name in enumerate(CRITERION_NAMES):
        pos = int(label_matrix[:, i].sum())
        counts[name] = {"positives": pos, "negatives": len(records) - pos}
        if pos == 0 and skip_undefined:
            ap[name] = math.nan
            continue
        ap[name] = average_precision(score_matrix[:, i], label_matrix[:, i])
        defined.append(ap[name])
    if not defined:
        raise NumericError("no criterion has a defined AP")
    mean_ap = sum(defined) / len(defined)
    return EvalReport(
        strategy=strategy,
        split=split,
        ap=ap,
        map=mean_ap,
        counts=counts,
        seed=seed,
        config_digest=config_digest,
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_jsonable(), sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_jsonable(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Mean and sample std of mAP and per-criterion AP across runs."""
    if not reports:
        raise CoverageError("nothing to aggregate")

    def mean_std(values: list[float]) -> dict:
        mean = sum(values) / len(values)
        if len(values) < 2:
            return {"mean": mean, "std": None}
        var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
        return {"mean": mean, "std": math.sqrt(var)}

    out = {
        "runs": len(reports),
        "strategy": sorted({r.strategy for r in reports}),
        "map": mean_std([r.map for r in reports]),
    }
    for name in CRITERION_NAMES:
        out[name] = mean_std([r.ap[name] for r in reports])
    return out


def aggregate_table(agg: dict) -> str:
    cols = ["mAP", *CRITERION_NAMES]
    keys = ["map", *CRITERION_NAMES]
    head = " ".join(f"{c:>16}" for c in cols)
    cells = []
    for key in keys:
        mean = agg[key]["mean"]
        std = agg[key]["std"]
        cells.append(f"{mean:.4f}±{std:.4f}" if std is not None else f"{mean:.4f}")
    row = " ".join(f"{c:>16}" for c in cells)
    return f"runs={agg['runs']}\n{head}\n{row}"
