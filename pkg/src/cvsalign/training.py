"""Mini-batch training loop with Adam, cosine annealing and model selection.

Every source of randomness is derived from the config seed: the epoch
shuffle uses stream (seed, epoch) and prompt sampling uses (seed, epoch,
step), so a run is a pure function of (dataset, bank, config) and training
can resume from a checkpoint bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import THETA_INIT, AdapterModel, CriterionBatch, total_loss
from .datamodel import NUM_CRITERIA, Dataset, FeatureRecord, split_view
from .errors import ConfigError, NumericError, SchemaError
from .inference import score_records
from .metrics import average_precision
from .numerics import DenseMatrix, GradTape
from .prompts import PromptBank, sample_training_prompt

CHECKPOINT_SCHEMA = "checkpoint-v1"
SELECTION_METRIC = "val_map_standard"

_CONFIG_KEYS = {
    "batch_size",
    "epochs",
    "lr_adapters",
    "lr_temp",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "selection_metric",
}


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    lr_adapters: float = 1e-5
    lr_temp: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("batch_size", "epochs", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (in-batch negatives), got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("lr_adapters", "lr_temp"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ConfigError("adam_eps must be > 0")

    def to_jsonable(self) -> dict:
        out = {k: getattr(self, k) for k in sorted(_CONFIG_KEYS - {"selection_metric"})}
        out["selection_metric"] = SELECTION_METRIC
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "TrainConfig":
        if not isinstance(obj, dict):
            raise ConfigError("train config must be a JSON object")
        unknown = set(obj) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        metric = obj.get("selection_metric", SELECTION_METRIC)
        if metric != SELECTION_METRIC:
            raise ConfigError(f"selection_metric is fixed to {SELECTION_METRIC!r}, got {metric!r}")
        kwargs = {k: v for k, v in obj.items() if k != "selection_metric"}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_train_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"train config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    return TrainConfig.from_jsonable(obj)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, DenseMatrix]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.array) for k, p in params.items()},
            v={k: np.zeros_like(p.array) for k, p in params.items()},
        )

    def to_jsonable(self) -> dict:
        return {
            "step": self.step,
            "m": {k: v.tolist() for k, v in sorted(self.m.items())},
            "v": {k: v.tolist() for k, v in sorted(self.v.items())},
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "AdamState":
        return cls(
            step=int(obj["step"]),
            m={k: np.array(v, dtype=np.float64) for k, v in obj["m"].items()},
            v={k: np.array(v, dtype=np.float64) for k, v in obj["v"].items()},
        )


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at step == total_steps."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


def adam_step(
    params: dict[str, DenseMatrix],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lrs: dict[str, float],
    beta1: float,
    beta2: float,
    eps: float,
    where: str = "",
) -> None:
    """One bias-corrected Adam update, in place. `lrs` maps param name to lr."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}{where}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        lr = lrs[name]
        if lr == 0.0:
            continue
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name].array -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    model: AdapterModel
    epoch: int
    opt: AdamState
    rng: dict
    val_map: float

    def to_jsonable(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "model": self.model.to_jsonable(),
            "epoch": self.epoch,
            "opt": self.opt.to_jsonable(),
            "rng": self.rng,
            "val_map": self.val_map,
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "Checkpoint":
        if obj.get("schema") != CHECKPOINT_SCHEMA:
            raise SchemaError(f"not a checkpoint file (schema {obj.get('schema')!r})")
        return cls(
            model=AdapterModel.from_jsonable(obj["model"]),
            epoch=int(obj["epoch"]),
            opt=AdamState.from_jsonable(obj["opt"]),
            rng=dict(obj["rng"]),
            val_map=float(obj["val_map"]),
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(ckpt.to_jsonable(), sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"checkpoint file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc
    return Checkpoint.from_jsonable(obj)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]
    baseline_val_map: float


def _snapshot(model: AdapterModel, epoch: int, opt: AdamState, seed: int, val_map: float) -> Checkpoint:
    return Checkpoint(
        model=AdapterModel.from_jsonable(model.to_jsonable()),
        epoch=epoch,
        opt=AdamState.from_jsonable(opt.to_jsonable()),
        rng={"seed": seed, "next_epoch": epoch + 1},
        val_map=val_map,
    )


def _val_map(model: AdapterModel, val_records: list[FeatureRecord], bank: PromptBank) -> float:
    scores = score_records(model, val_records, bank, "standard")
    labels = np.array([rec.labels for rec in val_records])
    aps = [average_precision(scores.scores[:, i], labels[:, i]) for i in range(NUM_CRITERIA)]
    return sum(aps) / len(aps)


def _epoch_batches(n: int, batch_size: int) -> list[tuple[int, int]]:
    # Keep a short final batch only when it still has in-batch negatives.
    bounds = []
    start = 0
    while start < n:
        end = min(start + batch_size, n)
        if end - start >= 2:
            bounds.append((start, end))
        start = end
    return bounds


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return len(_epoch_batches(n_train, batch_size))


def train(
    dataset: Dataset,
    bank: PromptBank,
    config: TrainConfig,
    resume_from: Checkpoint | None = None,
    prior_best: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the full loop and return the best / last checkpoints and history.

    Per step: sample one prompt per image and criterion with the polarity of
    its label, build the contrastive batch, backprop the symmetric loss and
    take one Adam step (adapters and temperature in separate lr groups).
    After each epoch the model is scored on the validation split with
    standard inference; the checkpoint with the highest validation mAP wins,
    with the untrained model as the baseline candidate.

    `stop_after_epoch` interrupts the run early while keeping the lr
    schedule of the full config, so resuming from the returned last
    checkpoint with the same config reproduces the uninterrupted run
    bit-exactly.
    """
    train_records = split_view(dataset, "train")
    val_records = split_view(dataset, "val")
    if not train_records:
        raise ConfigError("training requires a nonempty train split")
    if not val_records:
        raise ConfigError("training requires a nonempty val split for model selection")
    if bank.dim != dataset.dim:
        raise SchemaError(f"prompt bank dim {bank.dim} does not match dataset dim {dataset.dim}")

    per_epoch = steps_per_epoch(len(train_records), config.batch_size)
    if per_epoch == 0:
        raise ConfigError(f"train split of {len(train_records)} records yields no usable batch")
    total_steps = config.epochs * per_epoch
    labels_all = np.array([rec.labels for rec in train_records])
    embs_all = np.stack([rec.embedding for rec in train_records])

    if resume_from is None:
        model = AdapterModel.identity(dataset.dim, THETA_INIT)
        opt = AdamState.zeros_like(model.params())
        start_epoch = 1
        baseline_val_map = _val_map(model, val_records, bank)
        best = _snapshot(model, 0, opt, config.seed, baseline_val_map)
    else:
        model = AdapterModel.from_jsonable(resume_from.model.to_jsonable())
        opt = AdamState.from_jsonable(resume_from.opt.to_jsonable())
        start_epoch = int(resume_from.rng["next_epoch"])
        if resume_from.rng.get("seed") != config.seed:
            raise ConfigError("checkpoint was trained with a different seed")
        baseline_val_map = resume_from.val_map
        best = prior_best if prior_best is not None else resume_from
    best_map = best.val_map

    final_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    history: list[dict] = []
    params = model.params()
    for epoch in range(start_epoch, final_epoch + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_records))
        loss_sum = 0.0
        bounds = _epoch_batches(len(train_records), config.batch_size)
        for step, (lo, hi) in enumerate(bounds):
            idx = order[lo:hi]
            image_embs = DenseMatrix(embs_all[idx])
            image_labels = labels_all[idx]
            prompt_rng = np.random.default_rng([config.seed, epoch, step])
            criterion_batches = []
            for i in range(NUM_CRITERIA):
                chosen = [
                    sample_training_prompt(bank, i + 1, int(lbl), prompt_rng)
                    for lbl in image_labels[:, i]
                ]
                criterion_batches.append(
                    CriterionBatch(
                        prompt_embs=DenseMatrix(np.stack([e.embedding for e in chosen])),
                        prompt_labels=np.array([1 if e.polarity == "positive" else 0 for e in chosen]),
                    )
                )
            tape = GradTape()
            loss, _ = total_loss(model, image_embs, image_labels, criterion_batches, tape)
            tape.backward(loss)
            grads = {name: tape.gradient(p) for name, p in params.items()}
            global_step = (epoch - 1) * per_epoch + step
            lr_a = cosine_lr(global_step, total_steps, config.lr_adapters)
            lr_t = cosine_lr(global_step, total_steps, config.lr_temp)
            lrs = {name: (lr_t if name == "theta_temp" else lr_a) for name in params}
            adam_step(
                params,
                grads,
                opt,
                lrs,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
                where=f" (epoch {epoch}, batch {step})",
            )
            loss_sum += loss.item()
        val_map = _val_map(model, val_records, bank)
        history.append({"epoch": epoch, "train_loss": loss_sum / len(bounds), "val_map": val_map})
        if val_map > best_map:
            best_map = val_map
            best = _snapshot(model, epoch, opt, config.seed, val_map)

    last = _snapshot(model, final_epoch, opt, config.seed, history[-1]["val_map"] if history else baseline_val_map)
    return TrainResult(best=best, last=last, history=history, baseline_val_map=baseline_val_map)
