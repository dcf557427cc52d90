"""Command-line surface: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 input schema error,
4 numeric failure. Every command writes a run manifest (content digests of
its inputs, config digest, seed, version, wall time) next to its output so
reruns are auditable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import AdapterModel, CriterionBatch, total_loss
from .datamodel import NUM_CRITERIA, load_dataset, save_dataset, split_view
from .errors import ConfigError, CvsAlignError, NumericError, SchemaError
from .inference import infer_zero_shot, load_scores, save_scores, score_records
from .metrics import aggregate_reports, aggregate_table, evaluate, load_report, save_report
from .numerics import DenseMatrix, finite_diff_check
from .prompts import load_prompt_bank, load_subset_bank, save_prompt_bank, save_subset_bank
from .synth import SynthConfig, generate
from .training import load_train_config, save_checkpoint, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digest_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _write_manifest(
    path: Path,
    command: str,
    inputs: list[Path],
    seed: int | None,
    config_digest: str | None,
    started: float,
) -> None:
    manifest = {
        "command": command,
        "config_digest": config_digest,
        "input_digests": {str(p): _digest_file(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "wall_time_s": time.monotonic() - started,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _parse_triple(text: str, flag: str, cast) -> tuple:
    parts = text.split(",")
    if len(parts) != NUM_CRITERIA:
        raise ConfigError(f"{flag} needs {NUM_CRITERIA} comma-separated values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{flag}: could not parse {text!r}") from None


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"{what} file not found: {p}")
    return p


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.monotonic()
    out_dir = Path(args.out_dir if args.out_dir is not None else os.environ.get("CVSALIGN_OUT_DIR", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    n = _parse_triple(args.n, "--n", int)
    config = SynthConfig(
        dim=args.dim,
        n_train=n[0],
        n_val=n[1],
        n_test=n[2],
        prevalence=_parse_triple(args.prevalence, "--prevalence", float),
        noise_sigma=args.sigma,
        seed=args.seed,
        mode=args.mode,
    )
    dataset, bank, subset_bank = generate(config)
    features = out_dir / "synth.features.jsonl"
    prompts = out_dir / "synth.prompts.jsonl"
    subsets = out_dir / "synth.subsets.jsonl"
    save_dataset(dataset, features)
    save_prompt_bank(bank, prompts)
    save_subset_bank(subset_bank, subsets)
    _write_manifest(
        out_dir / "synth.manifest.json",
        command="synth",
        inputs=[features, prompts, subsets],
        seed=config.seed,
        config_digest=_digest_obj(
            {
                "dim": config.dim,
                "n": [config.n_train, config.n_val, config.n_test],
                "prevalence": list(config.prevalence),
                "sigma": config.noise_sigma,
                "seed": config.seed,
                "mode": config.mode,
            }
        ),
        started=started,
    )
    print(f"wrote {features}, {prompts}, {subsets}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    features = _require_file(args.features, "features")
    prompts = _require_file(args.prompts, "prompts")
    config = load_train_config(args.config)
    dataset = load_dataset(features)
    bank = load_prompt_bank(prompts)
    result = train(dataset, bank, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out)
    stem = str(out)[: -len(".json")] if str(out).endswith(".json") else str(out)
    history_path = Path(stem + ".history.json")
    history_path.write_text(
        json.dumps(
            {"baseline_val_map": result.baseline_val_map, "epochs": result.history},
            sort_keys=True,
            separators=(",", ":"),
        )
        + "\n",
        encoding="utf-8",
    )
    _write_manifest(
        Path(stem + ".manifest.json"),
        command="train",
        inputs=[features, prompts, Path(args.config)],
        seed=config.seed,
        config_digest=_digest_obj(config.to_jsonable()),
        started=started,
    )
    best = result.best
    print(f"best epoch {best.epoch} val mAP {best.val_map:.4f}; wrote {out} and {history_path}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    started = time.monotonic()
    features = _require_file(args.features, "features")
    prompts = _require_file(args.prompts, "prompts")
    if args.strategy == "multiclass" and args.subsets is None:
        raise ConfigError("--strategy multiclass requires --subsets")
    if not args.zero_shot and args.checkpoint is None:
        raise ConfigError("either --checkpoint or --zero-shot is required")
    dataset = load_dataset(features)
    bank = load_prompt_bank(prompts)
    subset_bank = None
    inputs = [features, prompts]
    if args.subsets is not None:
        subsets_path = _require_file(args.subsets, "subsets")
        subset_bank = load_subset_bank(subsets_path)
        inputs.append(subsets_path)
    records = dataset.records if args.split == "all" else split_view(dataset, args.split)

    seed = None
    if args.zero_shot:
        logit_scale = 1.0
        if args.use_temperature:
            raise ConfigError("--use-temperature requires a trained checkpoint")
        scores = infer_zero_shot(records, bank, args.strategy, subset_bank)
    else:
        ckpt_path = _require_file(args.checkpoint, "checkpoint")
        ckpt = load_checkpoint(ckpt_path)
        inputs.append(ckpt_path)
        seed = ckpt.rng.get("seed")
        logit_scale = float(np.exp(ckpt.model.theta_temp.item())) if args.use_temperature else 1.0
        scores = score_records(ckpt.model, records, bank, args.strategy, subset_bank, logit_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scores(scores, out)
    stem = str(out)[: -len(".jsonl")] if str(out).endswith(".jsonl") else str(out)
    _write_manifest(
        Path(stem + ".manifest.json"),
        command="infer",
        inputs=inputs,
        seed=seed,
        config_digest=None,
        started=started,
    )
    print(f"wrote {out} ({len(scores.ids)} records, strategy {scores.strategy})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    out = Path(args.out) if args.out else None
    if args.aggregate:
        report_paths = [_require_file(p, "report") for p in args.aggregate]
        agg = aggregate_reports([load_report(p) for p in report_paths])
        print(aggregate_table(agg))
        if out:
            out.write_text(json.dumps(agg, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
            stem = str(out)[: -len(".json")] if str(out).endswith(".json") else str(out)
            _write_manifest(
                Path(stem + ".manifest.json"),
                command="eval",
                inputs=report_paths,
                seed=None,
                config_digest=None,
                started=started,
            )
        return EXIT_OK
    if not args.scores or not args.features:
        raise ConfigError("eval requires --scores and --features (or --aggregate)")
    scores_path = _require_file(args.scores, "scores")
    features = _require_file(args.features, "features")
    dataset = load_dataset(features)
    records = dataset.records if args.split == "all" else split_view(dataset, args.split)
    scores = load_scores(scores_path)
    report = evaluate(
        scores.ids,
        scores.scores,
        records,
        strategy=scores.strategy,
        split=args.split,
        seed=args.seed,
        config_digest=args.config_digest,
    )
    print(report.text_table())
    if out:
        save_report(report, out)
        stem = str(out)[: -len(".json")] if str(out).endswith(".json") else str(out)
        _write_manifest(
            Path(stem + ".manifest.json"),
            command="eval",
            inputs=[scores_path, features],
            seed=args.seed,
            config_digest=args.config_digest,
            started=started,
        )
    return EXIT_OK


def _gradcheck_problem(n: int, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    model = AdapterModel.identity(dim)
    for name, param in model.params().items():
        param.array += 0.1 * rng.standard_normal(param.array.shape)
    image_embs = DenseMatrix(rng.standard_normal((n, dim)))
    image_labels = rng.integers(0, 2, size=(n, NUM_CRITERIA))
    batches = []
    for i in range(NUM_CRITERIA):
        # Each image's own prompt matches its label, so no row is degenerate.
        batches.append(
            CriterionBatch(
                prompt_embs=DenseMatrix(rng.standard_normal((n, dim))),
                prompt_labels=image_labels[:, i].copy(),
            )
        )
    return model, image_embs, image_labels, batches


def cmd_gradcheck(args: argparse.Namespace) -> int:
    model, image_embs, image_labels, batches = _gradcheck_problem(args.n, args.dim, args.seed)

    def loss_fn(params, tape):
        return total_loss(model, image_embs, image_labels, batches, tape)[0]

    report = finite_diff_check(loss_fn, model.params(), h=args.h, tol=args.tol)
    print(report.summary())
    if not report.passed:
        for name, idx, rel in report.failures[:10]:
            print(f"  fail {name}[{idx}] rel_err={rel:.3e}")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvsalign",
        description="Multi-label prompt-contrastive alignment over precomputed embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic features, prompts and subset banks")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--n", default="600,200,200", help="train,val,test record counts")
    p.add_argument("--prevalence", default="0.5,0.5,0.5", help="per-criterion positive rates")
    p.add_argument("--sigma", type=float, default=0.1, help="embedding noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["fixed_class", "text_augmented"], default="text_augmented")
    p.add_argument("--out-dir", default=None, help="defaults to $CVSALIGN_OUT_DIR or .")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train adapter heads on a features/prompts pair")
    p.add_argument("--features", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--config", required=True, help="JSON file with TrainConfig keys")
    p.add_argument("--out", required=True, help="checkpoint path (.json)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="score records with one inference strategy")
    p.add_argument("--features", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--subsets", default=None, help="subset bank (multiclass only)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--zero-shot", action="store_true", help="identity adapters, no checkpoint")
    p.add_argument("--strategy", choices=["standard", "posneg", "multiclass"], required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--use-temperature", action="store_true", help="scale logits by the trained exp(theta)")
    p.add_argument("--out", required=True, help="scores path (.jsonl)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="average precision report, or aggregate prior reports")
    p.add_argument("--scores", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config-digest", default=None)
    p.add_argument("--aggregate", nargs="+", default=None, help="report files to average")
    p.add_argument("--out", default=None, help="report path (.json)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--n", type=int, default=4, help="batch size")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CvsAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
