"""embed-export: encode an image manifest and prompt texts into JSONL files.

Exit codes: 0 success, 2 configuration error, 3 input schema error,
4 export failure.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .encoders import TEXT_ENCODERS, VISION_ENCODERS
from .errors import ConfigError, ExportError, SchemaError
from .export import ExportConfig, example_prompts_path, export_features, export_prompts


def _config_from(args: argparse.Namespace) -> ExportConfig:
    return ExportConfig(
        vision_encoder=getattr(args, "vision", "toy"),
        text_encoder=getattr(args, "text_encoder", "hashed"),
        dim=args.dim,
        batch_size=getattr(args, "batch_size", 8),
        seed=args.seed,
        vision_weights=getattr(args, "vision_weights", None),
        mode=getattr(args, "mode", "text_augmented"),
    )


def cmd_features(args: argparse.Namespace) -> int:
    written = export_features(
        args.manifest, args.out, _config_from(args), skip_unreadable=args.skip_unreadable
    )
    print(f"wrote {written} records to {args.out}")
    return 0


def cmd_prompts(args: argparse.Namespace) -> int:
    texts = args.texts if args.texts is not None else example_prompts_path()
    n_prompts, n_subsets = export_prompts(texts, args.out_prompts, _config_from(args), args.out_subsets)
    msg = f"wrote {n_prompts} prompt entries to {args.out_prompts}"
    if args.out_subsets is not None:
        msg += f" and {n_subsets} subset prompts to {args.out_subsets}"
    print(msg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Offline frozen-encoder export to features/prompts/subsets JSONL files.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="encode manifest images into features.jsonl")
    p.add_argument("--manifest", required=True, help="CSV or JSON image manifest")
    p.add_argument("--out", required=True, help="output features.jsonl path")
    p.add_argument("--vision", choices=VISION_ENCODERS, default="toy")
    p.add_argument("--vision-weights", default=None, help="local .pth weights for resnet50")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-unreadable", action="store_true",
                   help="log and skip unreadable images instead of aborting")
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("prompts", help="encode prompt texts into prompts/subsets JSONL")
    p.add_argument("--texts", default=None,
                   help="prompt text JSON file (defaults to the bundled example)")
    p.add_argument("--out-prompts", required=True)
    p.add_argument("--out-subsets", default=None)
    p.add_argument("--text-encoder", choices=TEXT_ENCODERS, default="hashed")
    p.add_argument("--mode", choices=["fixed_class", "text_augmented"], default="text_augmented")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prompts)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 3
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
