"""promptexport: produce simulator embedding files from class names.

Usage:
    promptexport export --classes FILE --style {manual,short,long} --k INT
                        --encoder NAME --cache DIR --out FILE
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .descriptions import ExportRequest, fetch_descriptions
from .embedding import HASHED_ENCODER, embed_prompts, make_encoder, write_embedding_file
from .errors import ExportError, ValidationError


def load_class_names(path: str) -> list[str]:
    """Accepts a JSON list of names or a simulator dataset file."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"classes file not found: {p}")
    raw = json.loads(p.read_text(encoding="utf-8"))
    if isinstance(raw, list):
        names = raw
    elif isinstance(raw, dict) and isinstance(raw.get("class_names"), list):
        names = raw["class_names"]
    else:
        raise ValidationError(
            f"{p}: expected a JSON list of class names or a dataset file "
            "with a class_names field"
        )
    if not names or not all(isinstance(n, str) and n for n in names):
        raise ValidationError(f"{p}: class names must be nonempty strings")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptexport")
    sub = parser.add_subparsers(dest="command", required=True)
    export = sub.add_parser("export", help="export class prompt embeddings")
    export.add_argument("--classes", required=True,
                        help="JSON list of class names, or a simulator dataset file")
    export.add_argument("--style", choices=["manual", "short", "long"], default="manual")
    export.add_argument("--k", type=int, default=3, help="descriptions per class")
    export.add_argument("--encoder", default=HASHED_ENCODER,
                        help="'hashed' (offline) or a HuggingFace encoder name")
    export.add_argument("--cache", default=None, help="completion cache directory")
    export.add_argument("--out", required=True, help="output embedding file")
    export.add_argument("--embed-dim", type=int, default=16,
                        help="embedding width for the hashed encoder")
    export.add_argument("--credentials-env", default="OPENAI_API_KEY",
                        help="environment variable holding the API key")
    return parser


def run_export(args: argparse.Namespace) -> int:
    request = ExportRequest(
        class_names=load_class_names(args.classes),
        k=args.k,
        style=args.style,
        encoder=args.encoder,
        credentials_env=args.credentials_env,
        cache_dir=Path(args.cache) if args.cache else None,
    )
    descriptions = fetch_descriptions(request)
    encoder = make_encoder(args.encoder, args.embed_dim)
    payload = embed_prompts(descriptions, encoder)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(payload, out)
    n_prompts = sum(len(c["prompts"]) for c in payload["classes"])
    print(
        f"exported {len(payload['classes'])} classes x {args.k} prompts "
        f"({n_prompts} sequences, embed_dim={payload['embed_dim']}) -> {out}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_export(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
