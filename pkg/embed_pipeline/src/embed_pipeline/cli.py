"""Ingestion command line.

    embed subjects --in catalog.jsonl --out subjects.nbemb --model ID [--translate]
    embed articles --in records.jsonl --out articles.nbemb --model ID

Exit codes: 0 success, 1 usage or encoder problem, 2 input-data problem.
--model accepts "hash" (deterministic offline encoder) or a pretrained
sentence-encoder identifier (requires the optional encoders extra).
"""

from __future__ import annotations

import argparse
import sys

from .encoders import DEFAULT_EN_MODEL, EncoderSpec, load_encoder
from .errors import InputError, PipelineError
from .formats import read_catalog, read_records, write_container
from .pipeline import CachedTranslator, encode_articles, encode_subjects


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this CLI reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def cmd_subjects(args) -> int:
    entries = read_catalog(args.inp)
    spec = EncoderSpec(args.model, lang="en" if args.translate else "de")
    translator = CachedTranslator(args.translations) if args.translations else None
    batch = encode_subjects(
        entries, load_encoder(args.model), spec,
        translate=args.translate, translator=translator,
    )
    if translator is not None:
        translator.save()
    write_container(batch.ids, batch.vectors, args.out)
    print(
        f"wrote {len(batch.ids)} subject vectors (dim {batch.vectors.shape[1]}) "
        f"to {args.out}, skipped {batch.skipped} empty labels"
    )
    return 0


def cmd_articles(args) -> int:
    records = read_records(args.inp)
    spec = EncoderSpec(args.model)
    batch = encode_articles(records, load_encoder(args.model), spec)
    write_container(batch.ids, batch.vectors, args.out)
    print(
        f"wrote {len(batch.ids)} article vectors (dim {batch.vectors.shape[1]}) "
        f"to {args.out}, skipped {batch.skipped} empty records"
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="embed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(
        dest="subcommand", required=True, metavar="COMMAND", parser_class=_Parser
    )

    p = sub.add_parser("subjects", help="encode catalog labels")
    p.add_argument("--in", dest="inp", required=True, help="subject catalog (JSON Lines)")
    p.add_argument("--out", required=True, help="embedding container to write (.nbemb)")
    p.add_argument(
        "--model", default=DEFAULT_EN_MODEL,
        help=f"encoder identifier or 'hash' (default {DEFAULT_EN_MODEL})",
    )
    p.add_argument(
        "--translate", action="store_true",
        help="encode English labels (label_en or --translations entries)",
    )
    p.add_argument(
        "--translations", default=None,
        help="JSON cache file mapping labels to English translations",
    )
    p.set_defaults(func=cmd_subjects)

    p = sub.add_parser("articles", help="encode record title+abstract texts")
    p.add_argument("--in", dest="inp", required=True, help="records (JSON Lines)")
    p.add_argument("--out", required=True, help="embedding container to write (.nbemb)")
    p.add_argument(
        "--model", default=DEFAULT_EN_MODEL,
        help=f"encoder identifier or 'hash' (default {DEFAULT_EN_MODEL})",
    )
    p.set_defaults(func=cmd_articles)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
