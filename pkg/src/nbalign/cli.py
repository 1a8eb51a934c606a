"""Operator command line: train, infer, eval, eval-judged, inspect.

The CLI is plumbing only; every result equals the corresponding library
call on the same inputs. Exit codes: 0 success, 1 usage or configuration
error, 2 input-data error, 3 numeric failure. Each successful command
ends with one machine-readable line:

    STATUS key=value key=value ...

Values are written verbatim (floats at 6 significant digits), so paths
containing spaces will split; keep artifact paths space-free when the
STATUS line is consumed by scripts. No environment variables are read
and no state is kept outside the explicitly named artifact paths.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

from .dataio import (
    CatalogEntry,
    SubjectCatalog,
    join_examples,
    read_embeddings,
    read_gold,
    read_judgments,
    read_predictions,
    read_records,
    write_predictions,
)
from .errors import ConfigError, ContractViolation, DataError, NumericError, ValidationError
from .metrics import eval_judged, eval_quantitative
from .model import checkpoint_transform_targets, load_checkpoint, save_checkpoint
from .retrieval import batch_infer, build_index
from .trainer import load_train_config, train

DEFAULT_K = 50
DEFAULT_CUTOFFS = "5:50:5"
DEFAULT_JUDGED_CUTOFFS = "5:20:5"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the exit-code contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _status(**kv) -> None:
    parts = []
    for key, value in kv.items():
        if isinstance(value, float):
            value = format(value, ".6g")
        parts.append(f"{key}={value}")
    print("STATUS " + " ".join(parts))


def _parse_cutoffs(text: str) -> tuple[int, ...]:
    """Cutoff grammar start:end:step with an inclusive end, e.g. 5:50:5."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"cutoffs must be start:end:step, got {text!r}")
    try:
        start, end, step = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cutoffs must be three integers, got {text!r}") from None
    if start < 1 or step < 1 or end < start:
        raise ConfigError(
            f"cutoffs need start >= 1, step >= 1, end >= start, got {text!r}"
        )
    return tuple(range(start, end + 1, step))


def cmd_train(args) -> int:
    cfg, model_cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    subjects = read_embeddings(args.subjects)
    articles = read_embeddings(args.articles)
    records = read_records(args.records)
    # the subject container doubles as the catalog: its row ids are the codes
    catalog = SubjectCatalog([CatalogEntry(code=sid, label="") for sid in subjects.ids])
    examples = join_examples(records, articles, subjects, catalog)
    start = time.perf_counter()
    params, log = train(subjects, articles, examples, cfg, model_cfg)
    elapsed = time.perf_counter() - start
    save_checkpoint(
        params, model_cfg, args.out, transform_targets=cfg.loss.transform_targets
    )
    log_path = args.log if args.log is not None else f"{args.out}.trainlog.jsonl"
    log.write_jsonl(log_path)
    final = log.entries[-1]
    print(f"final epoch {final.epoch}: mean loss {final.mean_loss:.6f}")
    print(f"trained {len(examples)} examples for {cfg.epochs} epochs in {elapsed:.1f}s")
    _status(
        cmd="train",
        seed=cfg.seed,
        epochs=cfg.epochs,
        examples=len(examples),
        final_loss=final.mean_loss,
        seconds=round(elapsed, 3),
        checkpoint=args.out,
        log=log_path,
    )
    return 0


def cmd_infer(args) -> int:
    params, model_cfg = load_checkpoint(args.model)
    subjects = read_embeddings(args.subjects)
    articles = read_embeddings(args.articles)
    if subjects.dim != model_cfg.d:
        raise ValidationError(
            f"subject embedding dim {subjects.dim} does not match model dim {model_cfg.d}"
        )
    if articles.dim != model_cfg.d:
        raise ValidationError(
            f"article embedding dim {articles.dim} does not match model dim {model_cfg.d}"
        )
    # subject side follows how the checkpoint was trained; queries are
    # always mapped through the model
    mode = "transform" if checkpoint_transform_targets(args.model) == "both" else "raw"
    index = build_index(subjects, params if mode == "transform" else None, mode=mode)
    results = batch_infer(articles, index, params, args.k)
    write_predictions(results, args.out)
    _status(
        cmd="infer",
        articles=len(results),
        subjects=len(subjects),
        k=args.k,
        mode=mode,
        out=args.out,
    )
    return 0


def _write_report(report, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args) -> int:
    preds = read_predictions(args.preds)
    gold = read_gold(args.gold)
    cutoffs = _parse_cutoffs(args.cutoffs)
    report = eval_quantitative({p.id: p.codes for p in preds}, gold, cutoffs)
    print(report.render_table())
    report_path = args.report if args.report is not None else f"{args.preds}.report.json"
    _write_report(report, report_path)
    _status(
        cmd="eval",
        records=report.record_count,
        cutoffs=args.cutoffs,
        average_recall=report.average_recall,
        report=report_path,
    )
    return 0


def cmd_eval_judged(args) -> int:
    preds = read_predictions(args.preds)
    judgments = read_judgments(args.judgments)
    cutoffs = _parse_cutoffs(args.cutoffs)
    report = eval_judged({p.id: p.codes for p in preds}, judgments, args.case, cutoffs)
    print(report.render_table())
    report_path = args.report if args.report is not None else f"{args.preds}.report.json"
    _write_report(report, report_path)
    _status(
        cmd="eval-judged",
        case=args.case,
        records=report.record_count,
        cutoffs=args.cutoffs,
        avg_precision=report.averages["precision"],
        avg_recall=report.averages["recall"],
        avg_f1=report.averages["f1"],
        report=report_path,
    )
    return 0


def cmd_inspect(args) -> int:
    params, model_cfg = load_checkpoint(args.model)
    targets = checkpoint_transform_targets(args.model)
    n_params = sum(int(t.size) for t in params.tensors.values())
    print(
        json.dumps(
            {
                "config": model_cfg.to_dict(),
                "transform_targets": targets,
                "parameters": n_params,
                "tensors": len(params.tensors),
            },
            indent=2,
            sort_keys=True,
        )
    )
    _status(
        cmd="inspect",
        model=args.model,
        parameters=n_params,
        transform_targets=targets,
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="nbalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(
        dest="subcommand", required=True, metavar="COMMAND", parser_class=_Parser
    )

    p = sub.add_parser("train", help="fit a model checkpoint")
    p.add_argument("--subjects", required=True, help="subject embeddings (.nbemb)")
    p.add_argument("--articles", required=True, help="article embeddings (.nbemb)")
    p.add_argument("--records", required=True, help="gold records (JSON Lines)")
    p.add_argument("--config", required=True, help="training config (JSON)")
    p.add_argument("--out", required=True, help="checkpoint path to write (.nbckpt)")
    p.add_argument(
        "--seed",
        type=int,
        default=None,
        help="override the config seed (default: config value, which defaults to 0)",
    )
    p.add_argument(
        "--log", default=None, help="train-log path (default: <out>.trainlog.jsonl)"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="rank subjects per article")
    p.add_argument("--model", required=True, help="checkpoint path (.nbckpt)")
    p.add_argument("--subjects", required=True, help="subject embeddings (.nbemb)")
    p.add_argument("--articles", required=True, help="article embeddings (.nbemb)")
    p.add_argument(
        "--k", type=int, default=DEFAULT_K, help=f"codes per article (default {DEFAULT_K})"
    )
    p.add_argument("--out", required=True, help="predictions path to write (JSON Lines)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "eval", help="score predictions against gold labels"
    )
    p.add_argument("--preds", required=True, help="predictions (JSON Lines)")
    p.add_argument("--gold", required=True, help="gold labels (JSON Lines)")
    p.add_argument(
        "--cutoffs",
        default=DEFAULT_CUTOFFS,
        help=f"start:end:step, inclusive (default {DEFAULT_CUTOFFS})",
    )
    p.add_argument(
        "--report", default=None, help="JSON report path (default: <preds>.report.json)"
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "eval-judged", help="score predictions against reviewer judgments"
    )
    p.add_argument("--preds", required=True, help="predictions (JSON Lines)")
    p.add_argument("--judgments", required=True, help="reviewer judgments (TSV)")
    p.add_argument(
        "--case",
        type=int,
        required=True,
        choices=(1, 2),
        help="1: Y and I count as relevant; 2: only Y",
    )
    p.add_argument(
        "--cutoffs",
        default=DEFAULT_JUDGED_CUTOFFS,
        help=f"start:end:step, inclusive (default {DEFAULT_JUDGED_CUTOFFS})",
    )
    p.add_argument(
        "--report", default=None, help="JSON report path (default: <preds>.report.json)"
    )
    p.set_defaults(func=cmd_eval_judged)

    p = sub.add_parser(
        "inspect", help="print checkpoint metadata"
    )
    p.add_argument("--model", required=True, help="checkpoint path (.nbckpt)")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        # unreadable or unwritable artifact paths are input problems
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
