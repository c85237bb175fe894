"""Command-line entry point.

Subcommands: validate, index, train, eval, link.  Machine-readable
artifacts go to --out (written atomically: temp file + rename); human
summaries go to stdout, errors to stderr.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 runtime
failure.
"""

import argparse
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

from . import model, trainer
from .corpus import NIL, load_candidate_table, load_entity_table, parse_documents
from .decoder import write_predictions
from .encoder import EncoderConfig
from .entity_index import build_index, save_index_cache
from .errors import (LinkforgeError, NonFiniteError, ParseError,
                     TrainingDivergedError, UsageError, ValidationError)

THREADS_ENV_VAR = "LINKFORGE_THREADS"


@dataclass(frozen=True)
class CommandOutcome:
    exit_code: int
    message: str
    artifact_path: str | None = None


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems on exit code 2; remap them to 1."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="linkforge",
                     description="End-to-end entity linking toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--config", type=str, default=None,
                       help="run config file (JSON or key = value lines)")
        p.add_argument("--candidates", type=str, default=None,
                       help="candidate table path (overrides config)")
        p.add_argument("--no-candidates", action="store_true",
                       help="disable candidate sets (full-universe search)")
        p.add_argument("--nil-policy", choices=["strict", "lenient"],
                       default=None, help="NIL span scoring policy")
        p.add_argument("--out", type=str, default=None,
                       help="path of the emitted artifact")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker cap (default: ${THREADS_ENV_VAR} or "
                            "available parallelism)")

    p_validate = sub.add_parser("validate", help="parse corpus/tables and "
                                                 "report counts")
    p_validate.add_argument("--corpus", required=True)
    p_validate.add_argument("--entities", default=None)
    common(p_validate)

    p_index = sub.add_parser("index", help="build and cache the entity index")
    p_index.add_argument("--entities", required=True)
    common(p_index)

    p_train = sub.add_parser("train", help="run the training protocol")
    p_train.add_argument("--repeats", type=int, default=None,
                         help="override the config repeat count")
    p_train.add_argument("--checkpoint-dir", type=str, default=None,
                         help="directory for per-repeat checkpoints "
                              "(default: next to --out)")
    common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", required=True)
    common(p_eval)

    p_link = sub.add_parser("link", help="link one canonical-format document "
                                         "file to a prediction TSV")
    p_link.add_argument("--checkpoint", required=True)
    p_link.add_argument("--corpus", required=True)
    common(p_link)

    return parser


def _atomic_write(path: str, data: str | bytes):
    """Write-to-temp plus rename so error paths never leave partial files."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, temp_path = tempfile.mkstemp(dir=target.parent, prefix=target.name)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def _resolve_threads(args) -> int:
    if args.threads is not None:
        value = args.threads
    elif os.environ.get(THREADS_ENV_VAR):
        try:
            value = int(os.environ[THREADS_ENV_VAR])
        except ValueError:
            raise UsageError(f"{THREADS_ENV_VAR} must be an integer")
    else:
        value = os.cpu_count() or 1
    if value < 1:
        raise UsageError("thread count must be >= 1")
    return value


def _load_run_config(args) -> trainer.RunConfig:
    if args.config is not None:
        cfg = trainer.load_config(args.config)
    else:
        cfg = trainer.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "repeats", None) is not None:
        cfg = replace(cfg, repeats=args.repeats)
    if args.nil_policy is not None:
        cfg = replace(cfg, nil_policy=args.nil_policy)
    if args.no_candidates and args.candidates:
        raise UsageError("--candidates and --no-candidates are exclusive")
    if args.candidates is not None:
        cfg = replace(cfg, candidate_table=args.candidates)
    if args.no_candidates:
        cfg = replace(cfg, candidate_table=None)
    return cfg


def _cmd_validate(args) -> CommandOutcome:
    with open(args.corpus, encoding="utf-8") as fh:
        docs = parse_documents(fh)
    n_words = sum(len(doc) for doc in docs)
    mentions = [m for doc in docs for m in doc.gold_mentions()]
    nil_mentions = sum(1 for m in mentions if m.entity is NIL)
    lines = [
        f"documents: {len(docs)}",
        f"words: {n_words}",
        f"gold mentions: {len(mentions)} ({nil_mentions} NIL)",
    ]
    if args.entities:
        with open(args.entities, encoding="utf-8") as fh:
            table = load_entity_table(fh)
        out_of_table = sum(
            1 for m in mentions
            if m.entity is not NIL and m.entity not in table.name_to_id
        )
        lines.append(f"entities: {table.k} (d={table.d})")
        lines.append(f"out-of-table gold mentions: {out_of_table}")
        if args.candidates:
            with open(args.candidates, encoding="utf-8") as fh:
                cands = load_candidate_table(fh, table)
            lines.append(
                f"candidate surfaces: {len(cands)} "
                f"(skipped names: {cands.skipped_names}, "
                f"dropped surfaces: {cands.dropped_surfaces})"
            )
    return CommandOutcome(0, "\n".join(lines))


def _cmd_index(args) -> CommandOutcome:
    if not args.out:
        raise UsageError("index requires --out for the cache file")
    with open(args.entities, encoding="utf-8") as fh:
        table = load_entity_table(fh)
    index = build_index(table)
    buf = io.BytesIO()
    save_index_cache(buf, index)
    _atomic_write(args.out, buf.getvalue())
    return CommandOutcome(0, f"indexed {index.k} entities (d={index.d})",
                          args.out)


def _cmd_train(args) -> CommandOutcome:
    cfg = _load_run_config(args)
    checkpoint_dir = args.checkpoint_dir
    if checkpoint_dir is None and args.out:
        checkpoint_dir = str(Path(args.out).parent / "checkpoints")
    report = trainer.train(cfg, checkpoint_dir=checkpoint_dir)
    summary = report.summary()
    lines = []
    for split, stats in summary.items():
        micro = stats["micro_f1"]
        lines.append(
            f"{split}: micro F1 {micro['mean']:.4f} +- {micro['stddev']:.4f} "
            f"over {cfg.repeats} repeats "
            f"(values: {', '.join(f'{v:.4f}' for v in micro['values'])})"
        )
    artifact = None
    if args.out:
        payload = json.dumps(report.to_dict(), sort_keys=True, indent=2)
        _atomic_write(args.out, payload + "\n")
        artifact = args.out
    return CommandOutcome(0, "\n".join(lines), artifact)


def _cmd_eval(args) -> CommandOutcome:
    cfg = _load_run_config(args)
    threads = _resolve_threads(args)
    use_candidates = cfg.candidate_table is not None
    report = trainer.evaluate_checkpoint(
        args.checkpoint, args.split, cfg, use_candidates=use_candidates,
        threads=threads)
    search_mode = "candidates" if use_candidates else "full-universe"
    artifact = None
    if args.out:
        payload = {"search_mode": search_mode, **report.to_dict()}
        _atomic_write(args.out,
                      json.dumps(payload, sort_keys=True, indent=2) + "\n")
        artifact = args.out
    message = report.format_table() + f"\nsearch mode: {search_mode}"
    return CommandOutcome(0, message, artifact)


def _cmd_link(args) -> CommandOutcome:
    if not args.out:
        raise UsageError("link requires --out for the prediction TSV")
    cfg = _load_run_config(args)
    threads = _resolve_threads(args)
    resources = trainer.load_resources(cfg)
    with open(args.checkpoint, "rb") as fh:
        params, _, saved = model.load_checkpoint(fh)
    if saved.get("vocab_digest") != resources.vocab.digest:
        raise ValidationError("checkpoint was built against different "
                              "vocabulary content")
    if saved.get("entity_table_digest") != resources.table.digest:
        raise ValidationError("checkpoint was built against different "
                              "entity-table content")
    if "encoder" in saved:
        cfg = replace(cfg, encoder=EncoderConfig.from_dict(saved["encoder"]))
    docs = trainer.load_split(args.corpus)
    prepared = trainer.prepare_documents(docs, resources, cfg)
    mentions = trainer.predict_mentions(
        prepared, params, resources, cfg,
        use_candidates=cfg.candidate_table is not None, threads=threads)
    _atomic_write(args.out, write_predictions(mentions, resources.table.names))
    return CommandOutcome(0, f"linked {len(mentions)} mentions in "
                             f"{len(docs)} documents", args.out)


_COMMANDS = {
    "validate": _cmd_validate,
    "index": _cmd_index,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "link": _cmd_link,
}


def dispatch(argv: list[str]) -> CommandOutcome:
    """Run one command; the outcome class alone determines the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        return CommandOutcome(1, f"usage error: {exc}")
    except (ParseError, ValidationError) as exc:
        return CommandOutcome(2, f"data error: {exc}")
    except (TrainingDivergedError, NonFiniteError) as exc:
        return CommandOutcome(3, f"runtime failure: {exc}")
    except OSError as exc:
        return CommandOutcome(2, f"data error: {exc}")
    except LinkforgeError as exc:
        return CommandOutcome(3, f"runtime failure: {exc}")


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        outcome = dispatch(argv)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if outcome.exit_code == 0:
        if outcome.message:
            print(outcome.message)
    else:
        print(outcome.message, file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
