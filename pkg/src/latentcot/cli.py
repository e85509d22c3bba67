"""Command-line entry point: synth, train, eval, matrix."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, load_config
from .data import CorpusError, CorpusInvariantError, MultilingualCorpus, build_corpus, corpus_stats, stats_csv, stats_markdown
from .evaluate import VocabularyMismatchError, emit_all, evaluate, run_matrix
from .train import CheckpointError, TrainingDivergedError, load, save, train, write_log_csv

log = logging.getLogger("latentcot")

EXIT_INVARIANT = 2


def _config(args) -> RunConfig:
    return load_config(args.config).with_seed(args.seed)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(cfg.corpus)
    corpus.to_jsonl(out / "corpus.jsonl")
    rows = corpus_stats(corpus)
    (out / "stats.csv").write_text(stats_csv(rows))
    (out / "stats.md").write_text(stats_markdown(rows))
    print(f"wrote {len(corpus.examples)} examples to {out / 'corpus.jsonl'}")
    return 0


def _load_corpus(path) -> MultilingualCorpus:
    corpus = MultilingualCorpus.from_jsonl(path)
    corpus.validate()
    return corpus


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    examples = corpus.train(cfg.train_languages)
    model = cfg.model_config(len(corpus.vocab))
    started = time.perf_counter()
    result = train(cfg.train.replace(objective=args.objective), examples, model, corpus.vocab.fingerprint())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(result.checkpoint, out)
    write_log_csv(result.log, out.with_name(out.name + ".log.csv"))
    print(f"trained {args.objective} on {len(examples)} examples for {result.checkpoint.step} steps "
          f"in {time.perf_counter() - started:.1f}s; final loss {result.log[-1]['total']:.4f}")
    return 0


def cmd_eval(args) -> int:
    corpus = _load_corpus(args.corpus)
    ckpt = load(args.ckpt)
    max_answer = 16
    max_total = None
    if args.config:
        cfg = load_config(args.config)
        max_answer, max_total = cfg.max_answer, cfg.max_total
    report = evaluate(ckpt, corpus.test(), args.mode, corpus.vocab, setup=args.setup,
                      train_languages=args.train_languages.split(",") if args.train_languages else None,
                      max_answer=max_answer, max_total=max_total)
    for path in emit_all([report], args.report):
        log.info("wrote %s", path)
    for r in report.rows:
        print(f"{r.language}: {r.accuracy:.2f}% ({r.correct}/{r.n}), thinking tokens {r.thinking_tokens:g}, "
              f"truncated {r.truncated}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(cfg.corpus)
    corpus.to_jsonl(out / "corpus.jsonl")
    model = cfg.model_config(len(corpus.vocab))

    def on_cell(setup, objective, result):
        stem = f"{setup.name}.{objective}"
        save(result.checkpoint, out / f"{stem}.ckpt")
        write_log_csv(result.log, out / f"{stem}.log.csv")
        print(f"finished {setup.name} / {objective}", flush=True)

    result = run_matrix(cfg.matrix, corpus, model, cfg.train, cfg.max_answer, cfg.max_total, on_cell)
    emit_all(result, out)
    (out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    print((out / "report.md").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentcot", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="build a synthetic multilingual corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one objective on a corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--objective", choices=("codi", "sft"), required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--mode", choices=("codi", "sft"), required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="optional run config for decoding budgets")
    e.add_argument("--setup", default="", help="setup tag written into the report")
    e.add_argument("--train-languages", help="comma-separated languages seen in training (marks OOD rows)")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("matrix", help="train and evaluate every setup x objective cell")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_matrix)

    for cmd in (s, t, e, m):
        cmd.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CorpusInvariantError, CheckpointError, VocabularyMismatchError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (CorpusError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
