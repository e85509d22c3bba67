"""Per-language evaluation, token accounting, and the training-setup matrix."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .codi import Example, codi_infer
from .data import LANGUAGES, MultilingualCorpus, Vocabulary, answer_value
from .sft import sft_infer
from .train import Checkpoint, TrainConfig, TrainResult, train
from .transformer import ModelConfig

log = logging.getLogger(__name__)

MODES = ("codi", "sft")
REPORT_FIELDS = ("setup", "objective", "language", "n", "correct", "accuracy",
                 "thinking_tokens", "truncated", "ood")
COMPARISON_FIELDS = ("setup", "language", "ood", "codi_accuracy", "sft_accuracy", "delta",
                     "sft_cot_tokens", "codi_latents")


class VocabularyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRow:
    language: str
    n: int
    correct: int
    thinking_tokens: float  # mean explicit CoT length (SFT) or latent count (CODI), 1 decimal
    truncated: int
    ood: bool = False

    @property
    def accuracy(self) -> float:
        return round(100.0 * self.correct / self.n, 2) if self.n else 0.0

    @property
    def incorrect(self) -> int:
        return self.n - self.correct - self.truncated


@dataclass
class EvalReport:
    setup: str
    objective: str
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, language: str) -> EvalRow:
        for r in self.rows:
            if r.language == language:
                return r
        raise KeyError(language)

    @property
    def languages(self) -> list[str]:
        return [r.language for r in self.rows]


def compression_ratio(avg_cot_tokens: float, k: int) -> float:
    """Explicit CoT tokens replaced per latent thought."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if avg_cot_tokens < 0:
        raise ValueError("average CoT length must be >= 0")
    return avg_cot_tokens / k


def format_ratio(ratio: float) -> str:
    return f"{ratio:.1f}×"


def _language_order(langs: Iterable[str]) -> list[str]:
    langs = set(langs)
    return [t for t in LANGUAGES if t in langs] + sorted(langs - set(LANGUAGES))


def verdict(decoded: Sequence[int], gold: Sequence[int], truncated: bool, vocab: Vocabulary) -> str:
    """'correct', 'incorrect' or 'truncated'; exact integer match on the answer."""
    if truncated:
        return "truncated"
    got = answer_value([*decoded, vocab.end_of_answer], vocab)
    return "correct" if got is not None and got == answer_value(gold, vocab) else "incorrect"


def predict(ckpt: Checkpoint, example: Example, mode: str, vocab: Vocabulary,
            max_answer: int = 16, max_total: int | None = None) -> tuple[str, int]:
    """(verdict, thinking tokens) for one example."""
    params = ckpt.params
    if mode == "codi":
        out = codi_infer(params, example.question, vocab.answer_prompt, vocab.end_of_answer,
                         max_answer=max_answer)
        return verdict(out.answer, example.answer, out.truncated, vocab), out.thinking_tokens
    if mode == "sft":
        budget = max_total or params.config.max_seq_len - len(example.question)
        budget = min(budget, params.config.max_seq_len - len(example.question))
        out = sft_infer(params, example.question, vocab.answer_prompt, vocab.end_of_answer, budget)
        return verdict(out.answer, example.answer, out.truncated, vocab), out.cot_length
    raise ValueError(f"mode must be one of {MODES}")


def evaluate(ckpt: Checkpoint, examples: Sequence[Example], mode: str, vocab: Vocabulary,
             setup: str = "", train_languages: Iterable[str] | None = None,
             max_answer: int = 16, max_total: int | None = None) -> EvalReport:
    """Greedy-decode every example and aggregate per language."""
    if ckpt.vocab_hash and ckpt.vocab_hash != vocab.fingerprint():
        raise VocabularyMismatchError("checkpoint and corpus vocabularies differ")
    trained = None if train_languages is None else set(train_languages)
    tallies: dict[str, dict] = {}
    for ex in examples:
        v, thinking = predict(ckpt, ex, mode, vocab, max_answer, max_total)
        t = tallies.setdefault(ex.language, {"n": 0, "correct": 0, "truncated": 0, "thinking": 0})
        t["n"] += 1
        t["correct"] += v == "correct"
        t["truncated"] += v == "truncated"
        t["thinking"] += thinking
    rows = []
    for lang in _language_order(tallies):
        t = tallies[lang]
        rows.append(EvalRow(lang, t["n"], t["correct"], round(t["thinking"] / t["n"], 1), t["truncated"],
                            ood=trained is not None and lang not in trained))
    return EvalReport(setup, mode, rows)


# -------------------------------------------------------------------- matrix


@dataclass(frozen=True)
class Setup:
    name: str
    train_languages: tuple[str, ...]
    held_out: bool = False


DEFAULT_SETUPS = (
    Setup("English-only", ("en",)),
    Setup("Multi-Lingual", ("en", "de", "fr", "zh"), held_out=True),
    Setup("Multi-Lingual-with-LowResource", ("en", "de", "fr", "zh", "ur")),
)


@dataclass
class ExperimentMatrix:
    setups: tuple[Setup, ...] = DEFAULT_SETUPS
    objectives: tuple[str, ...] = MODES

    @property
    def cells(self) -> list[tuple[Setup, str]]:
        return [(s, o) for s in self.setups for o in self.objectives]

    def validate(self, test_languages: Iterable[str]) -> None:
        test = set(test_languages)
        for s in self.setups:
            if s.held_out and len(test - set(s.train_languages)) != 1:
                raise ValueError(f"held-out setup {s.name!r} must exclude exactly one test language")
        for o in self.objectives:
            if o not in MODES:
                raise ValueError(f"unknown objective {o!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentMatrix":
        setups = tuple(Setup(s["name"], tuple(s["train_languages"]), bool(s.get("held_out", False)))
                       for s in d.get("setups", [asdict(s) for s in DEFAULT_SETUPS]))
        return cls(setups, tuple(d.get("objectives", MODES)))


@dataclass(frozen=True)
class ComparisonRow:
    setup: str
    language: str
    ood: bool
    codi_accuracy: float
    sft_accuracy: float
    sft_cot_tokens: float
    codi_latents: float

    @property
    def delta(self) -> float:
        return round(self.codi_accuracy - self.sft_accuracy, 2)


@dataclass
class MatrixResult:
    reports: list[EvalReport]
    comparison: list[ComparisonRow]
    logs: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)


def compare(reports: Sequence[EvalReport]) -> list[ComparisonRow]:
    """Side-by-side CODI vs SFT rows for every setup that has both."""
    by_key = {(r.setup, r.objective): r for r in reports}
    setups = list(dict.fromkeys(r.setup for r in reports))
    rows = []
    for setup in setups:
        c, s = by_key.get((setup, "codi")), by_key.get((setup, "sft"))
        if c is None or s is None:
            continue
        for lang in c.languages:
            cr, sr = c.row(lang), s.row(lang)
            rows.append(ComparisonRow(setup, lang, cr.ood, cr.accuracy, sr.accuracy,
                                      sr.thinking_tokens, cr.thinking_tokens))
    return rows


def run_matrix(matrix: ExperimentMatrix, corpus: MultilingualCorpus, model_config: ModelConfig,
               train_config: TrainConfig, max_answer: int = 16, max_total: int | None = None,
               on_cell: Callable[[Setup, str, TrainResult], None] | None = None) -> MatrixResult:
    """Train every (setup, objective) cell and evaluate it on the full test split."""
    test = corpus.test()
    matrix.validate({e.language for e in test})
    vocab = corpus.vocab
    reports, logs, ckpts = [], {}, {}
    for setup, objective in matrix.cells:
        started = time.perf_counter()
        result = train(train_config.replace(objective=objective), corpus.train(setup.train_languages),
                       model_config, vocab.fingerprint())
        report = evaluate(result.checkpoint, test, objective, vocab, setup.name, setup.train_languages,
                          max_answer, max_total)
        log.info("%s / %s: trained+evaluated in %.1fs", setup.name, objective, time.perf_counter() - started)
        reports.append(report)
        logs[(setup.name, objective)] = result.log
        ckpts[(setup.name, objective)] = result.checkpoint
        if on_cell is not None:
            on_cell(setup, objective, result)
    return MatrixResult(reports, compare(reports), logs, ckpts)


# ----------------------------------------------------------------- emission


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for rep in reports:
        for r in rep.rows:
            w.writerow([rep.setup, rep.objective, r.language, r.n, r.correct, f"{r.accuracy:.2f}",
                        f"{r.thinking_tokens:.1f}", r.truncated, int(r.ood)])
    return buf.getvalue()


def parse_reports_csv(text: str) -> list[EvalReport]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
        raise ValueError("unexpected report CSV header")
    reports: dict[tuple[str, str], EvalReport] = {}
    for rec in reader:
        key = (rec["setup"], rec["objective"])
        rep = reports.setdefault(key, EvalReport(*key))
        row = EvalRow(rec["language"], int(rec["n"]), int(rec["correct"]), float(rec["thinking_tokens"]),
                      int(rec["truncated"]), bool(int(rec["ood"])))
        if f"{row.accuracy:.2f}" != rec["accuracy"]:
            raise ValueError(f"accuracy column disagrees with counts for {key} {row.language}")
        rep.rows.append(row)
    return list(reports.values())


def reports_json(reports: Sequence[EvalReport]) -> str:
    payload = [{"setup": rep.setup, "objective": rep.objective,
                "rows": [{**asdict(r), "accuracy": r.accuracy} for r in rep.rows]} for rep in reports]
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _setup_language_rows(reports: Sequence[EvalReport]):
    by_key = {(r.setup, r.objective): r for r in reports}
    for setup in dict.fromkeys(r.setup for r in reports):
        langs = _language_order(l for (s, _), rep in by_key.items() if s == setup for l in rep.languages)
        for lang in langs:
            cells = {}
            for obj in MODES:
                rep = by_key.get((setup, obj))
                if rep is not None and lang in rep.languages:
                    cells[obj] = rep.row(lang)
            yield setup, lang, cells


def reports_markdown(reports: Sequence[EvalReport]) -> str:
    lines = ["| Train Setup | Test Language | CODI acc. (%) | CoT-SFT acc. (%) | Δ (CODI − SFT) "
             "| SFT avg CoT tokens | CODI latents |",
             "|---|---|---:|---:|---:|---:|---:|"]
    for setup, lang, cells in _setup_language_rows(reports):
        c, s = cells.get("codi"), cells.get("sft")
        ood = any(r.ood for r in cells.values())
        name = LANGUAGES[lang].name if lang in LANGUAGES else lang
        label = f"{name} (OOD)" if ood else name
        delta = f"{c.accuracy - s.accuracy:+.2f}" if c and s else "–"
        lines.append(f"| {setup} | {label} | {f'{c.accuracy:.2f}' if c else '–'} "
                     f"| {f'{s.accuracy:.2f}' if s else '–'} | {delta} "
                     f"| {f'{s.thinking_tokens:.1f}' if s else '–'} | {f'{c.thinking_tokens:g}' if c else '–'} |")
    return "\n".join(lines) + "\n"


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_FIELDS)
    for r in rows:
        w.writerow([r.setup, r.language, int(r.ood), f"{r.codi_accuracy:.2f}", f"{r.sft_accuracy:.2f}",
                    f"{r.delta:.2f}", f"{r.sft_cot_tokens:.1f}", f"{r.codi_latents:g}"])
    return buf.getvalue()


def efficiency_markdown(reports: Sequence[EvalReport]) -> str:
    """Average explicit CoT length vs latent count per setup, with the compression ratio."""
    lines = ["| Train Setup | CoT-SFT (Avg Tokens) | CODI (Latent Tokens) | Compression Ratio |",
             "|---|---:|---:|---:|"]
    by_key = {(r.setup, r.objective): r for r in reports}
    for setup in dict.fromkeys(r.setup for r in reports):
        s, c = by_key.get((setup, "sft")), by_key.get((setup, "codi"))
        if not (s and c and s.rows and c.rows):
            continue
        avg = sum(r.thinking_tokens for r in s.rows) / len(s.rows)
        k = int(round(c.rows[0].thinking_tokens))
        lines.append(f"| {setup} | {avg:.1f} | {k} | {format_ratio(compression_ratio(avg, k))} |")
    return "\n".join(lines) + "\n"


FORMATS = {"csv": ("report.csv", reports_csv), "json": ("report.json", reports_json),
           "markdown": ("report.md", reports_markdown)}


def emit_report(reports: Sequence[EvalReport], fmt: str, out_dir) -> Path:
    """Write ``reports`` in one format under ``out_dir``; returns the file path."""
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {sorted(FORMATS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name, render = FORMATS[fmt]
    path = out_dir / name
    path.write_text(render(reports))
    return path


def emit_all(result: MatrixResult | Sequence[EvalReport], out_dir) -> list[Path]:
    reports = result.reports if isinstance(result, MatrixResult) else list(result)
    paths = [emit_report(reports, fmt, out_dir) for fmt in FORMATS]
    out_dir = Path(out_dir)
    comp = result.comparison if isinstance(result, MatrixResult) else compare(reports)
    (out_dir / "comparison.csv").write_text(comparison_csv(comp))
    (out_dir / "efficiency.md").write_text(efficiency_markdown(reports))
    return paths + [out_dir / "comparison.csv", out_dir / "efficiency.md"]
