"""Synthetic multilingual arithmetic-reasoning corpora.

Abstract problems (a start value followed by 2-4 add/subtract/multiply
steps) are rendered into synthetic "languages": each language owns a
disjoint block of word tokens and its own templates and word order, while
digits and punctuation are shared so every numeral survives verbatim. Every
problem is rendered into exactly one language.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .codi import Example

DIGITS = tuple(str(d) for d in range(10))
PERIOD, COMMA, QMARK = ".", ",", "?"
ANSWER_PROMPT = ":"
END_OF_ANSWER = "<eoa>"
SHARED_TOKENS = DIGITS + (PERIOD, COMMA, QMARK, ANSWER_PROMPT, END_OF_ANSWER)

OPS = ("add", "sub", "mul")
CONCEPTS = ("START", "TAKE", "THEN", "ASK", "HOW", "AND", "GIVES",
            "ADD", "SUB", "MUL", "PLUS", "MINUS", "TIMES")
OP_VERB = {"add": "ADD", "sub": "SUB", "mul": "MUL"}
OP_WORD = {"add": "PLUS", "sub": "MINUS", "mul": "TIMES"}

# Published five-language GSM8k-Aug-NL sample counts; used only for proportions.
REFERENCE_COUNTS = {"en": 95131, "de": 96139, "fr": 95868, "zh": 96178, "ur": 4619}


class CorpusError(ValueError):
    pass


class LexiconError(CorpusError):
    pass


class CorpusInvariantError(CorpusError):
    pass


# --------------------------------------------------------------------- problems


@dataclass(frozen=True)
class AbstractProblem:
    problem_id: int
    start: int
    ops: tuple[str, ...]
    operands: tuple[int, ...]
    intermediates: tuple[int, ...]

    @property
    def answer(self) -> int:
        return self.intermediates[-1]

    @property
    def difficulty(self) -> int:
        return len(self.ops)

    def signature(self) -> tuple:
        return (self.start, self.ops, self.operands)

    def steps(self) -> list[tuple[int, str, int, int]]:
        prev = [self.start, *self.intermediates[:-1]]
        return list(zip(prev, self.ops, self.operands, self.intermediates))


def apply_op(op: str, a: int, b: int) -> int:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown op {op!r}")


def gen_problem(seed: int, difficulty: int, problem_id: int = 0) -> AbstractProblem:
    """Deterministic chain of ``difficulty`` steps; every intermediate result is positive."""
    if not 2 <= difficulty <= 4:
        raise ValueError("difficulty must be in 2..4")
    rng = random.Random(seed)
    cur = start = rng.randint(1, 20)
    ops, operands, results = [], [], []
    for _ in range(difficulty):
        choices = ["add"]
        if cur >= 2:
            choices.append("sub")
        if cur * 2 <= 200:
            choices.append("mul")
        op = rng.choice(choices)
        if op == "add":
            b = rng.randint(1, 20)
        elif op == "sub":
            b = rng.randint(1, cur - 1)
        else:
            b = rng.randint(2, max(2, min(5, 200 // cur)))
        cur = apply_op(op, cur, b)
        ops.append(op)
        operands.append(b)
        results.append(cur)
    return AbstractProblem(problem_id, start, tuple(ops), tuple(operands), tuple(results))


# -------------------------------------------------------------------- languages


@dataclass(frozen=True)
class SyntheticLanguage:
    tag: str
    name: str
    lexicon: dict
    order: str = "SVO"  # or "SOV"
    tier: str = "high"  # or "low"

    def _op(self, n: str) -> list[str]:
        return ["OPV", n] if self.order == "SVO" else [n, "OPV"]

    @property
    def question_templates(self) -> list[dict]:
        templates = [
            {"intro": ["START", "N", PERIOD], "step": self._op("N") + [PERIOD], "outro": ["ASK", QMARK]},
            {"intro": ["TAKE", "N", COMMA], "step": ["THEN", *self._op("N"), COMMA], "outro": ["HOW", QMARK]},
        ]
        return templates[:1] if self.tier == "low" else templates

    @property
    def cot_templates(self) -> list[list[str]]:
        if self.order == "SVO":
            templates = [["N", "OPW", "N", "GIVES", "N", PERIOD],
                         ["THEN", "N", "OPW", "N", "GIVES", "N", PERIOD]]
        else:
            templates = [["N", "AND", "N", "OPW", "N", "GIVES", PERIOD],
                         ["THEN", "N", "AND", "N", "OPW", "N", "GIVES", PERIOD]]
        return templates[:1] if self.tier == "low" else templates

    def form(self, concept: str) -> str:
        try:
            return f"{self.lexicon[concept]}@{self.tag}"
        except KeyError:
            raise LexiconError(f"language {self.tag!r} has no word for {concept}") from None


LANGUAGES: dict[str, SyntheticLanguage] = {
    lang.tag: lang for lang in (
        SyntheticLanguage("en", "English-like", dict(
            START="start", TAKE="take", THEN="then", ASK="result", HOW="how-much", AND="and",
            GIVES="gives", ADD="add", SUB="subtract", MUL="multiply", PLUS="plus", MINUS="minus",
            TIMES="times")),
        SyntheticLanguage("de", "German-like", dict(
            START="beginne", TAKE="nimm", THEN="dann", ASK="ergebnis", HOW="wieviel", AND="und",
            GIVES="ergibt", ADD="addiere", SUB="subtrahiere", MUL="multipliziere", PLUS="plus",
            MINUS="minus", TIMES="mal"), order="SOV"),
        SyntheticLanguage("fr", "French-like", dict(
            START="commence", TAKE="prends", THEN="puis", ASK="resultat", HOW="combien", AND="et",
            GIVES="donne", ADD="ajoute", SUB="soustrais", MUL="multiplie", PLUS="plus",
            MINUS="moins", TIMES="fois")),
        SyntheticLanguage("zh", "Chinese-like", dict(
            START="kaishi", TAKE="na", THEN="ranhou", ASK="jieguo", HOW="duoshao", AND="he",
            GIVES="dedao", ADD="jia", SUB="jian", MUL="cheng", PLUS="jiashang", MINUS="jianqu",
            TIMES="chengyi")),
        SyntheticLanguage("ur", "Urdu-like", dict(
            START="shuru", TAKE="lo", THEN="phir", ASK="natija", HOW="kitna", AND="aur",
            GIVES="barabar", ADD="jama", SUB="tafreeq", MUL="zarb", PLUS="jod", MINUS="ghata",
            TIMES="guna"), order="SOV", tier="low"),
    )
}
HIGH_RESOURCE = tuple(t for t, l in LANGUAGES.items() if l.tier == "high")
LOW_RESOURCE = tuple(t for t, l in LANGUAGES.items() if l.tier == "low")


# ------------------------------------------------------------------- vocabulary


class Vocabulary:
    """Ordered token forms; the id of a token is its index."""

    def __init__(self, forms: Sequence[str]):
        self.forms = list(forms)
        self.index = {f: i for i, f in enumerate(self.forms)}
        if len(self.index) != len(self.forms):
            raise CorpusError("duplicate token forms")

    def __len__(self):
        return len(self.forms)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.forms == other.forms

    def id(self, form: str) -> int:
        return self.index[form]

    @property
    def answer_prompt(self) -> int:
        return self.index[ANSWER_PROMPT]

    @property
    def end_of_answer(self) -> int:
        return self.index[END_OF_ANSWER]

    @property
    def digit_ids(self) -> dict[int, str]:
        return {self.index[d]: d for d in DIGITS}

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.forms[i] for i in ids)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.forms).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.forms}, indent=0, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text())["tokens"])

    @classmethod
    def build(cls, languages: Iterable[SyntheticLanguage] | None = None) -> "Vocabulary":
        languages = LANGUAGES.values() if languages is None else languages
        forms = list(SHARED_TOKENS)
        for lang in languages:
            forms += [lang.form(c) for c in CONCEPTS if c in lang.lexicon]
        return cls(forms)

    def language_ids(self, tag: str) -> set[int]:
        return {i for f, i in self.index.items() if f.endswith("@" + tag)}


def number_tokens(n: int, vocab: Vocabulary) -> list[int]:
    return [vocab.id(ch) for ch in str(n)]


def answer_value(tokens: Sequence[int], vocab: Vocabulary) -> int | None:
    """Integer spelled by the digit tokens before end-of-answer; None if malformed."""
    digits = vocab.digit_ids
    chars = []
    for t in tokens:
        if t == vocab.end_of_answer:
            break
        if t not in digits:
            return None
        chars.append(digits[t])
    if not chars:
        return None
    return int("".join(chars))


# -------------------------------------------------------------------- rendering


def _expand(template: Sequence[str], numbers: Sequence[int], op: str | None,
            lang: SyntheticLanguage, vocab: Vocabulary) -> list[int]:
    out, nums = [], iter(numbers)
    for item in template:
        if item == "N":
            out += number_tokens(next(nums), vocab)
        elif item in SHARED_TOKENS:
            out.append(vocab.id(item))
        elif item == "OPV":
            out.append(vocab.id(lang.form(OP_VERB[op])))
        elif item == "OPW":
            out.append(vocab.id(lang.form(OP_WORD[op])))
        else:
            out.append(vocab.id(lang.form(item)))
    return out


def render(problem: AbstractProblem, language: SyntheticLanguage, vocab: Vocabulary,
           template_seed: int = 0, split: str = "train") -> Example:
    """Verbalize a problem in one language; numerals are copied digit for digit."""
    rng = random.Random(f"{template_seed}:{problem.problem_id}:{language.tag}")
    qt = rng.choice(language.question_templates)
    ct = rng.choice(language.cot_templates)
    question = _expand(qt["intro"], [problem.start], None, language, vocab)
    for op, b in zip(problem.ops, problem.operands):
        question += _expand(qt["step"], [b], op, language, vocab)
    question += _expand(qt["outro"], [], None, language, vocab)
    cot = []
    for prev, op, b, r in problem.steps():
        cot += _expand(ct, [prev, b, r], op, language, vocab)
    answer = number_tokens(problem.answer, vocab) + [vocab.end_of_answer]
    return Example(
        id=f"{language.tag}-{problem.problem_id:06d}",
        source_problem_id=problem.problem_id,
        language=language.tag,
        question=tuple(question),
        cot=tuple(cot),
        answer=tuple(answer),
        answer_prompt=vocab.answer_prompt,
        split=split,
    )


def cot_sentences(cot: Sequence[int], vocab: Vocabulary) -> list[list[int]]:
    period = vocab.id(PERIOD)
    sentences, cur = [], []
    for t in cot:
        cur.append(t)
        if t == period:
            sentences.append(cur)
            cur = []
    if cur:
        sentences.append(cur)
    return sentences


def _match(template: Sequence[str], tokens: Sequence[int], language: SyntheticLanguage,
           vocab: Vocabulary):
    digits = vocab.digit_ids
    ops_by_word = {vocab.id(language.form(OP_WORD[o])): o for o in OPS}
    nums, op, i = [], None, 0
    for item in template:
        if item == "N":
            j = i
            while j < len(tokens) and tokens[j] in digits:
                j += 1
            if j == i:
                return None
            nums.append(int("".join(digits[t] for t in tokens[i:j])))
            i = j
            continue
        if i >= len(tokens):
            return None
        if item == "OPW":
            op = ops_by_word.get(tokens[i])
            if op is None:
                return None
        else:
            expected = vocab.id(item) if item in SHARED_TOKENS else vocab.id(language.form(item))
            if tokens[i] != expected:
                return None
        i += 1
    if i != len(tokens):
        return None
    return nums, op


def parse_cot(cot: Sequence[int], language: SyntheticLanguage, vocab: Vocabulary) -> list[tuple[int, str, int, int]]:
    """Recover (prev, op, operand, result) per CoT sentence using the language's templates."""
    steps = []
    for sentence in cot_sentences(cot, vocab):
        for template in language.cot_templates:
            hit = _match(template, sentence, language, vocab)
            if hit is not None:
                (a, b, r), op = hit
                steps.append((a, op, b, r))
                break
        else:
            raise CorpusError(f"unparseable CoT sentence: {vocab.decode(sentence)}")
    return steps


def expected_digits(problem: AbstractProblem) -> Counter:
    """Digit multiset of a full rendering (question, CoT, answer) of ``problem``."""
    numbers = [problem.start, *problem.operands]
    for prev, _, b, r in problem.steps():
        numbers += [prev, b, r]
    numbers.append(problem.answer)
    return Counter("".join(str(n) for n in numbers))


def rendered_digits(example: Example, vocab: Vocabulary) -> Counter:
    digits = vocab.digit_ids
    return Counter(digits[t] for t in (*example.question, *example.cot, *example.answer) if t in digits)


def strip_final_cot_sentence(example: Example, vocab: Vocabulary) -> Example:
    """Drop the last CoT sentence; a single-sentence CoT becomes empty and is flagged."""
    sentences = cot_sentences(example.cot, vocab)
    kept = [t for s in sentences[:-1] for t in s]
    return example.with_cot(kept, empty_cot=not kept)


# ----------------------------------------------------------------------- corpus


@dataclass
class CorpusConfig:
    budgets: dict = field(default_factory=lambda: {t: 100 for t in LANGUAGES})
    test_fraction: float = 0.2
    min_difficulty: int = 2
    max_difficulty: int = 4
    pool_size: int | None = None
    strip_final_sentence: bool = False
    seed: int = 11

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def reference_budgets(total: int) -> dict[str, int]:
    """Per-language budgets in the published five-language proportions."""
    whole = sum(REFERENCE_COUNTS.values())
    return {t: max(1, round(total * n / whole)) for t, n in REFERENCE_COUNTS.items()}


@dataclass
class MultilingualCorpus:
    examples: list[Example]
    vocab: Vocabulary
    problems: dict = field(default_factory=dict, repr=False)

    @property
    def languages(self) -> list[str]:
        present = {e.language for e in self.examples}
        return [t for t in LANGUAGES if t in present] + sorted(present - set(LANGUAGES))

    def counts(self, split: str | None = None) -> dict[str, int]:
        c = Counter(e.language for e in self.examples if split is None or e.split == split)
        return {t: c[t] for t in self.languages if c[t]}

    def split(self, name: str, languages: Iterable[str] | None = None) -> list[Example]:
        keep = None if languages is None else set(languages)
        return [e for e in self.examples if e.split == name and (keep is None or e.language in keep)]

    def train(self, languages=None) -> list[Example]:
        return self.split("train", languages)

    def test(self, languages=None) -> list[Example]:
        return self.split("test", languages)

    def problem_ids(self, language: str | None = None) -> set[int]:
        return {e.source_problem_id for e in self.examples if language is None or e.language == language}

    def validate(self) -> None:
        """Raise CorpusInvariantError unless zero-overlap and split disjointness hold."""
        seen: dict[int, str] = {}
        for e in self.examples:
            other = seen.setdefault(e.source_problem_id, e.language)
            if other != e.language:
                raise CorpusInvariantError(
                    f"problem {e.source_problem_id} appears in both {other} and {e.language}")
        ids = [e.source_problem_id for e in self.examples]
        if len(ids) != len(set(ids)):
            raise CorpusInvariantError("a problem is rendered more than once")
        train_ids = {e.source_problem_id for e in self.examples if e.split == "train"}
        test_ids = {e.source_problem_id for e in self.examples if e.split == "test"}
        if train_ids & test_ids:
            raise CorpusInvariantError("train and test share problems")
        if sum(self.counts().values()) != len(self.examples):
            raise CorpusInvariantError("per-language counts do not sum to the total")
        for e in self.examples:
            p = self.problems.get(e.source_problem_id)
            if p is not None and answer_value(e.answer, self.vocab) != p.answer:
                raise CorpusInvariantError(f"{e.id}: answer tokens disagree with the problem")

    # ---- JSON Lines persistence

    def to_jsonl(self, path, vocab_path=None) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for e in self.examples:
                fh.write(json.dumps({
                    "id": e.id, "source_problem_id": e.source_problem_id, "language": e.language,
                    "split": e.split, "question": list(e.question), "cot": list(e.cot),
                    "answer": list(e.answer),
                }) + "\n")
        self.vocab.save(vocab_path or vocab_sidecar(path))

    @classmethod
    def from_jsonl(cls, path, vocab_path=None) -> "MultilingualCorpus":
        path = Path(path)
        vocab = Vocabulary.load(vocab_path or vocab_sidecar(path))
        examples = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            examples.append(Example(
                id=r["id"], source_problem_id=int(r["source_problem_id"]), language=r["language"],
                question=tuple(r["question"]), cot=tuple(r["cot"]), answer=tuple(r["answer"]),
                answer_prompt=vocab.answer_prompt, split=r["split"], empty_cot=not r["cot"],
            ))
        return cls(examples, vocab)


def vocab_sidecar(corpus_path) -> Path:
    p = Path(corpus_path)
    return p.with_name(p.stem + ".vocab.json")


def _problem_pool(n: int, seed: int, lo: int, hi: int, max_tries: int) -> list[AbstractProblem]:
    """``n`` distinct problems; duplicates (same start, ops, operands) are skipped."""
    rng = random.Random(seed)
    pool, seen = [], set()
    tries = 0
    while len(pool) < n:
        if tries >= max_tries:
            raise CorpusError(f"could only generate {len(pool)} distinct problems")
        tries += 1
        p = gen_problem(rng.getrandbits(63), rng.randint(lo, hi), problem_id=len(pool))
        if p.signature() in seen:
            continue
        seen.add(p.signature())
        pool.append(p)
    return pool


def build_corpus(config: CorpusConfig, vocab: Vocabulary | None = None) -> MultilingualCorpus:
    """Assign distinct problems to languages (low tier first) and split each language."""
    vocab = vocab or Vocabulary.build()
    budgets = {t: int(n) for t, n in config.budgets.items()}
    unknown = set(budgets) - set(LANGUAGES)
    if unknown:
        raise CorpusError(f"unknown languages: {sorted(unknown)}")
    if any(n < 1 for n in budgets.values()):
        raise CorpusError("every included language needs a budget >= 1")
    if not 0 <= config.test_fraction < 1:
        raise CorpusError("test_fraction must be in [0, 1)")
    total = sum(budgets.values())
    pool_size = total if config.pool_size is None else config.pool_size
    if total > pool_size:
        raise CorpusError(f"budgets total {total} exceeds the problem pool of {pool_size}")
    pool = _problem_pool(pool_size, config.seed, config.min_difficulty, config.max_difficulty,
                         max_tries=50 * pool_size + 1000)
    order = list(range(pool_size))
    random.Random(config.seed + 1).shuffle(order)

    priority = [t for t in LANGUAGES if t in budgets and LANGUAGES[t].tier == "low"]
    priority += [t for t in LANGUAGES if t in budgets and LANGUAGES[t].tier != "low"]
    examples, cursor = [], 0
    for tag in priority:
        n = budgets[tag]
        chosen = sorted(order[cursor:cursor + n])
        cursor += n
        n_test = round(n * config.test_fraction)
        if config.test_fraction > 0 and n >= 2:
            n_test = min(max(n_test, 1), n - 1)
        test_ids = set(random.Random(f"{config.seed}:split:{tag}").sample(chosen, n_test))
        for pid in chosen:
            ex = render(pool[pid], LANGUAGES[tag], vocab, config.seed,
                        "test" if pid in test_ids else "train")
            if config.strip_final_sentence:
                ex = strip_final_cot_sentence(ex, vocab)
            examples.append(ex)
    corpus = MultilingualCorpus(examples, vocab, {p.problem_id: p for p in pool})
    corpus.validate()
    return corpus


# ------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class StatsRow:
    language: str
    samples: int
    percent: float


def corpus_stats(corpus: MultilingualCorpus, split: str | None = None) -> list[StatsRow]:
    counts = corpus.counts(split)
    total = sum(counts.values())
    return [StatsRow(t, n, round(100.0 * n / total, 1)) for t, n in counts.items()]


def stats_csv(rows: Sequence[StatsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language", "samples", "percent"])
    for r in rows:
        w.writerow([r.language, r.samples, f"{r.percent:.1f}"])
    w.writerow(["total", sum(r.samples for r in rows), f"{100.0 if rows else 0.0:.1f}"])
    return buf.getvalue()


def stats_markdown(rows: Sequence[StatsRow]) -> str:
    lines = ["| Language | Samples | % of Total |", "|---|---:|---:|"]
    for r in rows:
        lines.append(f"| {LANGUAGES[r.language].name if r.language in LANGUAGES else r.language} "
                     f"| {r.samples:,} | {r.percent:.1f}% |")
    total = sum(r.samples for r in rows)
    lines.append(f"| **Total** | **{total:,}** | {100 if rows else 0}% |")
    return "\n".join(lines) + "\n"
