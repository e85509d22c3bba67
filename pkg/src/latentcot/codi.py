"""CODI self-distillation: teacher CoT loss, latent student, hidden-state KD."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from . import transformer as tf
from .tensor import Tensor
from .transformer import KVCache, ModelParams

KD_STD_EPS = 1e-6


@dataclass(frozen=True)
class Example:
    """One rendered problem. ``answer`` ends with the end-of-answer token."""

    id: str
    source_problem_id: int
    language: str
    question: tuple[int, ...]
    cot: tuple[int, ...]
    answer: tuple[int, ...]
    answer_prompt: int
    split: str = "train"
    empty_cot: bool = False

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be nonempty")
        if not self.answer:
            raise ValueError("answer must be nonempty")

    def teacher_stream(self) -> list[int]:
        return [*self.question, *self.cot, self.answer_prompt, *self.answer]

    def with_cot(self, cot: Sequence[int], **changes) -> "Example":
        return dataclasses.replace(self, cot=tuple(cot), **changes)


@dataclass
class LatentState:
    """The K projected thoughts plus the cache left behind by the rollout."""

    z: list[Tensor]
    cache: KVCache

    @property
    def k(self) -> int:
        return len(self.z)


@dataclass
class HiddenCapture:
    """Per-layer hidden rows (1 x d) at the answer-prompt position."""

    layers: list[Tensor]
    position: int

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # student
    beta: float = 20.0   # distillation
    gamma: float = 1.0   # teacher
    normalize_kd: bool = True

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma)
        if min(ws) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not any(ws):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class StepLoss:
    total: Tensor
    teacher: float
    student: float
    kd: float
    components: dict = field(default_factory=dict, repr=False)


def _capture(hidden: list[Tensor], pos: int) -> HiddenCapture:
    return HiddenCapture([tn.slice_rows(h, pos, pos + 1) for h in hidden], pos)


def latent_rollout(params: ModelParams, question: Sequence[int], k: int | None = None) -> LatentState:
    """Feed Q and <bot>, then K times project the last final-layer hidden and feed it back."""
    if not question:
        raise ValueError("question must be nonempty")
    k = params.config.n_latents if k is None else k
    if k < 1:
        raise ValueError("K must be >= 1")
    n = len(question)
    if n + k + 2 > params.config.max_seq_len:
        raise tf.SequenceOverflowError(f"question of {n} tokens plus {k} latents overflows")
    x = tn.concat([tf.embed_tokens(params, question, 0), tf.embed_vector(params, params["bot_embed"], n)])
    out = tf.forward(params, x)
    zs = []
    for _ in range(k):
        last = tn.slice_rows(out.hidden[-1], out.logits.shape[0] - 1, out.logits.shape[0])
        z = tf.project_latent(params, last)
        zs.append(z)
        out = tf.forward(params, tf.embed_vector(params, z, out.cache.length), out.cache)
    return LatentState(zs, out.cache)


def latent_rollout_reforward(params: ModelParams, question: Sequence[int], k: int) -> list[Tensor]:
    """Cache-free rollout: rerun the whole prefix at every step."""
    n = len(question)
    rows = [tf.embed_tokens(params, question, 0), tf.embed_vector(params, params["bot_embed"], n)]
    zs = []
    for _ in range(k):
        out = tf.forward(params, tn.concat(rows))
        T = out.logits.shape[0]
        z = tf.project_latent(params, tn.slice_rows(out.hidden[-1], T - 1, T))
        zs.append(z)
        rows.append(tf.embed_vector(params, z, T))
    return zs


def teacher_loss(params: ModelParams, example: Example) -> tuple[Tensor, HiddenCapture]:
    """Cross-entropy over r = [c, answer_prompt, y] with the question masked out."""
    stream = example.teacher_stream()
    if len(stream) > params.config.max_seq_len:
        raise tf.SequenceOverflowError(f"teacher stream of {len(stream)} tokens overflows")
    out = tf.forward(params, tf.embed_tokens(params, stream[:-1], 0))
    q = len(example.question)
    T = len(stream) - 1
    targets = stream[1:]
    mask = [t >= q - 1 for t in range(T)]
    loss = tn.cross_entropy(out.logits, targets, mask)
    return loss, _capture(out.hidden, q + len(example.cot))


def student_loss(params: ModelParams, example: Example, state: LatentState) -> tuple[Tensor, HiddenCapture]:
    """Continue the rollout with <eot>, the answer prompt and y; CE on y only."""
    pos = state.cache.length
    y = list(example.answer)
    rows = [tf.embed_vector(params, params["eot_embed"], pos),
            tf.embed_tokens(params, [example.answer_prompt, *y[:-1]], pos + 1)]
    out = tf.forward(params, tn.concat(rows), state.cache)
    # row 0 is <eot>; it carries no target
    loss = tn.cross_entropy(out.logits, [0, *y], [False] + [True] * len(y))
    cap = _capture(out.hidden, 1)
    cap.position = pos + 1
    return loss, cap


def kd_loss(teacher: HiddenCapture, student: HiddenCapture, normalize: bool = True) -> Tensor:
    """Layer-averaged L1 between stop-gradient teacher rows and student rows."""
    if len(teacher) != len(student):
        raise ValueError(f"layer count mismatch: {len(teacher)} vs {len(student)}")
    terms = []
    for t_row, s_row in zip(teacher.layers, student.layers):
        if t_row.shape != s_row.shape:
            raise ValueError(f"capture width mismatch: {t_row.shape} vs {s_row.shape}")
        target = tn.stop_gradient(t_row)
        term = tn.l1_mean(target, s_row)
        if normalize:
            term = tn.scale(term, 1.0 / (float(np.std(target.data)) + KD_STD_EPS))
        terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return tn.scale(total, 1.0 / len(terms))


def codi_step(params: ModelParams, example: Example, weights: LossWeights = LossWeights(),
              k: int | None = None) -> StepLoss:
    """Weighted CODI objective on one example; one parameter set, two streams."""
    t_loss, t_cap = teacher_loss(params, example)
    state = latent_rollout(params, example.question, k)
    s_loss, s_cap = student_loss(params, example, state)
    d_loss = kd_loss(t_cap, s_cap, weights.normalize_kd)
    total = tn.scale(s_loss, weights.alpha) + tn.scale(d_loss, weights.beta) + tn.scale(t_loss, weights.gamma)
    return StepLoss(total, t_loss.item(), s_loss.item(), d_loss.item(),
                    {"teacher": t_loss, "student": s_loss, "kd": d_loss})


@dataclass
class CodiOutput:
    answer: list[int]
    thinking_tokens: int
    explicit_tokens: int = 0
    truncated: bool = False


def codi_infer(params: ModelParams, question: Sequence[int], answer_prompt: int, stop_token: int,
               k: int | None = None, max_answer: int = 16) -> CodiOutput:
    """Latent rollout, then <eot> and the answer prompt, then greedy answer decoding."""
    with tn.no_grad():
        state = latent_rollout(params, question, k)
        pos = state.cache.length
        prefix = tn.concat([tf.embed_vector(params, params["eot_embed"], pos),
                            tf.embed_tokens(params, [answer_prompt], pos + 1)])
        ans = tf.decode_greedy(params, prefix, stop_token, max_answer, state.cache)
    truncated = len(ans) >= max_answer
    return CodiOutput(ans, state.k, 0, truncated)
