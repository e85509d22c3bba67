"""Explicit chain-of-thought supervised fine-tuning baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import transformer as tf
from .codi import Example, teacher_loss
from .tensor import Tensor
from .transformer import ModelParams


def sft_loss(params: ModelParams, example: Example) -> Tensor:
    """Prompt-masked cross-entropy; the same objective as the CODI teacher."""
    loss, _ = teacher_loss(params, example)
    return loss


@dataclass
class SftOutput:
    cot: list[int]
    answer: list[int]
    cot_length: int
    truncated: bool


def split_generation(tokens: Sequence[int], answer_prompt: int) -> tuple[list[int], list[int], bool]:
    """Split at the first answer prompt; ``found`` is False when it never appears."""
    tokens = list(tokens)
    if answer_prompt in tokens:
        i = tokens.index(answer_prompt)
        return tokens[:i], tokens[i + 1:], True
    return tokens, [], False


def sft_infer(params: ModelParams, question: Sequence[int], answer_prompt: int, stop_token: int,
              max_total: int) -> SftOutput:
    """Greedy CoT + answer generation from the bare question.

    Decoding stops at ``stop_token`` or at a second answer prompt, so the answer
    span never contains the prompt. ``truncated`` means the budget ran out first.
    """
    if max_total > params.config.max_seq_len - len(question):
        raise ValueError("max_total exceeds the room left after the question")

    def stop(emitted: list[int], tok: int) -> bool:
        return tok == stop_token or (tok == answer_prompt and answer_prompt in emitted)

    emitted = tf.decode_greedy(params, tf.embed_tokens(params, question, 0), stop, max_total)
    cot, answer, _ = split_generation(emitted, answer_prompt)
    return SftOutput(cot, answer, len(cot), truncated=len(emitted) >= max_total)
