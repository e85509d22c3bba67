"""AdamW + cosine schedule training loop and the binary checkpoint format."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .codi import Example, LossWeights, codi_step
from .sft import sft_loss
from .transformer import ACTIVATION, ModelConfig, ModelParams, init_params, param_layout

log = logging.getLogger(__name__)

OBJECTIVES = ("codi", "sft")
MAGIC = b"LCOTCKPT"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8e-4
    scheduler: str = "cosine"
    warmup_ratio: float = 0.03
    weight_decay: float = 0.1
    max_grad_norm: float = 2.0
    epochs: int = 10
    batch_size: int = 128
    max_seq_len: int = 512
    seed: int = 11
    objective: str = "codi"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.scheduler != "cosine":
            raise ValueError("only the cosine scheduler is implemented")

    @classmethod
    def reference(cls, **overrides) -> "TrainConfig":
        """Shared CODI / CoT-SFT hyperparameters at their published values."""
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-batch settings that train a d_model=64 model in minutes on one core."""
        base = dict(learning_rate=1e-3, batch_size=1, epochs=10, max_seq_len=256,
                    loss_weights=LossWeights(beta=1.0))
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------ optimizer


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warmup = math.ceil(config.warmup_ratio * total_steps)
    peak = config.learning_rate
    if step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, config: TrainConfig) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


# ----------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_hash: str
    step: int
    params: ModelParams
    activation: str = ACTIVATION

    def header(self) -> dict:
        return {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "vocab_hash": self.vocab_hash,
            "step": self.step,
            "activation": self.activation,
            "param_layout": [[n, list(s)] for n, s in param_layout(self.model_config)],
        }


def round_to_f32(params: ModelParams) -> ModelParams:
    """Copy of ``params`` with every value rounded to float32 precision."""
    arrays = {k: v.astype("<f4").astype(np.float64) for k, v in params.arrays().items()}
    return ModelParams.from_arrays(params.config, arrays)


def save(ckpt: Checkpoint, path) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header, sha256(header),
    then every parameter as little-endian float32 in ``param_layout`` order."""
    blob = b"".join(ckpt.params[name].data.astype("<f4").tobytes()
                    for name, _ in param_layout(ckpt.model_config))
    header = ckpt.header()
    header["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    header["blob_bytes"] = len(blob)
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(hashlib.sha256(hbytes).digest())
        fh.write(blob)


def load(path, vocab_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; reject corrupt headers, blobs, or a vocabulary mismatch."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", raw, off)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 8
    hbytes = raw[off:off + hlen]
    digest = raw[off + hlen:off + hlen + 32]
    if len(hbytes) != hlen or hashlib.sha256(hbytes).digest() != digest:
        raise CheckpointError("checkpoint header is corrupt")
    header = json.loads(hbytes)
    blob = raw[off + hlen + 32:]
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError("checkpoint parameter blob is corrupt")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointError("checkpoint was trained with a different vocabulary")
    model_config = ModelConfig.from_dict(header["model_config"])
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    arrays, pos = {}, 0
    for name, shape in param_layout(model_config):
        n = int(np.prod(shape))
        arrays[name] = values[pos:pos + n].reshape(shape)
        pos += n
    return Checkpoint(model_config, TrainConfig.from_dict(header["train_config"]), header["vocab_hash"],
                      int(header["step"]), ModelParams.from_arrays(model_config, arrays), header["activation"])


# ----------------------------------------------------------------------- loop

LOG_FIELDS = ("step", "lr", "total", "teacher", "student", "kd")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def example_loss(params: ModelParams, example: Example, config: TrainConfig):
    """(graph loss, component dict) for one example under the configured objective."""
    if config.objective == "codi":
        s = codi_step(params, example, config.loss_weights)
        return s.total, {"teacher": s.teacher, "student": s.student, "kd": s.kd}
    loss = sft_loss(params, example)
    return loss, {"teacher": loss.item(), "student": 0.0, "kd": 0.0}


def total_steps(n_examples: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n_examples / config.batch_size)


def train(config: TrainConfig, examples: Sequence[Example], model_config: ModelConfig,
          vocab_hash: str = "", params: ModelParams | None = None) -> TrainResult:
    """Train on ``examples``; the log row for step t precedes update t."""
    examples = list(examples)
    if not examples:
        raise ValueError("cannot train on an empty corpus")
    params = params if params is not None else init_params(model_config, config.seed)
    rng = np.random.default_rng(config.seed)
    n_total = total_steps(len(examples), config)
    state = AdamState()
    rows = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            sums = {"total": 0.0, "teacher": 0.0, "student": 0.0, "kd": 0.0}
            for ex in batch:
                loss, parts = example_loss(params, ex, config)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (epoch {epoch}, example {ex.id}): "
                        f"total={value} parts={parts}")
                tn.backward(tn.scale(loss, 1.0 / len(batch)))
                sums["total"] += value
                for k, v in parts.items():
                    sums[k] += v
            lr = lr_at(step + 1, n_total, config)
            rows.append({"step": step, "lr": lr, **{k: v / len(batch) for k, v in sums.items()}})
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for name, t in params.named()}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f"non-finite gradient at step {step}")
            clip_grad_norm(list(grads.values()), config.max_grad_norm)
            adamw_step({name: t.data for name, t in params.named()}, grads, state, lr, config)
            step += 1
        log.info("epoch %d done, last loss %.4f", epoch, rows[-1]["total"])
    params.zero_grad()
    ckpt = Checkpoint(model_config, config, vocab_hash, step, round_to_f32(params))
    return TrainResult(ckpt, rows)


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
