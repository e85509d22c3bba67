"""Small pre-norm decoder-only transformer with a key/value cache."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ACTIVATION = "silu"


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 200
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    n_latents: int = 6
    proj_hidden: int = 128
    ff_mult: int = 4
    init_std: float = 0.2
    position: str = "learned"  # or "rotary"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.position not in ("rotary", "learned"):
            raise ValueError("position must be 'rotary' or 'learned'")
        if self.position == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary positions need an even head dimension")
        if self.n_latents < 1:
            raise ValueError("n_latents must be >= 1")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "proj_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def reference(cls, vocab_size: int = 200) -> "ModelConfig":
        """Architecture knobs at the published CODI values; not runnable on a desk."""
        return cls(vocab_size=vocab_size, max_seq_len=512, n_latents=6, proj_hidden=2048)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed parameter order and shapes; the checkpoint blob follows it."""
    d, V, S, H = config.d_model, config.vocab_size, config.max_seq_len, config.proj_hidden
    f = config.ff_mult * d
    layout = [("tok_emb", (V, d))]
    if config.position == "learned":
        layout.append(("pos_emb", (S, d)))
    layout += [("bot_embed", (1, d)), ("eot_embed", (1, d))]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        layout += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "w_qkv", (d, 3 * d)),
            (p + "w_o", (d, d)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "w_ff1", (d, f)),
            (p + "b_ff1", (f,)),
            (p + "w_ff2", (f, d)),
            (p + "b_ff2", (d,)),
        ]
    layout += [
        ("ln_f.g", (d,)),
        ("ln_f.b", (d,)),
        ("w_out", (d, V)),
        ("proj.w1", (d, H)),
        ("proj.b1", (H,)),
        ("proj.w2", (H, d)),
        ("proj.b2", (d,)),
        ("proj.ln.g", (d,)),
        ("proj.ln.b", (d,)),
    ]
    return layout


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        tn.zero_grad(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True)
                                         for k, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {}
        for name, shape in param_layout(config):
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True)
        return cls(config, tensors)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    std = config.init_std
    resid_std = std / math.sqrt(2 * config.n_layers)
    arrays = {}
    for name, shape in param_layout(config):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 1:
            arr = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif leaf in ("w_o", "w_ff2"):
            arr = rng.normal(0.0, resid_std, shape)
        elif name in ("proj.w1", "proj.w2"):
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0.0, std, shape)
        arrays[name] = arr
    return ModelParams.from_arrays(config, arrays)


@dataclass
class KVCache:
    """Per-layer attention keys/values (each heads x length x head_dim)."""

    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    length: int = 0


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: list[Tensor]
    cache: KVCache


def position_rows(params: ModelParams, start: int, count: int) -> Tensor | None:
    """Additive position rows, or None when positions enter through rotary attention."""
    if start + count > params.config.max_seq_len:
        raise SequenceOverflowError(
            f"positions {start}..{start + count - 1} exceed max_seq_len={params.config.max_seq_len}")
    if params.config.position != "learned":
        return None
    return tn.slice_rows(params["pos_emb"], start, start + count)


def _with_positions(rows: Tensor, params: ModelParams, start: int) -> Tensor:
    pos = position_rows(params, start, rows.shape[0])
    return rows if pos is None else rows + pos


def rotary_tables(config: ModelConfig, start: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    dh = config.d_model // config.n_heads
    half = dh // 2
    freqs = config.rope_base ** (-np.arange(half) / half)
    angles = np.arange(start, start + count)[:, None] * freqs[None, :]
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles), np.sin(angles)


def embed_tokens(params: ModelParams, tokens: Sequence[int], start: int = 0) -> Tensor:
    """Token rows (plus additive position rows under learned positions) for ``start, start+1, ...``."""
    tokens = list(tokens)
    d = params.config.d_model
    if not tokens:
        return Tensor(np.zeros((0, d)))
    bad = [t for t in tokens if not 0 <= t < params.config.vocab_size]
    if bad:
        raise IndexError(f"token id(s) {bad} outside vocabulary of {params.config.vocab_size}")
    return _with_positions(tn.embedding(params["tok_emb"], tokens), params, start)


def embed_vector(params: ModelParams, vec: Tensor, pos: int) -> Tensor:
    """A 1 x d input vector (marker or latent) placed at absolute position ``pos``."""
    return _with_positions(vec, params, pos)


def _causal_mask(T: int, past: int) -> np.ndarray:
    q = np.arange(T)[:, None] + past
    k = np.arange(past + T)[None, :]
    return np.where(k <= q, 0.0, tn.MASK_VALUE)


def forward(params: ModelParams, x: Tensor, cache: KVCache | None = None) -> ForwardOutput:
    """Run the stack on T input embeddings, continuing from ``cache`` when given."""
    cfg = params.config
    T = x.shape[0]
    if T < 1:
        raise ValueError("forward needs at least one position")
    past = cache.length if cache is not None else 0
    if past + T > cfg.max_seq_len:
        raise SequenceOverflowError(f"sequence length {past + T} exceeds max_seq_len={cfg.max_seq_len}")
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h
    mask = Tensor(_causal_mask(T, past))
    inv_sqrt = 1.0 / math.sqrt(dh)
    rope = rotary_tables(cfg, past, T) if cfg.position == "rotary" else None

    hidden = []
    new_layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = tn.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = a @ params[p + "w_qkv"]
        heads = tn.transpose(tn.reshape(qkv, (T, 3, h, dh)), (1, 2, 0, 3))  # 3 x h x T x dh
        q, k, v = heads[0], heads[1], heads[2]
        if rope is not None:
            q, k = tn.rotary(q, *rope), tn.rotary(k, *rope)
        if cache is not None and cache.layers:
            pk, pv = cache.layers[i]
            k = tn.concat([pk, k], axis=1)
            v = tn.concat([pv, v], axis=1)
        new_layers.append((k, v))
        scores = tn.scale(q @ tn.transpose(k, (0, 2, 1)), inv_sqrt) + mask
        att = tn.softmax(scores, axis=-1) @ v  # h x T x dh
        att = tn.reshape(tn.transpose(att, (1, 0, 2)), (T, d))
        x = x + att @ params[p + "w_o"]
        m = tn.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        m = tn.silu(m @ params[p + "w_ff1"] + params[p + "b_ff1"])
        x = x + (m @ params[p + "w_ff2"] + params[p + "b_ff2"])
        hidden.append(x)
    logits = tn.layer_norm(x, params["ln_f.g"], params["ln_f.b"]) @ params["w_out"]
    return ForwardOutput(logits, hidden, KVCache(new_layers, past + T))


def project_latent(params: ModelParams, h: Tensor) -> Tensor:
    """MLP mapping a final-layer hidden (1 x d) to the next latent input."""
    z = tn.silu(h @ params["proj.w1"] + params["proj.b1"])
    z = z @ params["proj.w2"] + params["proj.b2"]
    return tn.layer_norm(z, params["proj.ln.g"], params["proj.ln.b"])


def decode_greedy(params: ModelParams, prefix_embeddings: Tensor,
                  stop_token: int | Callable[[list[int], int], bool], max_new: int,
                  cache: KVCache | None = None) -> list[int]:
    """Append argmax tokens until ``stop_token`` or ``max_new`` tokens.

    ``stop_token`` may also be a predicate ``(emitted, next_token) -> bool``.
    The stopping token itself is not returned. Ties resolve to the lowest id.
    """
    is_stop = stop_token if callable(stop_token) else (lambda _, tok: tok == stop_token)
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    out: list[int] = []
    with tn.no_grad():
        res = forward(params, prefix_embeddings, cache)
        while True:
            tok = int(np.argmax(res.logits.data[-1]))
            if is_stop(out, tok):
                break
            out.append(tok)
            if len(out) >= max_new:
                break
            pos = res.cache.length
            if pos >= params.config.max_seq_len:
                break
            res = forward(params, embed_tokens(params, [tok], pos), res.cache)
    return out
