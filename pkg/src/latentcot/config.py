"""JSON run configuration shared by the CLI commands."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import CorpusConfig
from .evaluate import ExperimentMatrix
from .train import TrainConfig
from .transformer import ModelConfig

PROFILES = {"desk": TrainConfig.desk, "reference": TrainConfig.reference}


@dataclass
class RunConfig:
    corpus: CorpusConfig
    model: dict
    train: TrainConfig
    matrix: ExperimentMatrix
    max_answer: int = 16
    max_total: int | None = None
    train_languages: list[str] | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        self.corpus.seed = seed
        self.train = self.train.replace(seed=seed)
        return self


def load_config(path) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    unknown = set(raw) - {"corpus", "model", "train", "matrix", "eval", "train_languages", "comment"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    train = dict(raw.get("train", {}))
    profile = train.pop("profile", "desk")
    if profile not in PROFILES:
        raise ValueError(f"train.profile must be one of {sorted(PROFILES)}")
    if isinstance(train.get("loss_weights"), dict):
        from .codi import LossWeights
        train["loss_weights"] = LossWeights(**train["loss_weights"])
    ev = raw.get("eval", {})
    return RunConfig(
        corpus=CorpusConfig.from_dict(raw.get("corpus", {})),
        model=dict(raw.get("model", {})),
        train=PROFILES[profile](**train),
        matrix=ExperimentMatrix.from_dict(raw.get("matrix", {})),
        max_answer=int(ev.get("max_answer", 16)),
        max_total=ev.get("max_total"),
        train_languages=raw.get("train_languages"),
        raw=raw,
    )
