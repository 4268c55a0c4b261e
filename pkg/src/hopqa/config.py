"""Model and training configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    encoder_layers: int = 2
    kg_layers: int = 2
    # KG layers run before fusion; the rest run after.  Must be strictly
    # interior to matter, but 0 and kg_layers are accepted.
    fusion_layer: int = 1
    decoder_layers: int = 2
    max_source_len: int = 96
    max_kg_len: int = 256  # full-scale setting is 760
    max_decoder_len: int = 48
    patch_size: int = 2
    patch_dim: int = 8
    confidence_threshold: float = 0.5
    gate_threshold: float = 0.5
    max_steps: int = 4
    max_answer_len: int = 6
    # ablation switches
    no_fusion: bool = False
    no_kg: bool = False
    encoder_retrieval: bool = False
    no_retrieval: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("heads must divide dim")
        if not 0 <= self.fusion_layer <= self.kg_layers:
            raise ValueError("fusion_layer must lie in [0, kg_layers]")
        if self.encoder_retrieval and self.no_retrieval:
            raise ValueError("encoder_retrieval and no_retrieval are exclusive")

    @property
    def uses_fusion(self) -> bool:
        return not (self.no_fusion or self.no_kg)

    @property
    def decoder_retrieval(self) -> bool:
        return not (self.encoder_retrieval or self.no_retrieval)


@dataclass
class TrainConfig:
    steps: int = 3000
    lr: float = 3e-4  # fine-tuning a pretrained backbone used 1e-5; we start from random init
    batch_size: int = 2
    grad_accum: int = 1  # full-scale setting is 4
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    eval_every: int = 500
    log_every: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(model=model, **d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())
