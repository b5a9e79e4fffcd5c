"""One flat, JSON-serialisable configuration for a whole pipeline run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from a2gnn.refine import CrfConfig
from a2gnn.trainer import TrainConfig


@dataclass
class PipelineConfig:
    # seeds
    ratio: float = 0.4
    stride: int = 2
    n_classes: int | None = None
    # affinity embedder and graph
    radius: float = 5.0
    sigma_edge: float = 1e-3
    aff_lambda: float = 0.01
    sigma_xy: float = 6.0
    sigma_rgb: float = 0.1
    embed_dim: int = 64
    embed_hidden: int = 32
    aff_steps: int = 150
    aff_lr: float = 0.02
    global_edges: bool = False
    # GNN training
    epochs: int = 100
    stage_split: int = 50
    learning_rate: float = 0.03
    weight_decay: float = 5e-4
    dropout: float = 0.5
    lambda1: float = 0.01
    beta: float = 1.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 256
    layers: int = 3
    use_mp: bool = True
    use_reg: bool = True
    use_cc: bool = True
    tau_cc: float = 0.0
    strict_eq28: bool = False
    train_beta: bool = False
    # CRF
    crf: bool = True
    crf_iterations: int = 10
    crf_w_appearance: float = 4.0
    crf_theta_alpha: float = 40.0
    crf_theta_beta: float = 13.0
    crf_w_smooth: float = 3.0
    crf_theta_gamma: float = 3.0
    # run
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.to_dict().items() if k in keys})

    def crf_config(self) -> CrfConfig:
        return CrfConfig(self.crf_iterations, self.crf_w_appearance, self.crf_theta_alpha,
                         self.crf_theta_beta, self.crf_w_smooth, self.crf_theta_gamma)

    def subset(self, *names) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in names}
