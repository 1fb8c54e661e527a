"""Trainable parameters, queries, and the training configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from ..binding import BindingKind
from ..errors import ConfigError
from ..kg import Direction
from ..memory import HarmonyParams, WeightingParams


@dataclass(frozen=True)
class Query:
    """A link-prediction probe: the known entity, relation, and missing side."""

    entity: int
    relation: int
    side: Direction


@dataclass
class EmbeddingTable:
    """Entity vectors plus left/right relation vectors."""

    entities: np.ndarray
    relations_left: np.ndarray
    relations_right: np.ndarray

    @property
    def n_entities(self) -> int:
        return self.entities.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relations_left.shape[0]

    @property
    def d_e(self) -> int:
        return self.entities.shape[1]

    @property
    def d_r(self) -> int:
        return self.relations_left.shape[1]


@dataclass
class TrainConfig:
    binding: BindingKind = BindingKind.TPR
    implicit: bool = False
    ablate_local_w: bool = False
    whiten: bool = False
    whiten_alpha: float = 0.2
    whiten_per_step: bool = False
    per_relation_w_score: bool = False
    eq8_verbatim: bool = False
    lam: float = math.inf
    d_e: int = 32
    d_r: int = 8
    k: int = 200
    n_negatives: int = 512
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    eval_every: int = 5  # 0 disables validation-based model selection

    @property
    def m(self) -> int:
        """Flattened memory dimension."""
        if self.binding is BindingKind.TPR:
            return self.d_r * self.d_e
        return self.d_e

    def validate(self) -> None:
        positive = {
            "d_e": self.d_e,
            "d_r": self.d_r,
            "k": self.k,
            "n_negatives": self.n_negatives,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.lam <= 0:
            raise ConfigError(f"lam must be positive or inf, got {self.lam}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if not 0.0 <= self.whiten_alpha <= 1.0:
            raise ConfigError(f"whiten_alpha must be in [0, 1], got {self.whiten_alpha}")
        if self.binding is BindingKind.CCONV and self.d_e != self.d_r:
            raise ConfigError("circular binding requires d_e == d_r")
        if self.whiten and self.d_e != self.d_r:
            raise ConfigError("whitening requires d_e == d_r")

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, BindingKind):
                value = value.value
            elif isinstance(value, float) and math.isinf(value):
                value = "inf"
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "binding" in kwargs:
            try:
                kwargs["binding"] = BindingKind(kwargs["binding"])
            except ValueError:
                raise ConfigError(f"unknown binding kind: {kwargs['binding']!r}")
        if kwargs.get("lam") == "inf":
            kwargs["lam"] = math.inf
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class ModelParams:
    """Every trainable array, grouped by module."""

    emb: EmbeddingTable
    weighting: WeightingParams
    harmony: HarmonyParams
    implicit_memories: np.ndarray | None = None

    def blocks(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in canonical (checkpoint) order."""
        out = {
            "entities": self.emb.entities,
            "relations_left": self.emb.relations_left,
            "relations_right": self.emb.relations_right,
            "w_score": self.weighting.w_score,
            "b_score": self.weighting.b_score,
            "w_global": self.harmony.w_global,
            "b_harmony": self.harmony.b,
            "w_map": self.harmony.w_map,
            "b_map": self.harmony.b_map,
        }
        if self.implicit_memories is not None:
            out["implicit_memories"] = self.implicit_memories
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            emb=EmbeddingTable(
                self.emb.entities.copy(),
                self.emb.relations_left.copy(),
                self.emb.relations_right.copy(),
            ),
            weighting=WeightingParams(
                self.weighting.w_score.copy(), self.weighting.b_score.copy()
            ),
            harmony=HarmonyParams(
                self.harmony.w_global.copy(),
                self.harmony.b.copy(),
                self.harmony.w_map.copy(),
                self.harmony.b_map.copy(),
                self.harmony.lam,
            ),
            implicit_memories=(
                None
                if self.implicit_memories is None
                else self.implicit_memories.copy()
            ),
        )

    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.blocks().values())


def init_params(
    cfg: TrainConfig, n_entities: int, n_relations: int, rng: np.random.Generator
) -> ModelParams:
    """Random initialization: embeddings at variance 1/d, small weights.

    The score/map/global matrices start at scale 0.1/m so harmony
    completion is well inside its stability region; biases start at zero.
    The global weight matrix is symmetrized once here.
    """
    cfg.validate()
    d_e, d_r, m = cfg.d_e, cfg.d_r, cfg.m
    dim = d_e + d_r
    emb = EmbeddingTable(
        entities=rng.normal(0.0, 1.0 / math.sqrt(d_e), size=(n_entities, d_e)),
        relations_left=rng.normal(0.0, 1.0 / math.sqrt(d_r), size=(n_relations, d_r)),
        relations_right=rng.normal(0.0, 1.0 / math.sqrt(d_r), size=(n_relations, d_r)),
    )
    n_w = 2 * n_relations if cfg.per_relation_w_score else 1
    scale = 0.1 / m
    weighting = WeightingParams(
        w_score=rng.normal(0.0, scale, size=(n_w, dim, dim)),
        b_score=np.zeros((2 * n_relations, dim)),
    )
    w_global = rng.normal(0.0, scale, size=(m, m))
    w_global = 0.5 * (w_global + w_global.T)
    harmony = HarmonyParams(
        w_global=w_global,
        b=np.zeros(m),
        w_map=rng.normal(0.0, scale, size=(m, m)),
        b_map=np.zeros(m),
        lam=cfg.lam,
    )
    implicit = None
    if cfg.implicit:
        implicit = rng.normal(0.0, 1.0 / math.sqrt(m), size=(n_entities, m))
    return ModelParams(emb, weighting, harmony, implicit)
