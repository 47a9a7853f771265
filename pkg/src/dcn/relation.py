"""Relation column: one learned comparator per embedding level, chained."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .blocks import ConvBlock, init_weights
from .embedding import EmbeddingConfig, FeatureHierarchy

LEVEL_WEIGHTS = (0.3, 0.4, 0.5, 1.0)


@dataclass
class RelationConfig:
    """Relation column shape.

    ``channels_per_stage`` defaults to the next embedding level's width
    (the last module keeps the last width), so level v >= 2 consumes
    3x its embedding width: query + prototype + previous similarity map.
    """

    stages: int = 4
    blocks_per_stage: int = 2
    channels_per_stage: list[int] | None = None
    score_weights: list[float] = field(default_factory=lambda: list(LEVEL_WEIGHTS))
    block_kind: str = "squeeze_excite"
    se_reduction: int = 16

    def __post_init__(self):
        self.score_weights = [float(w) for w in self.score_weights]
        if len(self.score_weights) != self.stages:
            raise ValueError(f"need {self.stages} score weights, got {len(self.score_weights)}")
        if any(w <= 0 for w in self.score_weights):
            raise ValueError("score weights must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.channels_per_stage is not None:
            self.channels_per_stage = [int(c) for c in self.channels_per_stage]
            if len(self.channels_per_stage) != self.stages:
                raise ValueError("channels_per_stage needs one entry per stage")

    @classmethod
    def for_embedding(cls, emb: EmbeddingConfig, **overrides) -> "RelationConfig":
        kw = dict(stages=emb.stages, block_kind=emb.block_kind, se_reduction=emb.se_reduction)
        if "score_weights" not in overrides and emb.stages != len(LEVEL_WEIGHTS):
            kw["score_weights"] = [1.0] * emb.stages
        kw.update(overrides)
        return cls(**kw)

    def widths(self, emb: EmbeddingConfig) -> list[int]:
        if self.channels_per_stage is not None:
            return list(self.channels_per_stage)
        ch = emb.channels_per_stage
        return [ch[min(v + 1, len(ch) - 1)] for v in range(len(ch))]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoreVector:
    scores: tuple[float, ...]
    aggregate: float

    @classmethod
    def from_scores(cls, scores: Sequence[float], weights: Sequence[float]) -> "ScoreVector":
        return cls(tuple(float(s) for s in scores), aggregate_scores(scores, weights))


class RelationModule(nn.Module):
    def __init__(self, cin, cout, blocks, stride, kind, se_reduction):
        super().__init__()
        layers = [ConvBlock(cin, cout, stride, kind, se_reduction)]
        layers += [ConvBlock(cout, cout, 1, kind, se_reduction) for _ in range(blocks - 1)]
        self.blocks = nn.Sequential(*layers)
        self.score = nn.Linear(cout, 1)

    def forward(self, x):
        g = self.blocks(x)
        return g, self.score(g.mean(dim=(2, 3))).squeeze(-1)


class RelationColumn(nn.Module):
    def __init__(self, config: RelationConfig, embedding: EmbeddingConfig):
        super().__init__()
        if config.stages != embedding.stages:
            raise ValueError("relation and embedding columns need the same number of stages")
        self.config = config
        self.embedding_channels = list(embedding.channels_per_stage)
        widths = config.widths(embedding)
        modules = []
        prev = 0
        for v in range(config.stages):
            cin = 2 * embedding.channels_per_stage[v] + prev
            stride = 2 if v < config.stages - 1 else 1
            modules.append(
                RelationModule(cin, widths[v], config.blocks_per_stage, stride,
                               config.block_kind, config.se_reduction)
            )
            prev = widths[v]
        self.levels = nn.ModuleList(modules)
        init_weights(self)

    @property
    def weights(self) -> list[float]:
        return list(self.config.score_weights)

    def forward(self, query: FeatureHierarchy, prototypes: FeatureHierarchy, return_maps=False):
        """Score every (query, class) pair at every level.

        Returns pre-sigmoid logits shaped (n_query, n_class, V); with
        ``return_maps`` also the similarity maps, each (n*C, c, h, w).
        Channel order of each module input is [query, prototype, previous].
        """
        if len(query) != len(self.levels) or len(prototypes) != len(self.levels):
            raise ValueError("feature hierarchies must have one level per relation module")
        n, C = query[0].shape[0], prototypes[0].shape[0]
        g = None
        logits, maps = [], []
        for v, module in enumerate(self.levels):
            q, p = query[v], prototypes[v]
            if q.shape[1:] != p.shape[1:]:
                raise ValueError(f"level {v + 1}: query {tuple(q.shape)} vs prototype {tuple(p.shape)}")
            qx = q.unsqueeze(1).expand(n, C, *q.shape[1:]).reshape(n * C, *q.shape[1:])
            px = p.unsqueeze(0).expand(n, C, *p.shape[1:]).reshape(n * C, *p.shape[1:])
            parts = [qx, px]
            if g is not None:
                if g.shape[-2:] != q.shape[-2:]:
                    raise ValueError(
                        f"level {v + 1}: previous similarity map is {tuple(g.shape[-2:])}, "
                        f"features are {tuple(q.shape[-2:])}"
                    )
                parts.append(g)
            g, logit = module(torch.cat(parts, dim=1))
            logits.append(logit.view(n, C))
            maps.append(g)
        out = torch.stack(logits, dim=-1)
        return (out, maps) if return_maps else out

    def chain_parameters(self, v: int) -> list[torch.Tensor]:
        """Input-channel slices (as views) of level ``v`` (1-based) that read g^{v-1}."""
        if not 2 <= v <= len(self.levels):
            raise ValueError("only levels 2..V consume a previous similarity map")
        start = 2 * self.embedding_channels[v - 1]
        return [w[:, start:] for w in self.levels[v - 1].blocks[0].input_weights()]


def class_prototypes(features: FeatureHierarchy, labels, ways: int | None = None) -> FeatureHierarchy:
    """Per level, average the support features of each class along the sample axis."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    ways = int(labels.max()) + 1 if ways is None else ways
    levels = []
    for f in features.levels:
        protos = []
        for c in range(ways):
            members = f[labels == c]
            if members.shape[0] == 0:
                raise ValueError(f"class {c} has no support features")
            protos.append(members.mean(dim=0))
        levels.append(torch.stack(protos))
    return FeatureHierarchy(levels)


def relation_forward(query: FeatureHierarchy, prototypes: FeatureHierarchy, relation: RelationColumn):
    """Per-level relation scores in [0, 1], shaped (n_query, n_class, V)."""
    return torch.sigmoid(relation(query, prototypes))


def aggregate_scores(scores: Sequence[float], weights: Sequence[float]) -> float:
    if len(scores) != len(weights):
        raise ValueError(f"{len(scores)} scores but {len(weights)} weights")
    return float(sum(w * s for s, w in zip(scores, weights)))


def aggregate(level_scores, weights):
    """Vectorised weighted sum over the last (level) axis."""
    if level_scores.shape[-1] != len(weights):
        raise ValueError(f"{level_scores.shape[-1]} levels but {len(weights)} weights")
    if isinstance(level_scores, torch.Tensor):
        return level_scores @ torch.as_tensor(weights, dtype=level_scores.dtype)
    return np.asarray(level_scores) @ np.asarray(weights, dtype=np.float64)


def predict(aggregates) -> int:
    """Index of the highest score; ties go to the lowest index."""
    a = np.asarray(aggregates, dtype=np.float64)
    if a.size == 0:
        raise ValueError("cannot predict from an empty score list")
    return int(np.argmax(a))
