"""Pretraining, deeply supervised relation training, and retraining."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetSplit, ImageDataset
from .embedding import EmbeddingColumn, EmbeddingConfig
from .episodes import Episode, EpisodeSpec, augment_batch, check_capacity, sample_episode
from .relation import RelationColumn, RelationConfig, aggregate, class_prototypes

log = logging.getLogger(__name__)

BCE_EPS = 1e-7

Logger = Callable[[dict], None]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # embedding pretraining (epochs)
    pretrain_epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    lr_decay_factor: float = 5.0
    lr_decay_every: int = 60
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # relation training (episodes)
    relation_episodes: int = 2000
    relation_lr: float = 0.1
    relation_lr_decay_every: int = 1000
    eval_every: int = 200
    val_episodes: int = 50
    patience: int = 3
    train_ways: int = 5
    train_shots: int = 1
    train_queries: int = 5
    # ablation switches
    deep_supervision: bool = True
    noise: bool = True
    retrain: bool = True
    augment_pretrain: bool = True
    augment_relation: bool = True
    crop_min_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.relation_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr_decay_factor <= 0 or self.lr_decay_every < 1 or self.relation_lr_decay_every < 1:
            raise ValueError("lr decay factor must be positive and decay periods >= 1")
        if self.batch_size < 1 or self.eval_every < 1 or self.val_episodes < 1:
            raise ValueError("batch_size, eval_every and val_episodes must be >= 1")
        if not 0 < self.crop_min_scale <= 1:
            raise ValueError("crop_min_scale must lie in (0, 1]")

    @property
    def train_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.train_ways, self.train_shots, self.train_queries)

    def to_dict(self) -> dict:
        return asdict(self)


def step_lr(initial: float, step: int, factor: float, every: int) -> float:
    """``initial`` divided by ``factor`` once per completed ``every`` steps."""
    return initial / factor ** (step // every)


def rng_streams(seed: int, *salt: int) -> tuple[np.random.Generator, torch.Generator]:
    key = [seed, *salt]
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence(key).generate_state(1)[0]))
    return np.random.default_rng(key), gen


def build_embedding(config: EmbeddingConfig, seed: int) -> EmbeddingColumn:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EmbeddingColumn(config)


def build_relation(config: RelationConfig, emb: EmbeddingConfig, seed: int) -> RelationColumn:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 7919)
        return RelationColumn(config, emb)


@dataclass
class TrainedModel:
    embedding: EmbeddingColumn
    relation: RelationColumn | None
    embed_config: EmbeddingConfig
    rel_config: RelationConfig | None
    train_config: TrainConfig | None = None
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def weights(self) -> list[float]:
        return list(self.rel_config.score_weights)

    @torch.no_grad()
    def level_scores(self, episode: Episode) -> np.ndarray:
        """Relation scores (n_query, n_class, V) with deterministic features."""
        if self.relation is None:
            raise ValueError("model has no relation column")
        self.embedding.eval()
        self.relation.eval()
        support = torch.from_numpy(np.ascontiguousarray(episode.support_images))
        query = torch.from_numpy(np.ascontiguousarray(episode.query_images))
        feats = self.embedding(torch.cat([support, query]), mode="deterministic")
        m = len(support)
        protos = class_prototypes(feats.select(slice(0, m)), episode.support_labels, episode.ways)
        logits = self.relation(feats.select(slice(m, None)), protos)
        return torch.sigmoid(logits).double().numpy()


def deep_supervised_loss(scores, match_labels, weights: Sequence[float], deep_supervision: bool = True):
    """Mean over pairs of the weighted per-level binary cross entropy.

    ``scores`` is (pairs, V) in [0, 1]; ``match_labels`` is (pairs,) of
    0/1. Without deep supervision only the last level counts, weight 1.
    """
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(match_labels, dtype=scores.dtype)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {tuple(scores.shape)} do not match {labels.shape[0]} labels")
    if scores.shape[1] != len(weights):
        raise ValueError(f"{scores.shape[1]} levels but {len(weights)} weights")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("match labels must be 0 or 1")
    if deep_supervision:
        w = torch.as_tensor(weights, dtype=scores.dtype)
    else:
        w = torch.zeros(len(weights), dtype=scores.dtype)
        w[-1] = 1.0
    r = scores.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = labels[:, None]
    bce = -(y * torch.log(r) + (1 - y) * torch.log(1 - r))
    return (bce @ w).mean()


def match_labels(query_labels, ways: int) -> torch.Tensor:
    """(n*C,) indicators, query-major: 1 where the pair's class is the query's."""
    q = torch.as_tensor(np.asarray(query_labels), dtype=torch.long)
    return F.one_hot(q, ways).reshape(-1).float()


def _check_finite(loss, phase, step):
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingError(f"{phase}: non-finite loss {value} at step {step}; training diverged")


def pretrain_embedding(
    dataset: ImageDataset,
    classes: Sequence[int],
    embed_config: EmbeddingConfig,
    train_config: TrainConfig,
    seed: int | None = None,
    logger: Logger | None = None,
    phase: str = "pretrain",
) -> tuple[EmbeddingColumn, list[dict]]:
    """Train the embedding as a ``len(classes)``-way classifier with cross entropy."""
    tc = train_config
    seed = tc.seed if seed is None else seed
    classes = sorted(classes)
    if not classes:
        raise ValueError("pretraining needs at least one class")
    cfg = copy.deepcopy(embed_config)
    cfg.num_pretrain_classes = len(classes)
    model = build_embedding(cfg, seed)
    idx = np.flatnonzero(np.isin(dataset.labels, classes))
    remap = {c: i for i, c in enumerate(classes)}
    targets = torch.tensor([remap[int(c)] for c in dataset.labels[idx]])
    np_rng, gen = rng_streams(seed, 1)
    opt = torch.optim.SGD(model.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    mode = "sample" if (cfg.noise_enabled and tc.noise) else "deterministic"
    scale = (tc.crop_min_scale, 1.0)
    history = []
    step = 0
    model.train()
    for epoch in range(tc.pretrain_epochs):
        lr = step_lr(tc.lr, epoch, tc.lr_decay_factor, tc.lr_decay_every)
        for group in opt.param_groups:
            group["lr"] = lr
        order = np_rng.permutation(len(idx))
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, len(order), tc.batch_size):
            b = order[start : start + tc.batch_size]
            if len(b) < 2:
                continue  # batch norm needs more than one sample
            x = augment_batch(dataset.images[idx[b]], np_rng, tc.augment_pretrain, scale)
            x = torch.from_numpy(np.ascontiguousarray(x))
            logits = model.classify_logits(model(x, mode=mode, generator=gen)[-1])
            loss = F.cross_entropy(logits, targets[b])
            _check_finite(loss, phase, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            loss_sum += float(loss.detach()) * len(b)
            correct += int((logits.argmax(1) == targets[b]).sum())
            total += len(b)
        rec = {"phase": phase, "step": epoch + 1, "loss": loss_sum / max(total, 1), "lr": lr,
               "train_acc": correct / max(total, 1)}
        history.append(rec)
        if logger:
            logger(rec)
    model.eval()
    return model, history


def relation_step(embedding, relation, episode: Episode, tc: TrainConfig, np_rng, gen, weights):
    """Embed one episode with frozen features and return its loss."""
    scale = (tc.crop_min_scale, 1.0)
    s = augment_batch(episode.support_images, np_rng, tc.augment_relation, scale)
    q = augment_batch(episode.query_images, np_rng, tc.augment_relation, scale)
    x = torch.from_numpy(np.ascontiguousarray(np.concatenate([s, q])))
    mode = "sample" if (embedding.config.noise_enabled and tc.noise) else "deterministic"
    with torch.no_grad():
        feats = embedding(x, mode=mode, generator=gen)
    m = len(s)
    protos = class_prototypes(feats.select(slice(0, m)), episode.support_labels, episode.ways)
    logits = relation(feats.select(slice(m, None)), protos)
    scores = torch.sigmoid(logits).reshape(-1, len(weights))
    return deep_supervised_loss(scores, match_labels(episode.query_labels, episode.ways),
                                weights, tc.deep_supervision)


@torch.no_grad()
def episode_accuracy(model: TrainedModel, episodes: Sequence[Episode]) -> float:
    accs = []
    for ep in episodes:
        agg = aggregate(model.level_scores(ep), model.weights)
        accs.append(float(np.mean(agg.argmax(axis=1) == ep.query_labels)))
    return float(np.mean(accs))


def train_relation(
    dataset: ImageDataset,
    train_classes: Sequence[int],
    val_classes: Sequence[int] | None,
    embedding: EmbeddingColumn,
    rel_config: RelationConfig,
    train_config: TrainConfig,
    seed: int | None = None,
    episodes: int | None = None,
    logger: Logger | None = None,
    phase: str = "relation",
) -> tuple[RelationColumn, int, list[dict]]:
    """Optimise the relation column on episodes while the embedding stays frozen.

    With ``val_classes`` the column is evaluated every ``eval_every``
    episodes and the best one is returned with its episode count; early
    stopping after ``patience`` evaluations without improvement. Without
    them, exactly ``episodes`` episodes are run.
    """
    tc = train_config
    seed = tc.seed if seed is None else seed
    total = tc.relation_episodes if episodes is None else episodes
    spec = tc.train_spec
    train_classes = tuple(sorted(train_classes))
    check_capacity(dataset, train_classes, spec)

    embedding.eval()
    for p in embedding.parameters():
        p.requires_grad_(False)
    relation = build_relation(rel_config, embedding.config, seed)
    weights = rel_config.score_weights
    frozen = TrainedModel(embedding, relation, embedding.config, rel_config)

    val_eps = []
    if val_classes:
        val_classes = tuple(sorted(val_classes))
        val_spec = EpisodeSpec(min(spec.ways, len(val_classes)), spec.shots, spec.queries_per_class)
        check_capacity(dataset, val_classes, val_spec)
        vrng = np.random.default_rng([seed, 3])
        val_eps = [sample_episode(dataset, val_classes, None, val_spec, vrng) for _ in range(tc.val_episodes)]

    np_rng, gen = rng_streams(seed, 2)
    opt = torch.optim.SGD(relation.parameters(), lr=tc.relation_lr, momentum=tc.momentum,
                          weight_decay=tc.weight_decay)
    history = []
    best_acc, best_ep, best_state, stale = -1.0, 0, copy.deepcopy(relation.state_dict()), 0
    for step in range(1, total + 1):
        lr = step_lr(tc.relation_lr, step - 1, tc.lr_decay_factor, tc.relation_lr_decay_every)
        for group in opt.param_groups:
            group["lr"] = lr
        relation.train()
        ep = sample_episode(dataset, train_classes, None, spec, np_rng)
        loss = relation_step(embedding, relation, ep, tc, np_rng, gen, weights)
        _check_finite(loss, phase, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"phase": phase, "step": step, "loss": float(loss.detach()), "lr": lr}
        if val_eps and (step % tc.eval_every == 0 or step == total):
            acc = episode_accuracy(frozen, val_eps)
            rec["val_acc"] = acc
            if acc > best_acc:
                best_acc, best_ep, stale = acc, step, 0
                best_state = copy.deepcopy(relation.state_dict())
            else:
                stale += 1
        history.append(rec)
        if logger:
            logger(rec)
        if val_eps and stale >= tc.patience:
            log.info("%s: early stop at episode %d, best %d (val acc %.4f)", phase, step, best_ep, best_acc)
            break
    if val_eps:
        relation.load_state_dict(best_state)
    else:
        best_ep = total
    relation.eval()
    return relation, best_ep, history


@dataclass
class PipelineResult:
    pretrained: TrainedModel
    phase2: TrainedModel
    final: TrainedModel
    best_episode_count: int


def retrain_full(
    dataset: ImageDataset,
    split: DatasetSplit,
    embed_config: EmbeddingConfig,
    rel_config: RelationConfig,
    train_config: TrainConfig,
    best_episode_count: int,
    seed: int | None = None,
    logger: Logger | None = None,
) -> TrainedModel:
    """Pretrain again on meta-train + meta-val classes, then train the
    relation column for exactly ``best_episode_count`` episodes."""
    seed = train_config.seed if seed is None else seed
    classes = split.union("meta_train", "meta_val")
    emb, h1 = pretrain_embedding(dataset, classes, embed_config, train_config, seed + 101, logger,
                                 phase="retrain_pretrain")
    rel, _, h2 = train_relation(dataset, classes, None, emb, rel_config, train_config, seed + 101,
                                episodes=max(1, best_episode_count), logger=logger,
                                phase="retrain_relation")
    return TrainedModel(emb, rel, emb.config, rel_config, train_config, dataset.channel_mean.copy(), h1 + h2)


def run_pipeline(
    dataset: ImageDataset,
    split: DatasetSplit,
    embed_config: EmbeddingConfig,
    rel_config: RelationConfig,
    train_config: TrainConfig,
    logger: Logger | None = None,
) -> PipelineResult:
    """Pretrain, relation-train with early stopping, then optionally retrain."""
    tc = train_config
    embed_config = copy.deepcopy(embed_config)
    embed_config.noise_enabled = embed_config.noise_enabled and tc.noise
    emb, h1 = pretrain_embedding(dataset, split.meta_train, embed_config, tc, tc.seed, logger)
    pretrained = TrainedModel(emb, None, emb.config, None, tc, dataset.channel_mean.copy(), list(h1))
    rel, best, h2 = train_relation(dataset, split.meta_train, split.meta_val, emb, rel_config, tc,
                                   tc.seed, logger=logger)
    phase2 = TrainedModel(emb, rel, emb.config, rel_config, tc, dataset.channel_mean.copy(), h1 + h2)
    phase2.meta["best_episode_count"] = best
    if not tc.retrain:
        return PipelineResult(pretrained, phase2, phase2, best)
    final = retrain_full(dataset, split, embed_config, rel_config, tc, best, tc.seed, logger)
    final.history = h1 + h2 + final.history
    final.meta["best_episode_count"] = best
    return PipelineResult(pretrained, phase2, final, best)
