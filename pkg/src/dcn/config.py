"""Declarative experiment configuration stored as sectioned INI text.

Every key has a default; unknown sections or keys are rejected. Lists
are comma separated, booleans are true/false, an empty value means
"derive" for optional lists.

Sections and defaults::

    [dataset]   source=synthetic path= num_classes=20 per_class=40
                image_size=32 difficulty=0.3 fractions=0.4,0.1,0.5 seed=0
    [embedding] stages=4 blocks_per_stage=3,4,6,3 channels_per_stage=16,32,64,128
                se_reduction=16 stem=false shared_epsilon=false
    [relation]  blocks_per_stage=2 channels_per_stage=(derived)
                score_weights=0.3,0.4,0.5,1.0
    [train]     see TrainConfig (minus the ablation switches)
    [eval]      ways=5 shots=1 queries=15 episodes=600 seed=0
    [ablation]  noise=true deep_supervision=true retrain=true
                block_kind=squeeze_excite
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import dataclass, field, fields, make_dataclass
from pathlib import Path

from .data import DatasetSplit, ImageDataset, load_directory_dataset, make_synthetic_dataset, split_classes
from .embedding import EmbeddingConfig
from .episodes import EpisodeSpec
from .relation import RelationConfig
from .training import TrainConfig

ABLATION_KEYS = ("deep_supervision", "noise", "retrain")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class DatasetSection:
    source: str = "synthetic"
    path: str = ""
    num_classes: int = 20
    per_class: int = 40
    image_size: int = 32
    difficulty: float = 0.3
    fractions: list[float] = field(default_factory=lambda: [0.4, 0.1, 0.5])
    seed: int = 0


@dataclass
class EmbeddingSection:
    stages: int = 4
    blocks_per_stage: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    channels_per_stage: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    se_reduction: int = 16
    stem: bool = False
    shared_epsilon: bool = False


@dataclass
class RelationSection:
    blocks_per_stage: int = 2
    channels_per_stage: typing.Optional[list[int]] = None
    score_weights: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 1.0])


_train_hints = typing.get_type_hints(TrainConfig)
# the [train] section mirrors TrainConfig minus the switches kept under [ablation]
TrainSection = make_dataclass(
    "TrainSection",
    [(f.name, _train_hints[f.name], field(default=f.default))
     for f in fields(TrainConfig) if f.name not in ABLATION_KEYS],
)


@dataclass
class EvalSection:
    ways: int = 5
    shots: int = 1
    queries: int = 15
    episodes: int = 600
    seed: int = 0


@dataclass
class AblationSection:
    noise: bool = True
    deep_supervision: bool = True
    retrain: bool = True
    block_kind: str = "squeeze_excite"


SECTIONS = {
    "dataset": DatasetSection,
    "embedding": EmbeddingSection,
    "relation": RelationSection,
    "train": TrainSection,
    "eval": EvalSection,
    "ablation": AblationSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    relation: RelationSection = field(default_factory=RelationSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def embedding_config(self) -> EmbeddingConfig:
        e = self.embedding
        return EmbeddingConfig(
            stages=e.stages,
            blocks_per_stage=list(e.blocks_per_stage),
            channels_per_stage=list(e.channels_per_stage),
            block_kind=self.ablation.block_kind,
            se_reduction=e.se_reduction,
            stem=e.stem,
            noise_enabled=self.ablation.noise,
            shared_epsilon=e.shared_epsilon,
        )

    def relation_config(self) -> RelationConfig:
        r = self.relation
        return RelationConfig(
            stages=self.embedding.stages,
            blocks_per_stage=r.blocks_per_stage,
            channels_per_stage=list(r.channels_per_stage) if r.channels_per_stage else None,
            score_weights=list(r.score_weights),
            block_kind=self.ablation.block_kind,
            se_reduction=self.embedding.se_reduction,
        )

    def train_config(self) -> TrainConfig:
        kw = {f.name: getattr(self.train, f.name) for f in fields(self.train)}
        kw.update({k: getattr(self.ablation, k) for k in ABLATION_KEYS})
        return TrainConfig(**kw)

    def eval_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.eval.ways, self.eval.shots, self.eval.queries)

    def build_dataset(self) -> tuple[ImageDataset, DatasetSplit]:
        """Dataset (centred with the meta-train mean) and its class split."""
        d = self.dataset
        if d.source == "synthetic":
            ds = make_synthetic_dataset(d.num_classes, d.per_class, d.image_size, d.difficulty, d.seed)
        else:
            ds = load_directory_dataset(d.path, d.image_size)
        split = split_classes(ds, d.fractions, d.seed)
        return ds.recentered(split.meta_train), split

    def to_dict(self) -> dict:
        return {name: {f.name: getattr(getattr(self, name), f.name) for f in fields(cls)}
                for name, cls in SECTIONS.items()}


def _parse_value(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return None if raw == "" else _parse_value(raw, inner)
    if origin is list:
        (item,) = typing.get_args(tp)
        return [_parse_value(x, item) for x in raw.split(",") if x.strip()]
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    problems = []
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            problems.append(f"[{name}]: unknown section")
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in hints:
                    problems.append(f"{name}.{key}: unknown key")
                    continue
                try:
                    values[key] = _parse_value(raw, hints[key])
                except ValueError as exc:
                    problems.append(f"{name}.{key}: {exc}")
        sections[name] = values
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**{name: SECTIONS[name](**vals) for name, vals in sections.items()})
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file not found: {p}"])
    return parse_config(p.read_text(encoding="utf-8"))


def format_config(cfg: ExperimentConfig) -> str:
    chunks = []
    for name, values in cfg.to_dict().items():
        lines = [f"[{name}]"] + [f"{k} = {_format_value(v)}" for k, v in values.items()]
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def validate(cfg: ExperimentConfig) -> None:
    """Check every derived config and report all failures at once."""
    problems = []
    d = cfg.dataset
    if d.source not in ("synthetic", "directory"):
        problems.append(f"dataset.source: expected synthetic or directory, got {d.source!r}")
    if d.source == "directory" and not d.path:
        problems.append("dataset.path: required when source = directory")
    if d.source == "synthetic" and (d.num_classes < 2 or d.per_class < 2):
        problems.append("dataset.num_classes/per_class: need at least 2 each")
    if len(d.fractions) != 3 or abs(sum(d.fractions) - 1.0) > 1e-9:
        problems.append(f"dataset.fractions: three values summing to 1 expected, got {d.fractions}")
    for name, build in (("embedding", cfg.embedding_config), ("relation", cfg.relation_config),
                        ("train", cfg.train_config), ("eval", cfg.eval_spec)):
        try:
            build()
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
    if problems:
        raise ConfigError(problems)
