"""Episodic evaluation, cross-way transfer and per-module diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import DatasetSplit, ImageDataset
from .embedding import parameter_checksum
from .episodes import Episode, EpisodeSpec, check_capacity, sample_episode
from .stats import ci95, spearman


class Scorer(Protocol):
    """Anything that scores an episode level by level.

    ``level_scores`` returns (n_query, n_class, V) values in [0, 1];
    ``weights`` are the V aggregation weights.
    """

    weights: Sequence[float]

    def level_scores(self, episode: Episode) -> np.ndarray: ...


@dataclass
class EvalReport:
    spec: EpisodeSpec
    num_episodes: int
    mean_accuracy: float
    ci95: float
    per_module_accuracy: list[float]
    per_class_accuracy: dict[int, list[float]]
    episode_accuracies: list[float]
    per_class_combined: dict[int, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "ways": self.spec.ways,
            "shots": self.spec.shots,
            "queries_per_class": self.spec.queries_per_class,
            "num_episodes": self.num_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "per_module_accuracy": self.per_module_accuracy,
            "per_class_accuracy": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
            "per_class_combined": {str(k): v for k, v in sorted(self.per_class_combined.items())},
        }

    def write(self, report_path, episodes_csv_path) -> None:
        Path(report_path).write_text(json.dumps(self.to_record(), sort_keys=True) + "\n")
        lines = ["episode,accuracy"] + [f"{i},{a!r}" for i, a in enumerate(self.episode_accuracies)]
        Path(episodes_csv_path).write_text("\n".join(lines) + "\n")

    def summary(self) -> str:
        return f"{self.mean_accuracy * 100:.2f} ± {self.ci95 * 100:.2f}%"


class _Tally:
    """Per-class correct/total counts for every module and for the aggregate."""

    def __init__(self, levels: int):
        self.levels = levels
        self.correct: dict[int, np.ndarray] = {}
        self.total: dict[int, int] = {}

    def add(self, episode: Episode, level_correct: np.ndarray, combined: np.ndarray) -> None:
        # level_correct: (n_query, V+1) booleans, last column the aggregate
        for row, local in zip(np.column_stack([level_correct, combined]), episode.query_labels):
            c = episode.classes[int(local)]
            self.correct.setdefault(c, np.zeros(self.levels + 1, dtype=np.int64))
            self.correct[c] += row
            self.total[c] = self.total.get(c, 0) + 1

    def accuracy(self, c: int) -> np.ndarray:
        return self.correct[c] / self.total[c]


def _score_episode(scorer: Scorer, episode: Episode):
    scores = np.asarray(scorer.level_scores(episode), dtype=np.float64)
    n, C = len(episode.query_labels), episode.ways
    if scores.shape[:2] != (n, C):
        raise ValueError(f"scorer returned {scores.shape}, expected ({n}, {C}, V)")
    combined = scores @ np.asarray(scorer.weights, dtype=np.float64)
    # argmax returns the first maximum: ties go to the lowest class index
    combined_ok = combined.argmax(axis=1) == episode.query_labels
    level_ok = scores.argmax(axis=1) == episode.query_labels[:, None]
    return scores, combined_ok, level_ok


def _classes(split, part):
    return split.part(part) if isinstance(split, DatasetSplit) else tuple(split)


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def evaluate(
    scorer: Scorer,
    dataset: ImageDataset,
    split: DatasetSplit | Sequence[int],
    part: str | None,
    spec: EpisodeSpec,
    num_episodes: int = 600,
    rng: np.random.Generator | int = 0,
) -> EvalReport:
    """Average per-episode accuracy with a 95% interval.

    Episodes are sampled in sequence from ``rng`` so the report is a
    function of (scorer, data, spec, seed).
    """
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    classes = _classes(split, part)
    check_capacity(dataset, classes, spec)
    rng = _rng(rng)
    V = len(scorer.weights)
    tally = _Tally(V)
    accs, level_hits, level_total = [], np.zeros(V), 0
    for _ in range(num_episodes):
        ep = sample_episode(dataset, classes, None, spec, rng)
        _, combined_ok, level_ok = _score_episode(scorer, ep)
        accs.append(float(combined_ok.mean()))
        level_hits += level_ok.sum(axis=0)
        level_total += len(combined_ok)
        tally.add(ep, level_ok, combined_ok)
    per_class = {c: [float(x) for x in tally.accuracy(c)[:V]] for c in sorted(tally.total)}
    combined = {c: float(tally.accuracy(c)[V]) for c in sorted(tally.total)}
    return EvalReport(
        spec=spec,
        num_episodes=num_episodes,
        mean_accuracy=float(np.mean(accs)),
        ci95=ci95(accs),
        per_module_accuracy=[float(x) for x in level_hits / level_total],
        per_class_accuracy=per_class,
        episode_accuracies=accs,
        per_class_combined=combined,
    )


def cross_way_evaluate(model, dataset, split, part, spec: EpisodeSpec, num_episodes=600, rng=0) -> EvalReport:
    """Evaluate at a class cardinality other than the training one, untouched."""
    before = [parameter_checksum(m) for m in (model.embedding, model.relation)]
    report = evaluate(model, dataset, split, part, spec, num_episodes, rng)
    after = [parameter_checksum(m) for m in (model.embedding, model.relation)]
    if before != after:
        raise RuntimeError("evaluation modified model parameters")
    return report


def per_module_accuracy(scorer: Scorer, dataset, split, part, spec, module_index: int,
                        num_episodes=600, rng=0) -> float:
    """Accuracy when predicting from the score of one module (1-based) alone."""
    V = len(scorer.weights)
    if not 1 <= module_index <= V:
        raise ValueError(f"module index must lie in 1..{V}, got {module_index}")
    report = evaluate(scorer, dataset, split, part, spec, num_episodes, rng)
    return report.per_module_accuracy[module_index - 1]


@dataclass
class CorrelationMatrix:
    matrix: np.ndarray
    sample_size: int

    def to_csv(self) -> str:
        V = self.matrix.shape[0]
        names = [f"RM{v + 1}" for v in range(V)]
        lines = [",".join(["", *names])]
        for name, row in zip(names, self.matrix):
            lines.append(",".join([name, *(repr(float(x)) for x in row)]))
        return "\n".join(lines) + "\n"

    def adjacent_vs_distant(self) -> tuple[float, float]:
        """Mean correlation of modules one apart and two apart."""
        V = self.matrix.shape[0]
        one = [self.matrix[v, v + 1] for v in range(V - 1)]
        two = [self.matrix[v, v + 2] for v in range(V - 2)]
        return float(np.mean(one)), float(np.mean(two)) if two else float("nan")


def module_correlation_matrix(
    scorer: Scorer,
    dataset: ImageDataset,
    split,
    part,
    spec: EpisodeSpec = EpisodeSpec(5, 1, 15),
    num_pairs: int = 10000,
    rng=0,
) -> CorrelationMatrix:
    """Spearman correlation between modules over (query, prototype) pairs
    drawn from fresh episodes."""
    if num_pairs < 2:
        raise ValueError("need at least two pairs")
    classes = _classes(split, part)
    check_capacity(dataset, classes, spec)
    rng = _rng(rng)
    chunks, have = [], 0
    while have < num_pairs:
        ep = sample_episode(dataset, classes, None, spec, rng)
        s = np.asarray(scorer.level_scores(ep), dtype=np.float64)
        s = s.reshape(-1, s.shape[-1])
        chunks.append(s)
        have += len(s)
    pairs = np.concatenate(chunks)[:num_pairs]
    V = pairs.shape[1]
    m = np.eye(V)
    for a in range(V):
        for b in range(a + 1, V):
            m[a, b] = m[b, a] = spearman(pairs[:, a], pairs[:, b])
    return CorrelationMatrix(m, num_pairs)


@dataclass
class ScatterRow:
    class_id: int
    class_name: str
    accuracy_a: float
    accuracy_b: float


def per_class_scatter(
    scorer: Scorer,
    dataset: ImageDataset,
    split,
    part,
    modules: tuple[int, int],
    spec: EpisodeSpec,
    num_episodes: int = 600,
    rng=0,
) -> list[ScatterRow]:
    """Per-class accuracy under two single modules (1-based indices).

    Every class of the part gets a row: classes never drawn in the
    regular episodes get extra episodes that include them.
    """
    V = len(scorer.weights)
    a, b = modules
    if not (1 <= a <= V and 1 <= b <= V):
        raise ValueError(f"module indices must lie in 1..{V}, got {modules}")
    classes = _classes(split, part)
    check_capacity(dataset, classes, spec)
    rng = _rng(rng)
    tally = _Tally(V)
    episodes = [sample_episode(dataset, classes, None, spec, rng) for _ in range(num_episodes)]
    for c in classes:
        if not any(c in ep.classes for ep in episodes):
            others = [o for o in classes if o != c]
            pick = rng.choice(np.asarray(others), size=spec.ways - 1, replace=False)
            episodes.append(sample_episode(dataset, (c, *map(int, pick)), None, spec, rng))
    for ep in episodes:
        _, combined_ok, level_ok = _score_episode(scorer, ep)
        tally.add(ep, level_ok, combined_ok)
    rows = []
    for c in sorted(classes):
        acc = tally.accuracy(c)
        rows.append(ScatterRow(c, dataset.class_names[c], float(acc[a - 1]), float(acc[b - 1])))
    return rows


def scatter_csv(rows: Sequence[ScatterRow], modules: tuple[int, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "class_name", f"accuracy_RM{modules[0]}", f"accuracy_RM{modules[1]}"])
    for r in rows:
        w.writerow([r.class_id, r.class_name, repr(r.accuracy_a), repr(r.accuracy_b)])
    return buf.getvalue()


def scatter_plot(rows: Sequence[ScatterRow], modules: tuple[int, int], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter([r.accuracy_a for r in rows], [r.accuracy_b for r in rows], s=14)
    ax.plot([0, 1], [0, 1], lw=0.8, color="grey")
    ax.set_xlabel(f"RM{modules[0]} accuracy")
    ax.set_ylabel(f"RM{modules[1]} accuracy")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
