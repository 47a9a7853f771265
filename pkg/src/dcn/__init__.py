"""Few-shot classification with a column of deeply supervised relation modules."""

from .data import DatasetSplit, ImageDataset, LabeledImage, load_directory_dataset, make_synthetic_dataset, split_classes
from .embedding import EmbeddingColumn, EmbeddingConfig, FeatureHierarchy, StochasticFeature, embed, sample_stochastic
from .episodes import Episode, EpisodeSpec, augment, sample_episode
from .evaluation import EvalReport, cross_way_evaluate, evaluate, module_correlation_matrix, per_class_scatter
from .relation import RelationColumn, RelationConfig, ScoreVector, aggregate_scores, class_prototypes, predict
from .stats import ci95, spearman
from .training import TrainConfig, TrainedModel, deep_supervised_loss, run_pipeline

__version__ = "0.1.0"
