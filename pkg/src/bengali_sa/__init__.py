"""Bengali sentiment classification: corpora, annotation merging, embeddings, classifier heads, training and evaluation."""

from .corpus import (
    CorpusStats,
    LabeledComment,
    LabeledCorpus,
    SentimentLabel,
    SplitCorpus,
    compute_stats,
    derive_two_class,
    label_distribution,
    load_corpus,
    load_splits,
    save_corpus,
    topic_distribution,
)
from .embed import BackendKind, ContextualBackend, StaticBackend, StaticEmbeddingTable, StaticTableConfig
from .model import ClassifierModel, HeadConfig, HeadKind, build_model, preset_head_config, predict
from .train import TrainConfig, TrainingHistory, load_checkpoint, save_checkpoint, train
from .evaluation import EvaluationReport, ResultMatrix, evaluate, render_results, run_matrix
from .apply import analyze_categories, render_category_report

__version__ = "0.1.0"
