"""Statistics-transfer feature augmentation for unbalanced few-shot classification."""
from .config import ExperimentConfig, load_config, parse_config
from .data import UnbalancedDataset, make_synthetic, sample_episode
from .harness import MetricsReport, emit_report, run_experiment
from .hierarchy import SuperclassTree, build_tree, inherit
from .metagen import augment, generate, init_generator, meta_test, meta_train
from .regressor import build_mean_table, predict_class_mean, train_regressor

__version__ = "0.1.0"
