"""Entropy-controlled rephrasing of visual questions on a synthetic shapes world."""
from .config import ExperimentConfig, load_config
from .estimators import EntropyRephraser, VqaClassifier
from .exceptions import (
    AmbiRephraseError, ConfigurationError, ContractError, CorruptionError, DomainError,
    IntegrityError, ParseError, ShapeError, StrategyError, TrainingError,
)
from .harness import Experiment, SweepRow, build_delta_samples, export_boxplot_csv, run_delta_sweep
from .metrics import evaluate
from .rephraser import RephraserModel
from .synthworld import generate_dataset, read_dataset, write_dataset
from .training import RephraseSample, TrainRegimeConfig, rephrase_batch, train
from .vqa import VqaModel, entropy, predict

__version__ = "0.1.0"
