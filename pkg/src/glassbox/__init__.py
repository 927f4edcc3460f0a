"""Desk-scale, fully reproducible LLM pretraining and analysis toolkit."""

__version__ = "0.1.0"

from .corpus import CorpusManifest, SourceSpec, prepare_corpus, verify_manifest
from .model import DecoderModel, ModelConfig, init_parameters
from .trainer import TrainPlan, run_training

__all__ = [
    "CorpusManifest",
    "SourceSpec",
    "prepare_corpus",
    "verify_manifest",
    "DecoderModel",
    "ModelConfig",
    "init_parameters",
    "TrainPlan",
    "run_training",
    "__version__",
]
