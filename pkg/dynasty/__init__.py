"""Forecasting node signals on dynamic graphs."""
from .config import ModelConfig, TrainConfig, DynastyEnv
from .data import Dataset, DynamicGraphSample, NormStats
from .model import DynastyModel, RecurrentBaseline, ForecastMode, load_checkpoint
from .training import run_pretraining, run_training
from .evaluation import evaluate_model, run_ablation_suite, AblationSpec
from .pipeline import PipelineConfig, RunManifest, run_pipeline
from . import exceptions
