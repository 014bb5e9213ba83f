"""Configuration, pipeline orchestration, ablations and the command line."""

from .ablation import AXES, AblationReport, run_ablation
from .config import ExperimentConfig, parse_config
from .pipeline import RunManifest, run_pipeline

__all__ = ["AXES", "AblationReport", "ExperimentConfig", "RunManifest", "parse_config",
           "run_ablation", "run_pipeline"]
