"""Gradual source domain expansion for unsupervised domain adaptation, at desk scale."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import Dataset, Domain, gen_blobs, gen_two_moons, hide_labels, load_csv, reference_benchmark, save_csv, shift_domain
from .driver import RunFailedError, RunRecord, run_experiment, run_gsde, train_single_run
from .model import GsdeModel, ModelDims, init_model

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "Dataset", "Domain", "gen_blobs", "gen_two_moons", "hide_labels", "load_csv",
    "reference_benchmark", "save_csv", "shift_domain",
    "RunFailedError", "RunRecord", "run_experiment", "run_gsde", "train_single_run",
    "GsdeModel", "ModelDims", "init_model",
]
