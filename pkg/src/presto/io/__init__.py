from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigValidationError, ExperimentConfig, config_hash, parse_config, serialize_config
from .csvio import write_csv
from .data import Gmm2DSpec, SyntheticDataset, ToySignal1DSpec, generate_dataset

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint", "ConfigValidationError", "ExperimentConfig",
    "config_hash", "parse_config", "serialize_config", "write_csv", "Gmm2DSpec", "SyntheticDataset",
    "ToySignal1DSpec", "generate_dataset",
]
