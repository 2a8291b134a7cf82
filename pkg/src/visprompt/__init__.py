"""Image-conditioned prompt learning on a toy, fully numpy vision-language backbone."""
from .baselines import BaselineKind
from .datagen import build_split, load_datasets, output_root, save_datasets
from .encoders import EncoderConfig, build_encoders
from .errors import ContractError, DegenerateInputError, DimensionError, DivergenceError
from .harness import (
    ExperimentConfig,
    MetricsRecord,
    compare,
    harmonic_mean,
    make_data,
    run,
    run_sweep,
    summarize,
    train,
    write_record,
    write_sweep,
)
from .tensor import Tensor, backward, gradcheck, no_grad

__all__ = [
    "BaselineKind", "ContractError", "DegenerateInputError", "DimensionError", "DivergenceError",
    "EncoderConfig", "ExperimentConfig", "MetricsRecord", "Tensor", "backward", "build_encoders",
    "build_split", "compare", "gradcheck", "harmonic_mean", "load_datasets", "make_data", "no_grad",
    "output_root", "run", "run_sweep", "save_datasets", "summarize", "train", "write_record",
    "write_sweep",
]
__version__ = "0.1.0"
