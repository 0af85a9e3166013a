"""gMLP and aMLP sequence models in numpy with a small reverse-mode autodiff."""
from .accounting import analyze, count_macs, count_params
from .autodiff import Tape, gradient_check, ops
from .kernels import BACKEND
from .models import PRESETS, ConfigError, ModelConfig, ParamStore, build_model, get_preset, load_config
from .training import DESK_TRAIN, TrainConfig, train

__all__ = [
    "BACKEND", "ConfigError", "DESK_TRAIN", "ModelConfig", "PRESETS", "ParamStore", "Tape", "TrainConfig",
    "analyze", "build_model", "count_macs", "count_params", "get_preset", "gradient_check", "load_config",
    "ops", "train",
]
__version__ = "0.1.0"
