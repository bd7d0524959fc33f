"""Register narrow-field high-resolution images into a wide-field reference frame."""

from .errors import AgileRegError
from .imgio import ImageBuffer, load_image, save_image
from .nnet import NetworkSpec, WeightBundle, init_weights_seeded, load_weights, save_weights
from .pipeline import PipelineConfig, RegistrationFailure, RegistrationResult, Registrar, register

__version__ = "0.1.0"

__all__ = [
    "AgileRegError", "ImageBuffer", "load_image", "save_image", "NetworkSpec", "WeightBundle",
    "init_weights_seeded", "load_weights", "save_weights", "PipelineConfig", "RegistrationFailure",
    "RegistrationResult", "Registrar", "register",
]
