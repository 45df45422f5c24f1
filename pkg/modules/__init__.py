"""
Modules Package
Reference-guided multi-contrast MRI super-resolution with flexible alignment
"""

__version__ = "1.0.0"

from .errors import FASRError, DimensionError, ContractError, FormatError, ParseError, ConfigError, NumericalError
from .config import RunConfig, load_config, parse_config
from .data_io import load_image, save_image, load_tensor, save_tensor, load_checkpoint, save_checkpoint, synth_pair
from .fusion import FASRModel, ModelConfig, forward_full
from .losses import LossWeights, total_loss, psnr, ssim_index
from .training import TrainingSession, create_session, predict
from .report_generator import RunReportGenerator

__all__ = [
    'FASRError',
    'DimensionError',
    'ContractError',
    'FormatError',
    'ParseError',
    'ConfigError',
    'NumericalError',
    'RunConfig',
    'load_config',
    'parse_config',
    'load_image',
    'save_image',
    'load_tensor',
    'save_tensor',
    'load_checkpoint',
    'save_checkpoint',
    'synth_pair',
    'FASRModel',
    'ModelConfig',
    'forward_full',
    'LossWeights',
    'total_loss',
    'psnr',
    'ssim_index',
    'TrainingSession',
    'create_session',
    'predict',
    'RunReportGenerator',
]
