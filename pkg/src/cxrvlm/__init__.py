"""Desk-scale chest X-ray report generation pipeline."""

from .adapter import AdapterConfig
from .autodiff import Tensor, grad_check, no_grad
from .lm import LMConfig
from .lora import LoraConfig
from .model import ModelConfig, VLM
from .trainer import TrainConfig
from .vision import VisionConfig

__all__ = [
    "AdapterConfig", "LMConfig", "LoraConfig", "ModelConfig", "Tensor",
    "TrainConfig", "VLM", "VisionConfig", "grad_check", "no_grad",
]
__version__ = "0.1.0"
