"""Desk-scale progressive-comprehension network for weakly-supervised referring segmentation."""
from .config import RunConfig
from .cues import CueSet, decompose_rules, standardize_cues
from .errors import ConfigError, DegenerateInputError, InvalidInputError, InvalidTemplateError, NumericError
from .model import PCNet
from .train import Trainer, evaluate, infer, load_state, save_state, train

__all__ = [
    "RunConfig", "CueSet", "decompose_rules", "standardize_cues", "ConfigError",
    "DegenerateInputError", "InvalidInputError", "InvalidTemplateError", "NumericError",
    "PCNet", "Trainer", "evaluate", "infer", "load_state", "save_state", "train",
]
