"""Synthetic-voice anti-spoofing toolkit.

Raw-waveform Res2Net countermeasure, LFCC front end, online hard example
mining, and the EER / min t-DCF evaluation stack, all on numpy.
"""

__version__ = "0.1.0"

from .errors import ConfigError, IdMismatchError, InvalidInputError, ParseError, ShapeError, SpoofGuardError
from .lfcc import FeatureMatrix, FrontendConfig, lfcc
from .metrics import EvalReport, TdcfParams, eer, evaluate_report, fuse_scores, min_tdcf, per_attack_eer
from .model import ModelConfig, RawRes2Net, TinyReferenceClassifier, load_model, save_model
from .ohem import OhemConfig, TrainConfig, ohem_loss, select_hard, train
from .signal_io import SynthConfig, TrialRecord, Waveform, generate_synthetic_dataset

__all__ = [
    "ConfigError", "EvalReport", "FeatureMatrix", "FrontendConfig", "IdMismatchError", "InvalidInputError",
    "ModelConfig", "OhemConfig", "ParseError", "RawRes2Net", "ShapeError", "SpoofGuardError", "SynthConfig",
    "TdcfParams", "TinyReferenceClassifier", "TrainConfig", "TrialRecord", "Waveform", "eer", "evaluate_report",
    "fuse_scores", "generate_synthetic_dataset", "lfcc", "load_model", "min_tdcf", "ohem_loss",
    "per_attack_eer", "save_model", "select_hard", "train",
]
