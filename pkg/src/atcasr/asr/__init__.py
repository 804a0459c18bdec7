from .ctc import ImpossibleAlignmentError, collapse, ctc_loss, ctc_loss_batch, greedy_decode, min_frames
from .model import Backbone, BackboneConfig, PredictionLayer, ReconstructionHead, predict_logprobs, small_backbone_config
from .train import PRESETS, ASRModel, ASRTrainConfig, FbankConfig, Preset, get_preset, load_asr, train_asr

__all__ = [
    "ASRModel",
    "ASRTrainConfig",
    "Backbone",
    "BackboneConfig",
    "FbankConfig",
    "ImpossibleAlignmentError",
    "PRESETS",
    "PredictionLayer",
    "Preset",
    "ReconstructionHead",
    "collapse",
    "ctc_loss",
    "ctc_loss_batch",
    "get_preset",
    "greedy_decode",
    "load_asr",
    "min_frames",
    "predict_logprobs",
    "small_backbone_config",
    "train_asr",
]
