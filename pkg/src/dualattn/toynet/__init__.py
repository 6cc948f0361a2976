"""Desk-scale attention-gated classifier, its training variants, and attributions."""
from .checkpoint import load_checkpoint, save_checkpoint
from .model import PENALIZED, VARIANTS, TrainConfig, forward, init_params, loss
from .train import Adam, TrainResult, attribution, evaluate, predict, train, upsample_attention, write_metrics

__all__ = [
    "TrainConfig", "VARIANTS", "PENALIZED", "forward", "init_params", "loss", "Adam", "TrainResult",
    "train", "predict", "evaluate", "attribution", "upsample_attention", "write_metrics",
    "save_checkpoint", "load_checkpoint",
]
