from .ckpt import Checkpoint, CorruptionError, load_ckpt, save_ckpt
from .infer import predict, predict_channels
from .net import Model, NetConfig, build_net, forward, forward_padded
from .train import TrainConfig, sample_patches, standardize, train, train_on_samples

__all__ = [
    "Checkpoint",
    "CorruptionError",
    "Model",
    "NetConfig",
    "TrainConfig",
    "build_net",
    "forward",
    "forward_padded",
    "load_ckpt",
    "predict",
    "predict_channels",
    "sample_patches",
    "save_ckpt",
    "standardize",
    "train",
    "train_on_samples",
]
