"""Minimal float64 network engine: autodiff, MLPs, losses, optimizer, training."""
from .autodiff import Tensor
from .dataset import Dataset
from .grad import input_gradient
from .losses import cross_entropy, softmax
from .net import Layer, Net, forward, init_net, load_net, save_net
from .optim import AdamW
from .train import TrainConfig, accuracy, train_adversarial, train_standard, train_trades

__all__ = [
    "AdamW", "Dataset", "Layer", "Net", "Tensor", "TrainConfig", "accuracy", "cross_entropy",
    "forward", "init_net", "input_gradient", "load_net", "save_net", "softmax",
    "train_adversarial", "train_standard", "train_trades",
]
