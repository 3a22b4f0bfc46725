from .loss import Fusion, KLMode, Optimizer, PairBatch, TrainConfig, loss_and_grad
from .net import ClassifierHead, TransformNet, init_head, init_transform
from .train import TrainedTransform, Variant, train

__all__ = [
    "ClassifierHead", "Fusion", "KLMode", "Optimizer", "PairBatch", "TrainConfig", "TrainedTransform",
    "TransformNet", "Variant", "init_head", "init_transform", "loss_and_grad", "train",
]
