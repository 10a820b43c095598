"""Segmentation masks from CAM + classifier-gradient seeds via a contrastively trained pixel decoder."""

__version__ = "0.1.0"

from .cluster import infer_mask, kmeans
from .decoder import PixelDecoder, TrainConfig, supcon_grad, supcon_loss, train_decoder
from .diffusion import NoiseSchedule, ToyFeatureProvider, extract_features, forward_noise
from .fusion import SeedSelection, binarize, select_seeds
from .metrics import dice, evaluate, iou
from .saliency import ActivationMap, load_cam, mean_gradient_map, toy_logistic_classifier
from .tensorio import TensorContainer, read_tensor, write_tensor

__all__ = [
    "ActivationMap",
    "NoiseSchedule",
    "PixelDecoder",
    "SeedSelection",
    "TensorContainer",
    "ToyFeatureProvider",
    "TrainConfig",
    "binarize",
    "dice",
    "evaluate",
    "extract_features",
    "forward_noise",
    "infer_mask",
    "iou",
    "kmeans",
    "load_cam",
    "mean_gradient_map",
    "read_tensor",
    "select_seeds",
    "supcon_grad",
    "supcon_loss",
    "toy_logistic_classifier",
    "train_decoder",
    "write_tensor",
]
