"""Detecting AI-generated images from how a frozen ViT's CLS token changes between layers."""

from .backbone import BackboneConfig, BackboneWeights, encode_layers, init_random_backbone, load_weight_archive
from .head import HeadConfig, LTDHeadParams, forward_head, predict
from .manifest import DatasetManifest, load_manifest
from .metrics import MetricsReport, accuracy, average_precision
from .train import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
