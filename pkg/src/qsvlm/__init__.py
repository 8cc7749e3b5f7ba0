"""Quad-scale vision-language pretraining at desk scale.

Four jointly-weighted objectives over paired synthetic images and reports:
global image/report contrastive alignment, sentence/region local alignment,
instance-level matching with hard negatives, and single-modality masked
reconstruction. Ships with a grounded synthetic corpus generator and an
evaluation harness (zero-shot classification, phrase grounding with
mIoU/CNR, linear probe, scale-toggle ablations).
"""

from qsvlm.config import LossWeights, TrainConfig, load_config, parse_config
from qsvlm.data import DataConfig, SyntheticSample, Vocabulary, generate_corpus
from qsvlm.encoders import EncoderConfig, TextEncoder, VisionEncoder, cosine_sim
from qsvlm.model import QuadScaleModel, build_model
from qsvlm.training import Checkpoint, LossBundle, combined_loss, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DataConfig",
    "EncoderConfig",
    "LossBundle",
    "LossWeights",
    "QuadScaleModel",
    "SyntheticSample",
    "TextEncoder",
    "TrainConfig",
    "VisionEncoder",
    "Vocabulary",
    "build_model",
    "combined_loss",
    "cosine_sim",
    "generate_corpus",
    "load_config",
    "parse_config",
    "train",
]
