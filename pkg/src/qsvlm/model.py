"""Parameter bundle for the four-scale objective."""

import torch
import torch.nn as nn

from qsvlm.encoders import EncoderConfig, TextEncoder, VisionEncoder
from qsvlm.losses.instance_match import MatchHead
from qsvlm.losses.modality_recon import ImagePatchDecoder


class QuadScaleModel(nn.Module):
    """Vision/text encoders plus the matching and reconstruction heads.

    Forward passes are pure given a parameter snapshot; the training loop
    owns parameter updates single-threaded.
    """

    def __init__(self, config: EncoderConfig, pad_id: int = 0):
        super().__init__()
        self.config = config
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config, pad_id=pad_id)
        self.match_head = MatchHead(config.embed_dim)
        self.image_decoder = ImagePatchDecoder(config)
        self.mlm_head = nn.Linear(config.embed_dim, config.vocab_size)


def build_model(config: EncoderConfig, seed: int, pad_id: int = 0) -> QuadScaleModel:
    """Construct a model with seeded parameter initialization."""
    torch.manual_seed(seed)
    return QuadScaleModel(config, pad_id=pad_id)
