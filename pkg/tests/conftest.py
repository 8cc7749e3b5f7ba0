import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from qsvlm.encoders import EncoderConfig


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    """Smallest config the architecture supports; used for gradient checks."""
    return EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1,
                         heads=2, vocab_size=34, max_tokens=16, max_sentences=4)
