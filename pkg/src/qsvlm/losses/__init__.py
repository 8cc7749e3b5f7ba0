from qsvlm.losses.global_align import TemperatureParams, global_alignment_loss
from qsvlm.losses.local_align import (
    LocalMatch,
    attention_context,
    local_alignment_loss,
    local_matching_z,
)
from qsvlm.losses.instance_match import (
    MatchBatch,
    MatchHead,
    build_match_batch,
    fuse,
    instance_matching_loss,
    sample_hard_negatives,
)
from qsvlm.losses.modality_recon import (
    ImagePatchDecoder,
    MaskPlan,
    ReconPair,
    corrupt_tokens,
    image_recon_loss,
    make_mask,
    masked_mse,
    mlm_cross_entropy,
    mlm_loss,
    modality_loss,
    reconstruct_masked_patches,
)

__all__ = [
    "TemperatureParams",
    "global_alignment_loss",
    "LocalMatch",
    "attention_context",
    "local_matching_z",
    "local_alignment_loss",
    "MatchBatch",
    "MatchHead",
    "fuse",
    "build_match_batch",
    "instance_matching_loss",
    "sample_hard_negatives",
    "MaskPlan",
    "ReconPair",
    "ImagePatchDecoder",
    "make_mask",
    "corrupt_tokens",
    "masked_mse",
    "reconstruct_masked_patches",
    "image_recon_loss",
    "mlm_cross_entropy",
    "mlm_loss",
    "modality_loss",
]
