"""Single-modality masked self-supervision.

Images: the encoder sees only unmasked patches; a small decoder (2 blocks
at half width) fills in mask tokens and regresses raw pixel values of the
masked patches, scored with MSE over masked positions only. Targets are
per-patch normalized by default.

Text: masked tokens are corrupted with the 80/10/10 rule (mask token /
random in-vocabulary token / keep) and the head is scored with mean
cross-entropy over masked positions only.
"""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from qsvlm.encoders import EncoderConfig, TextEncoder, TransformerBlock, VisionEncoder, patchify
from qsvlm.seeding import derive_seed


@dataclass(frozen=True)
class MaskPlan:
    """A fixed subset of positions to mask out of `total`."""

    masked_indices: tuple[int, ...]
    total: int
    ratio: float
    seed: int

    def __post_init__(self):
        idx = self.masked_indices
        if len(set(idx)) != len(idx) or list(idx) != sorted(idx):
            raise ValueError("masked_indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.total):
            raise ValueError("masked_indices out of range")

    @property
    def count(self) -> int:
        return len(self.masked_indices)

    @property
    def unmasked_indices(self) -> tuple[int, ...]:
        masked = set(self.masked_indices)
        return tuple(i for i in range(self.total) if i not in masked)


@dataclass
class ReconPair:
    """Predicted and ground-truth values for the masked patches."""

    v_recon: torch.Tensor  # [B, N, C_p]
    g_recon: torch.Tensor  # [B, N, C_p]

    def __post_init__(self):
        if self.v_recon.shape != self.g_recon.shape:
            raise ValueError(
                f"shape mismatch: v_recon {tuple(self.v_recon.shape)} "
                f"vs g_recon {tuple(self.g_recon.shape)}"
            )


def make_mask(total: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform-random subset of round(ratio * total) positions, deterministic per seed."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    count = round(ratio * total)
    if count < 1:
        raise ValueError(f"ratio {ratio} of {total} rounds to zero masked elements")
    if count >= total:
        raise ValueError(f"ratio {ratio} of {total} leaves no unmasked elements")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(total, size=count, replace=False))
    return MaskPlan(masked_indices=tuple(int(i) for i in idx),
                    total=total, ratio=ratio, seed=seed)


class ImagePatchDecoder(nn.Module):
    """Lightweight reconstruction decoder: 2 blocks at half encoder width."""

    def __init__(self, config: EncoderConfig, depth: int = 2):
        super().__init__()
        from qsvlm.encoders import sincos_position_encoding

        dec_dim = config.embed_dim // 2
        if dec_dim % config.heads != 0 or dec_dim % 4 != 0:
            raise ValueError(
                f"decoder width {dec_dim} must be divisible by heads={config.heads} and by 4"
            )
        self.config = config
        self.embed = nn.Linear(config.embed_dim, dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(dec_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.register_buffer("pos_embed", sincos_position_encoding(config.grid_size, dec_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(dec_dim, config.heads) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dec_dim)
        self.head = nn.Linear(dec_dim, config.patch_pixels)

    def forward(
        self,
        visible_feats: torch.Tensor,
        visible_idx: Sequence[int],
        masked_idx: Sequence[int],
    ) -> torch.Tensor:
        """Predict pixel values at the masked positions -> [B, N, C_p]."""
        b = visible_feats.shape[0]
        p = self.config.num_patches
        vis = torch.as_tensor(list(visible_idx), dtype=torch.long,
                              device=visible_feats.device)
        msk = torch.as_tensor(list(masked_idx), dtype=torch.long,
                              device=visible_feats.device)
        if len(vis) + len(msk) != p:
            raise ValueError("visible and masked indices must partition the patch grid")

        pos = self.pos_embed.to(visible_feats.dtype)
        x = visible_feats.new_zeros((b, p, pos.shape[1]))
        x = x.index_copy(1, vis, self.embed(visible_feats) + pos[vis])
        mask_tok = (self.mask_token.to(visible_feats.dtype) + pos[msk]).expand(b, -1, -1)
        x = x.index_copy(1, msk, mask_tok)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))[:, msk]


def masked_mse(pair: ReconPair) -> torch.Tensor:
    """Mean squared error over every masked-patch element."""
    return ((pair.v_recon - pair.g_recon) ** 2).mean()


def normalize_patch_targets(targets: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Zero-mean unit-variance normalization per patch."""
    mean = targets.mean(dim=-1, keepdim=True)
    var = targets.var(dim=-1, keepdim=True, unbiased=False)
    return (targets - mean) / torch.sqrt(var + eps)


def reconstruct_masked_patches(
    images: torch.Tensor,
    plan: MaskPlan,
    encoder: VisionEncoder,
    decoder: ImagePatchDecoder,
    norm_targets: bool = True,
) -> ReconPair:
    """Run the masked forward pass and gather predictions against pixel targets.

    Targets come from the raw image, so changing pixels of unmasked patches
    never changes the regression targets.
    """
    if plan.total != encoder.config.num_patches:
        raise ValueError(
            f"mask plan covers {plan.total} positions but the patch grid has "
            f"{encoder.config.num_patches}"
        )
    visible = plan.unmasked_indices
    masked = plan.masked_indices
    feats = encoder.encode_visible(images, visible)
    pred = decoder(feats, visible, masked)
    targets = patchify(images, encoder.config.patch_size)[:, list(masked)]
    if norm_targets:
        targets = normalize_patch_targets(targets)
    return ReconPair(v_recon=pred, g_recon=targets)


def image_recon_loss(
    images: torch.Tensor,
    plan: MaskPlan,
    encoder: VisionEncoder,
    decoder: ImagePatchDecoder,
    norm_targets: bool = True,
) -> torch.Tensor:
    return masked_mse(
        reconstruct_masked_patches(images, plan, encoder, decoder, norm_targets)
    )


def corrupt_tokens(
    tokens: torch.Tensor,
    plan: MaskPlan,
    mask_id: int,
    random_ids: Sequence[int],
    seed: int,
) -> torch.Tensor:
    """BERT-style corruption of one token row at the plan's masked positions:
    80% mask token, 10% random id from `random_ids`, 10% unchanged."""
    if tokens.ndim != 1:
        raise ValueError(f"expected a 1D token row, got {tuple(tokens.shape)}")
    if plan.total > tokens.shape[0]:
        raise ValueError("mask plan longer than the token row")
    rng = np.random.default_rng(seed)
    out = tokens.clone()
    for idx in plan.masked_indices:
        u = rng.random()
        if u < 0.8:
            out[idx] = mask_id
        elif u < 0.9:
            out[idx] = int(random_ids[rng.integers(len(random_ids))])
    return out


def mlm_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of vocabulary logits at masked positions."""
    if logits.shape[0] == 0:
        raise ValueError("no masked positions to score")
    return F.cross_entropy(logits, targets)


def mlm_loss(
    tokens: torch.Tensor,
    plans: Union[MaskPlan, Sequence[MaskPlan]],
    encoder: TextEncoder,
    head: nn.Module,
    mask_id: int,
    random_ids: Sequence[int],
) -> torch.Tensor:
    """Masked-token prediction loss over a batch.

    `plans` is either one MaskPlan applied to every row or one plan per row;
    plan indices address token positions directly. Cross-entropy is averaged
    over all masked positions in the batch.
    """
    if tokens.ndim != 2:
        raise ValueError(f"expected tokens [B, T], got {tuple(tokens.shape)}")
    b = tokens.shape[0]
    if isinstance(plans, MaskPlan):
        plans = [plans] * b
    if len(plans) != b:
        raise ValueError(f"got {len(plans)} mask plans for a batch of {b}")
    if all(p.count == 0 for p in plans):
        raise ValueError("no masked positions in the batch")

    corrupted = torch.stack([
        corrupt_tokens(tokens[i], plans[i], mask_id, random_ids,
                       seed=derive_seed(plans[i].seed, "corrupt", i))
        for i in range(b)
    ])
    feats = encoder.encode_tokens(corrupted)
    logits = head(feats)
    rows = torch.cat([
        torch.full((plans[i].count,), i, dtype=torch.long) for i in range(b)
    ])
    cols = torch.cat([
        torch.as_tensor(plans[i].masked_indices, dtype=torch.long) for i in range(b)
    ])
    return mlm_cross_entropy(logits[rows, cols], tokens[rows, cols])


def modality_loss(image_loss: torch.Tensor, text_loss: torch.Tensor) -> torch.Tensor:
    """Sum of the image reconstruction and masked-language losses."""
    for name, value in (("image_loss", image_loss), ("text_loss", text_loss)):
        v = value if torch.is_tensor(value) else torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise ValueError(f"{name} is not finite")
    return image_loss + text_loss
