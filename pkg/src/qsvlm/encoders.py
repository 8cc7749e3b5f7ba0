"""Toy vision and text encoders sharing one embedding space.

Vision: linear patch embedding + fixed 2D sin/cos position encodings + a
stack of pre-norm transformer blocks. The global image embedding is the
L2-normalized linear projection of the mean-pooled patch features.

Text: learned token embeddings + the same block stack, with no position
encodings -- reports in the closed grammar are order-insensitive at the
sentence level, and dropping positions makes sentence pooling exactly
permutation-equivariant. Sentence embeddings are L2-normalized projections
of the mean token feature inside each sentence span.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Span = tuple[int, int]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    vocab_size: int = 34
    max_tokens: int = 48
    max_sentences: int = 6

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 for 2D sin/cos encodings")
        for name in ("image_size", "patch_size", "embed_dim", "depth", "heads",
                     "vocab_size", "max_tokens", "max_sentences"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_pixels(self) -> int:
        return self.patch_size ** 2


@dataclass
class VisionFeatures:
    """Global embedding (unit rows) and raw per-patch features."""

    global_v: torch.Tensor  # [B, D], unit L2 norm
    patches: torch.Tensor   # [B, P, D], not normalized


@dataclass
class TextFeatures:
    """Global embedding, per-sentence embeddings, and the valid-slot mask."""

    global_t: torch.Tensor       # [B, D], unit L2 norm
    sentences: torch.Tensor      # [B, S_max, D], unit rows where mask is True
    sentence_mask: torch.Tensor  # [B, S_max] bool


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity <a,b>/(|a||b|) of two vectors; errors on zero norm."""
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return (a * b).sum() / (na * nb)


def sincos_position_encoding(grid: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sin/cos position table for a grid x grid patch layout -> [grid*grid, dim]."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
    coords = np.arange(grid, dtype=np.float64)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    def encode(pos):
        args = pos.reshape(-1, 1) * omega.reshape(1, -1)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    table = np.concatenate([encode(ys), encode(xs)], axis=1)
    return torch.as_tensor(table, dtype=dtype)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + GELU MLP block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask,
                                need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """[B, 1, H, W] -> [B, P, patch_size**2] in row-major patch order."""
    b, c, h, w = images.shape
    p = patch_size
    g_h, g_w = h // p, w // p
    x = images.reshape(b, c, g_h, p, g_w, p)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, g_h * g_w, p * p * c)


def unpatchify(patches: torch.Tensor, patch_size: int, grid: int) -> torch.Tensor:
    """Inverse of `patchify` for single-channel images."""
    b = patches.shape[0]
    p = patch_size
    x = patches.reshape(b, grid, grid, p, p, 1)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, 1, grid * p, grid * p)


class VisionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_pixels, config.embed_dim)
        self.register_buffer(
            "pos_embed", sincos_position_encoding(config.grid_size, config.embed_dim)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.heads) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.global_proj = nn.Linear(config.embed_dim, config.embed_dim)

    def _check_input(self, images: torch.Tensor) -> None:
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (s, s):
            raise ValueError(
                f"expected images of shape [B, 1, {s}, {s}], got {tuple(images.shape)}"
            )
        if not torch.isfinite(images).all():
            raise ValueError("images contain non-finite values")

    def encode_patches(self, images: torch.Tensor) -> torch.Tensor:
        """Full trunk forward -> per-patch features [B, P, D]."""
        self._check_input(images)
        x = self.patch_embed(patchify(images, self.config.patch_size))
        x = x + self.pos_embed.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode_visible(self, images: torch.Tensor, visible_idx: Sequence[int]) -> torch.Tensor:
        """Trunk forward over a subset of patches (masked-image pretext task).

        Only the listed patches enter attention; position encodings keep their
        original grid slots.
        """
        self._check_input(images)
        if len(visible_idx) == 0:
            raise ValueError("at least one visible patch is required")
        idx = torch.as_tensor(list(visible_idx), dtype=torch.long, device=images.device)
        x = self.patch_embed(patchify(images, self.config.patch_size))
        x = x[:, idx] + self.pos_embed.to(x.dtype)[idx]
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def forward(self, images: torch.Tensor) -> VisionFeatures:
        patches = self.encode_patches(images)
        pooled = self.global_proj(patches.mean(dim=1))
        return VisionFeatures(global_v=F.normalize(pooled, dim=-1), patches=patches)


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, pad_id: int = 0):
        super().__init__()
        self.config = config
        self.pad_id = pad_id
        self.tok_embed = nn.Embedding(config.vocab_size, config.embed_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.heads) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.global_proj = nn.Linear(config.embed_dim, config.embed_dim)
        self.sentence_proj = nn.Linear(config.embed_dim, config.embed_dim)

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Trunk forward -> per-token features [B, T, D]; PAD excluded from attention keys."""
        if tokens.ndim != 2:
            raise ValueError(f"expected tokens of shape [B, T], got {tuple(tokens.shape)}")
        if tokens.min().item() < 0 or tokens.max().item() >= self.config.vocab_size:
            raise ValueError(
                f"token ids must lie in [0, {self.config.vocab_size}), "
                f"got range [{tokens.min().item()}, {tokens.max().item()}]"
            )
        pad_mask = tokens == self.pad_id
        if bool(pad_mask.all(dim=1).any()):
            raise ValueError("a sample consists entirely of padding")
        x = self.tok_embed(tokens)
        for block in self.blocks:
            x = block(x, key_padding_mask=pad_mask)
        return self.norm(x)

    @staticmethod
    def _check_boundaries(spans: Sequence[Span], length: int, max_sentences: int) -> None:
        if len(spans) == 0:
            raise ValueError("each report needs at least one sentence boundary")
        if len(spans) > max_sentences:
            raise ValueError(f"{len(spans)} sentences exceed max_sentences={max_sentences}")
        prev_end = 0
        for start, end in spans:
            if start >= end:
                raise ValueError(f"empty sentence span ({start}, {end})")
            if start < prev_end:
                raise ValueError("sentence boundaries must be sorted and non-overlapping")
            if end > length:
                raise ValueError(f"sentence span ({start}, {end}) exceeds sequence length {length}")
            prev_end = end

    def forward(self, tokens: torch.Tensor, boundaries: Sequence[Sequence[Span]]) -> TextFeatures:
        if len(boundaries) != tokens.shape[0]:
            raise ValueError("boundaries must provide one span list per batch row")
        feats = self.encode_tokens(tokens)
        b, t, d = feats.shape
        s_max = self.config.max_sentences
        pad_mask = tokens == self.pad_id

        valid = (~pad_mask).to(feats.dtype).unsqueeze(-1)
        counts = valid.sum(dim=1).clamp(min=1.0)
        pooled = self.global_proj((feats * valid).sum(dim=1) / counts)
        global_t = F.normalize(pooled, dim=-1)

        sentences = feats.new_zeros((b, s_max, d))
        mask = torch.zeros((b, s_max), dtype=torch.bool, device=feats.device)
        for i, spans in enumerate(boundaries):
            self._check_boundaries(spans, t, s_max)
            for j, (start, end) in enumerate(spans):
                sentences[i, j] = feats[i, start:end].mean(dim=0)
                mask[i, j] = True
        sentences = self.sentence_proj(sentences)
        sentences = F.normalize(sentences, dim=-1) * mask.unsqueeze(-1).to(feats.dtype)
        return TextFeatures(global_t=global_t, sentences=sentences, sentence_mask=mask)
