"""Instance-level image-text matching.

A candidate pair is fused by elementwise sum of the two global embeddings
and scored by a two-layer head. Negatives are mined from the batch
similarity matrix: pairs with higher similarity are sampled with higher
probability (softmax over the off-diagonal entries), one negative report
per image and one negative image per report, so a batch of B positives
yields M = 3B candidates with labels (1, 0, 0).
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class MatchBatch:
    fused: torch.Tensor             # [M, D]
    labels: torch.Tensor            # [M] float in {0, 1}
    logits: Optional[torch.Tensor] = None
    probs: Optional[torch.Tensor] = None


def fuse(v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the two modality features."""
    if v.shape != t.shape:
        raise ValueError(f"shape mismatch: v {tuple(v.shape)} vs t {tuple(t.shape)}")
    return v + t


class MatchHead(nn.Module):
    """Two linear layers with a smooth nonlinearity, one logit per pair."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, 1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(fused))).squeeze(-1)


def sample_hard_negatives(
    sim: torch.Tensor, rng_seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Similarity-weighted negative indices, never the diagonal.

    Row i of `sim` scores image i against every report: `neg_text_idx[i]`
    is a report j != i drawn with probability softmax over the off-diagonal
    entries of row i. Columns give `neg_image_idx` symmetrically.
    Deterministic for a given seed (text draws first, then image draws).
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"sim must be square [B, B], got {tuple(sim.shape)}")
    b = sim.shape[0]
    if b < 2:
        raise ValueError("hard-negative sampling needs a batch of at least 2")
    if not torch.isfinite(sim).all():
        raise ValueError("similarity matrix contains non-finite values")

    gen = torch.Generator().manual_seed(rng_seed)
    masked = sim.detach().cpu().clone()
    masked.fill_diagonal_(float("-inf"))
    row_probs = torch.softmax(masked, dim=1)
    neg_text_idx = torch.multinomial(row_probs, 1, generator=gen).squeeze(1)
    col_probs = torch.softmax(masked, dim=0).T
    neg_image_idx = torch.multinomial(col_probs, 1, generator=gen).squeeze(1)
    return neg_text_idx.to(sim.device), neg_image_idx.to(sim.device)


def build_match_batch(
    v: torch.Tensor, t: torch.Tensor, sim: torch.Tensor, rng_seed: int
) -> MatchBatch:
    """Positives plus one hard-negative report and one hard-negative image
    per pair -> fused [3B, D], labels [3B]."""
    neg_text_idx, neg_image_idx = sample_hard_negatives(sim, rng_seed)
    fused = torch.cat([
        fuse(v, t),
        fuse(v, t[neg_text_idx]),
        fuse(v[neg_image_idx], t),
    ])
    b = v.shape[0]
    labels = torch.cat([
        torch.ones(b, dtype=v.dtype, device=v.device),
        torch.zeros(2 * b, dtype=v.dtype, device=v.device),
    ])
    return MatchBatch(fused=fused, labels=labels)


def instance_matching_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy -[y log x + (1-y) log(1-x)].

    Probabilities exactly at 0 or 1 are clamped to +-PROB_EPS (logged) so the
    loss stays finite.
    """
    if probs.shape != labels.shape:
        raise ValueError(
            f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}"
        )
    if ((probs < 0) | (probs > 1)).any():
        raise ValueError("probs must lie in [0, 1]")
    at_edge = int(((probs <= 0) | (probs >= 1)).sum())
    if at_edge:
        log.debug("clamping %d saturated probabilities to [%g, %g]",
                  at_edge, PROB_EPS, 1 - PROB_EPS)
    x = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    y = labels.to(x.dtype)
    return -(y * torch.log(x) + (1 - y) * torch.log1p(-x)).mean()
