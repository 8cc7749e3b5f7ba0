"""Sentence-to-region alignment.

For each sentence t_i, a context vector c_i is the attention-weighted sum
of patch features, with weights softmax(cos(t_i, patch_j) / tau_att). The
per-pair match score is the smooth maximum

    Z = tau2 * log sum_i exp(cos(c_i, t_i) / tau2)

over valid sentences, and the batch loss is InfoNCE over the B x B matrix
of Z scores at temperature tau2.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

NEG_INF = float("-inf")


@dataclass
class LocalMatch:
    """Per-sentence contexts/attention and the aggregate match score for one pair."""

    contexts: torch.Tensor  # [S, D], unit rows
    attn: torch.Tensor      # [S, P], rows sum to 1
    z: torch.Tensor         # scalar


def _unit(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


def smooth_max(scores: torch.Tensor, tau2: float,
               mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """tau2-scaled log-sum-exp over the last dim, restricted to `mask`.

    Monotone non-decreasing in every score; converges to max as tau2 -> 0.
    """
    if tau2 <= 0:
        raise ValueError("tau2 must be strictly positive")
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("smooth_max needs at least one valid entry per row")
        scores = torch.where(mask, scores / tau2,
                             torch.tensor(NEG_INF, dtype=scores.dtype,
                                          device=scores.device))
    else:
        scores = scores / tau2
    return tau2 * torch.logsumexp(scores, dim=-1)


def attention_context(
    patches: torch.Tensor, sentence: torch.Tensor, tau_att: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sentence-conditioned softmax attention over patches.

    Returns the L2-normalized weighted sum of raw patch features and the
    weight vector over patches.
    """
    if patches.ndim != 2 or patches.shape[0] < 1:
        raise ValueError(f"patches must be [P, D] with P >= 1, got {tuple(patches.shape)}")
    if tau_att <= 0:
        raise ValueError("tau_att must be strictly positive")
    sims = _unit(patches) @ _unit(sentence)
    weights = torch.softmax(sims / tau_att, dim=0)
    context = _unit(weights @ patches)
    return context, weights


def local_matching_z(
    patches: torch.Tensor,
    sentences: torch.Tensor,
    tau2: float,
    tau_att: float,
    sentence_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Aggregate match score for one image / one report.

    sentences: [S, D]; invalid slots are excluded via `sentence_mask`.
    """
    if sentences.ndim != 2:
        raise ValueError(f"sentences must be [S, D], got {tuple(sentences.shape)}")
    if sentence_mask is None:
        sentence_mask = torch.ones(sentences.shape[0], dtype=torch.bool,
                                   device=sentences.device)
    if not bool(sentence_mask.any()):
        raise ValueError("report has no valid sentences")

    sims = _unit(sentences) @ _unit(patches).T              # [S, P]
    attn = torch.softmax(sims / tau_att, dim=-1)
    contexts = _unit(attn @ patches)                        # [S, D]
    scores = (contexts * _unit(sentences)).sum(dim=-1)      # cos(c_i, t_i)
    return smooth_max(scores, tau2, sentence_mask)


def match_details(
    patches: torch.Tensor,
    sentences: torch.Tensor,
    tau2: float,
    tau_att: float,
    sentence_mask: Optional[torch.Tensor] = None,
) -> LocalMatch:
    """Like `local_matching_z` but keeps contexts and attention weights."""
    if sentence_mask is None:
        sentence_mask = torch.ones(sentences.shape[0], dtype=torch.bool,
                                   device=sentences.device)
    contexts = []
    weights = []
    for s in range(sentences.shape[0]):
        c, w = attention_context(patches, sentences[s], tau_att)
        contexts.append(c)
        weights.append(w)
    z = local_matching_z(patches, sentences, tau2, tau_att, sentence_mask)
    return LocalMatch(contexts=torch.stack(contexts), attn=torch.stack(weights), z=z)


def pairwise_match_scores(
    patch_batch: torch.Tensor,
    sentences: torch.Tensor,
    sentence_mask: torch.Tensor,
    tau2: float,
    tau_att: float,
) -> torch.Tensor:
    """Z matrix for all image/report pairs: entry [i, j] = Z(image_i, report_j)."""
    if patch_batch.ndim != 3 or sentences.ndim != 3:
        raise ValueError("expected patch_batch [B, P, D] and sentences [B, S, D]")
    if not bool(sentence_mask.any(dim=1).all()):
        raise ValueError("every report in the batch needs at least one valid sentence")

    pn = _unit(patch_batch)                                  # [B, P, D]
    sn = _unit(sentences)                                    # [B, S, D]
    sims = torch.einsum("jsd,ipd->ijsp", sn, pn)             # cos(t_js, patch_ip)
    attn = torch.softmax(sims / tau_att, dim=-1)
    contexts = _unit(torch.einsum("ijsp,ipd->ijsd", attn, patch_batch))
    scores = torch.einsum("ijsd,jsd->ijs", contexts, sn)     # cos(c, t)
    return smooth_max(scores, tau2, sentence_mask.unsqueeze(0).expand_as(scores))  # [B, B]


def local_alignment_loss(
    patch_batch: torch.Tensor,
    sentences: torch.Tensor,
    sentence_mask: torch.Tensor,
    tau2: float,
    tau_att: float,
    symmetric: bool = True,
) -> torch.Tensor:
    """InfoNCE over pairwise Z scores; negatives are the other reports/images
    in the batch."""
    z = pairwise_match_scores(patch_batch, sentences, sentence_mask, tau2, tau_att)
    logits = z / tau2
    targets = torch.arange(z.shape[0], device=z.device)
    image_to_text = F.cross_entropy(logits, targets)
    if not symmetric:
        return image_to_text
    text_to_image = F.cross_entropy(logits.T, targets)
    return 0.5 * (image_to_text + text_to_image)
