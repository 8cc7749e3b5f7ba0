"""Whole-image / whole-report contrastive alignment.

The batch similarity matrix holds cosine similarities; each row (image
anchor) and, in symmetric mode, each column (report anchor) is scored with
InfoNCE cross-entropy against the matched diagonal entry. Log-sum-exp runs
through `F.cross_entropy`, which subtracts the row max for stability.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class TemperatureParams:
    """Softmax temperatures: tau1 global contrastive, tau2 local matching,
    tau_att sentence-to-patch attention."""

    tau1: float = 0.07
    tau2: float = 0.1
    tau_att: float = 0.1

    def __post_init__(self):
        for name in ("tau1", "tau2", "tau_att"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def _checked_unit_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty [B, D] matrix, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    norms = torch.linalg.vector_norm(x, dim=-1)
    if (norms == 0).any():
        raise ValueError(f"{name} contains a zero-norm row")
    return x / norms.unsqueeze(-1)


def global_alignment_loss(
    v: torch.Tensor,
    t: torch.Tensor,
    tau1: float,
    symmetric: bool = True,
) -> torch.Tensor:
    """Mean InfoNCE over the batch at temperature tau1.

    `symmetric=True` averages the image-anchored and report-anchored
    directions; `symmetric=False` keeps only the image-anchored softmax
    over reports.
    """
    if tau1 <= 0:
        raise ValueError("tau1 must be strictly positive")
    if v.shape != t.shape:
        raise ValueError(f"shape mismatch: v {tuple(v.shape)} vs t {tuple(t.shape)}")
    vn = _checked_unit_rows(v, "v")
    tn = _checked_unit_rows(t, "t")

    logits = (vn @ tn.T) / tau1
    targets = torch.arange(v.shape[0], device=v.device)
    image_to_text = F.cross_entropy(logits, targets)
    if not symmetric:
        return image_to_text
    text_to_image = F.cross_entropy(logits.T, targets)
    return 0.5 * (image_to_text + text_to_image)
