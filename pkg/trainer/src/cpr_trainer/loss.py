"""Weighted hinge contrastive objective over sampled feature pairs."""

from __future__ import annotations

import torch

from .sampling import FeaturePair


def contrastive_loss(
    pairs: list[FeaturePair], m_plus: float = 0.9, m_minus: float = 0.3, p: float = 2.0
) -> torch.Tensor:
    """Mean over pairs of w * hinge(similarity)^p.

    Positive pairs pay (m_plus - q.r)_+ and negative pairs (q.r - m_minus)_+,
    both raised to p > 1 to emphasize hard pairs.
    """
    if not pairs:
        raise ValueError("pair list must be non-empty")
    q = torch.stack([pair.query_vec for pair in pairs])
    r = torch.stack([pair.ref_vec for pair in pairs])
    y = torch.tensor([float(pair.label) for pair in pairs], dtype=q.dtype)
    w = torch.tensor([float(pair.weight) for pair in pairs], dtype=q.dtype)
    sim = (q * r).sum(dim=-1)
    hinge = y * torch.clamp(m_plus - sim, min=0.0) + (1.0 - y) * torch.clamp(
        sim - m_minus, min=0.0
    )
    return (w * hinge.pow(p)).mean()
