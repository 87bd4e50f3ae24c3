"""Training configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

VALID_OUT_DIMS = (384, 64, 16)


@dataclass
class TrainerConfig:
    gamma: int = 384  # sampled pairs per image pair, a multiple of 3
    theta: float = 4.0  # remote-pair distance threshold, grid units
    m_plus: float = 0.9
    m_minus: float = 0.3
    p: float = 2.0
    delta: float | None = None  # pre-estimated mean raw distance; None = estimate
    lr: float = 1e-3
    weight_decay: float = 1e-2
    iterations: int = 40000
    batch_size: int = 32  # image pairs per optimizer step
    out_dim: int = 384
    mask_cell_threshold: float = 0.3  # fraction of altered pixels marking a cell
    defect_refresh_epochs: int = 1  # re-roll each image's synthetic defect every N epochs
    seed: int = 0
    backbone: dict = field(default_factory=lambda: {"name": "densenet201"})

    def __post_init__(self):
        if self.gamma % 3 != 0 or self.gamma < 3:
            raise ValueError("gamma must be a positive multiple of 3")
        if not self.m_minus < self.m_plus:
            raise ValueError("m_minus must be < m_plus")
        if self.p <= 1:
            raise ValueError("p must be > 1")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.out_dim not in VALID_OUT_DIMS and self.out_dim % 2 != 0:
            raise ValueError("out_dim must be even (384, 64 and 16 are standard)")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.defect_refresh_epochs < 1:
            raise ValueError("defect_refresh_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "theta": self.theta,
            "m_plus": self.m_plus,
            "m_minus": self.m_minus,
            "p": self.p,
            "delta": self.delta,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "out_dim": self.out_dim,
            "mask_cell_threshold": self.mask_cell_threshold,
            "defect_refresh_epochs": self.defect_refresh_epochs,
            "seed": self.seed,
            "backbone": self.backbone,
        }
