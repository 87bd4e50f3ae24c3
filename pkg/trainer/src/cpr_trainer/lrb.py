"""Local metric head: a compact multi-path block projecting raw backbone

features into the retrieval space. Four parallel paths (1x1, 1x1-3x3,
1x1-3x3-3x3, avgpool-1x1) of equal width concatenate to twice the output
dimension before a final 1x1 projection; spatial size is preserved.
"""

from __future__ import annotations

import torch
from torch import nn


def _cbr(c_in: int, c_out: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=k, padding=k // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class LocalProjection(nn.Module):
    def __init__(self, in_channels: int, out_dim: int):
        super().__init__()
        if out_dim % 2 != 0:
            raise ValueError("out_dim must be even")
        width = out_dim // 2
        self.path1 = _cbr(in_channels, width, 1)
        self.path2 = nn.Sequential(_cbr(in_channels, width, 1), _cbr(width, width, 3))
        self.path3 = nn.Sequential(
            _cbr(in_channels, width, 1), _cbr(width, width, 3), _cbr(width, width, 3)
        )
        self.path4 = nn.Sequential(
            nn.AvgPool2d(kernel_size=3, stride=1, padding=1),
            _cbr(in_channels, width, 1),
        )
        self.project = nn.Conv2d(4 * width, out_dim, kernel_size=1)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        parts = [self.path1(x), self.path2(x), self.path3(x), self.path4(x)]
        return self.project(torch.cat(parts, dim=1))


class MultiScaleProjection(nn.Module):
    """One projection head per scale, trained jointly."""

    def __init__(self, in_channels: dict[int, int], out_dim: int):
        super().__init__()
        self.heads = nn.ModuleDict(
            {str(s): LocalProjection(c, out_dim) for s, c in sorted(in_channels.items())}
        )
        self.out_dim = out_dim

    def forward_scale(self, scale: int, x: torch.Tensor) -> torch.Tensor:
        return self.heads[str(scale)](x)

    def project_grid(self, scale: int, grid: torch.Tensor) -> torch.Tensor:
        """(H, W, C_in) -> (H, W, out_dim), preserving the grid."""
        x = grid.permute(2, 0, 1).unsqueeze(0)
        out = self.forward_scale(scale, x)
        return out[0].permute(1, 2, 0)
