"""Frozen feature extractors producing two-scale raw tensors from images.

The default extractor slices a torchvision DenseNet-201 after its first and
second dense blocks (320x320 input -> 80x80x256 and 40x40x512). Weights load
from a local checkpoint when given, otherwise the network keeps its seeded
random initialization (this sandbox has no weight downloads); either way the
blocks stay frozen. A small "tiny" conv stack is provided for fast tests.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigurationError(RuntimeError):
    pass


class TwoScaleBackbone(nn.Module):
    """Wraps stage-1/stage-2 feature modules and normalization constants."""

    def __init__(self, stage1: nn.Module, stage2: nn.Module, image_size: int):
        super().__init__()
        self.stage1 = stage1
        self.stage2 = stage2
        self.image_size = image_size
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        f1 = self.stage1(images)
        f2 = self.stage2(f1)
        return {1: f1, 2: f2}


def _densenet_backbone(spec: dict) -> TwoScaleBackbone:
    from torchvision.models import densenet201

    torch.manual_seed(int(spec.get("seed", 0)))
    net = densenet201(weights=None)
    weights_path = spec.get("weights")
    if weights_path:
        state = torch.load(weights_path, map_location="cpu")
        net.load_state_dict(state)
    f = net.features
    stage1 = nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0, f.denseblock1)
    stage2 = nn.Sequential(f.transition1, f.denseblock2)
    return TwoScaleBackbone(stage1, stage2, int(spec.get("image_size", 320)))


def _tiny_backbone(spec: dict) -> TwoScaleBackbone:
    torch.manual_seed(int(spec.get("seed", 0)))
    c1 = int(spec.get("channels1", 24))
    c2 = int(spec.get("channels2", 32))
    stage1 = nn.Sequential(
        nn.Conv2d(3, c1, kernel_size=5, stride=4, padding=2),
        nn.ReLU(),
        nn.Conv2d(c1, c1, kernel_size=3, stride=1, padding=1),
        nn.ReLU(),
    )
    stage2 = nn.Sequential(
        nn.AvgPool2d(2),
        nn.Conv2d(c1, c2, kernel_size=3, stride=1, padding=1),
        nn.ReLU(),
    )
    return TwoScaleBackbone(stage1, stage2, int(spec.get("image_size", 64)))


def build_backbone(spec: dict) -> TwoScaleBackbone:
    name = spec.get("name", "densenet201")
    if name == "densenet201":
        return _densenet_backbone(spec)
    if name == "tiny":
        return _tiny_backbone(spec)
    raise ConfigurationError(f"unknown backbone {name!r}")


def preprocess(image: np.ndarray, image_size: int) -> torch.Tensor:
    """HWC uint8/float RGB image -> normalized (1, 3, S, S) tensor."""
    from PIL import Image

    if image.dtype != np.uint8:
        image = np.clip(image, 0, 255).astype(np.uint8)
    pil = Image.fromarray(image).convert("RGB").resize(
        (image_size, image_size), Image.BILINEAR
    )
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def extract_features(
    image: np.ndarray, backbone: TwoScaleBackbone
) -> dict[int, np.ndarray]:
    """Per-scale (H, W, C) float32 feature grids for one RGB image."""
    batch = preprocess(image, backbone.image_size)
    with torch.no_grad():
        feats = backbone(batch)
    return {
        s: f[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)
        for s, f in feats.items()
    }
