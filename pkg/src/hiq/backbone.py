"""Small convolutional feature extractor exposing per-stage feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .config import ModelConfig
from .nn import Conv2d, Module


@dataclass
class BackboneTaps:
    maps: list[Tensor]  # one (N, C_i, H_i, W_i) map per stage, shallow to deep
    penultimate: Tensor  # (N, C_last): GAP of the deepest map


class Backbone(Module):
    """Stages of [conv3x3 -> ReLU] x convs_per_stage followed by 2x2 average-pool downsampling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, in_channels: int = 3) -> None:
        self.input_size = cfg.input_size
        self.in_channels = in_channels
        self.stages: list[list[Conv2d]] = []
        c = in_channels
        for width in cfg.backbone_widths:
            stage = []
            for _ in range(cfg.convs_per_stage):
                stage.append(Conv2d(c, width, 3, rng))
                c = width
            self.stages.append(stage)
        self.widths = tuple(cfg.backbone_widths)

    def tap_sizes(self) -> list[int]:
        return [self.input_size // 2 ** (i + 1) for i in range(len(self.stages))]

    def __call__(self, images: Tensor) -> BackboneTaps:
        expected = (self.in_channels, self.input_size, self.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"backbone expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")
        maps = []
        x = images
        for stage in self.stages:
            for conv in stage:
                x = ops.relu(conv(x))
            x = ops.avg_pool2d(x, 2)
            maps.append(x)
        return BackboneTaps(maps, ops.global_avg_pool(x))


def project_channels(feature_map: Tensor, conv: Conv2d) -> Tensor:
    """1x1 convolution to the query width d_q."""
    return conv(feature_map)
