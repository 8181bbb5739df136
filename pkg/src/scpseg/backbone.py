"""Capacity-parameterized convolutional encoder-decoder.

A plain U-shaped feature extractor: each encoder level applies two 3x3
convolutions with ReLU and halves the resolution with 2x2 max pooling; the
decoder mirrors it with nearest-neighbour upsampling and skip concatenation.
No normalization layers and no biases anywhere, which keeps gradient checks
exact and the FLOP model simple. The capacity dial ``n_c`` is the channel
count of the center level; level widths are n_c / 2^(depth-1-level), so the
output feature map carries n_c / 2^(depth-1) channels at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Graph, Tensor, concat_channels, conv2d, maxpool2, relu, upsample_nearest2

__all__ = ["ConfigError", "BackboneConfig", "BackboneParams", "build_backbone", "backbone_forward", "conv_plan"]


class ConfigError(ValueError):
    """Raised for invalid model or dataset configuration."""


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int
    n_c: int
    depth: int = 4

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.n_c < 1 or self.n_c % (1 << (self.depth - 1)) != 0:
            raise ConfigError(
                f"n_c must be divisible by 2^(depth-1) = {1 << (self.depth - 1)}, got {self.n_c}"
            )

    @property
    def level_widths(self) -> tuple[int, ...]:
        return tuple(self.n_c >> (self.depth - 1 - level) for level in range(self.depth))

    @property
    def feature_channels(self) -> int:
        return self.level_widths[0]

    @property
    def pool_factor(self) -> int:
        return 1 << (self.depth - 1)


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    weights: dict[str, Tensor] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        return dict(self.weights)


def conv_plan(cfg: BackboneConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, c_in, c_out) for every 3x3 convolution in the network."""
    w = cfg.level_widths
    plan: list[tuple[str, int, int]] = []
    prev = cfg.in_channels
    for level in range(cfg.depth - 1):
        plan.append((f"enc{level}.conv1", prev, w[level]))
        plan.append((f"enc{level}.conv2", w[level], w[level]))
        prev = w[level]
    plan.append(("center.conv1", prev, w[-1]))
    plan.append(("center.conv2", w[-1], w[-1]))
    for level in reversed(range(cfg.depth - 1)):
        up = w[level + 1]
        plan.append((f"dec{level}.conv1", up + w[level], w[level]))
        plan.append((f"dec{level}.conv2", w[level], w[level]))
    return plan


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_backbone(cfg: BackboneConfig, seed: int) -> BackboneParams:
    """Deterministically initialize every conv weight with fan-in-scaled uniforms."""
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for name, c_in, c_out in conv_plan(cfg):
        arr = fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        weights[name] = Tensor(arr, requires_grad=True)
    return BackboneParams(cfg=cfg, weights=weights)


def backbone_forward(params: BackboneParams, image: Tensor, graph: Graph | None = None) -> Tensor:
    """Map a (in_channels, H, W) image to the (C, H, W) feature map."""
    cfg = params.cfg
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ConfigError(f"expected image of {cfg.in_channels} channels, got shape {image.shape}")
    _, h, w = image.shape
    f = cfg.pool_factor
    if h % f or w % f:
        raise ConfigError(f"spatial dims {h}x{w} must be divisible by 2^(depth-1) = {f}")
    if graph is not None:
        graph.watch(*params.weights.values())

    wts = params.weights
    x = image
    skips: list[Tensor] = []
    for level in range(cfg.depth - 1):
        x = relu(conv2d(x, wts[f"enc{level}.conv1"], stride=1, padding=1))
        x = relu(conv2d(x, wts[f"enc{level}.conv2"], stride=1, padding=1))
        skips.append(x)
        x = maxpool2(x)
    x = relu(conv2d(x, wts["center.conv1"], stride=1, padding=1))
    x = relu(conv2d(x, wts["center.conv2"], stride=1, padding=1))
    for level in reversed(range(cfg.depth - 1)):
        x = upsample_nearest2(x)
        x = concat_channels(x, skips[level])
        x = relu(conv2d(x, wts[f"dec{level}.conv1"], stride=1, padding=1))
        x = relu(conv2d(x, wts[f"dec{level}.conv2"], stride=1, padding=1))
    return x


def param_count(cfg: BackboneConfig) -> int:
    return sum(c_in * c_out * 9 for _, c_in, c_out in conv_plan(cfg))
