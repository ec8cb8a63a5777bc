"""Wide residual feature extractor shared by the global and local networks.

One stem convolution, three blocks of four pre-activation residual units, and
a closing BN + ReLU.  The first unit of every block widens the channels and
halves the spatial extent, so the extractor downsamples by exactly 8.
"""
from __future__ import annotations

import numpy as np

from .numeric import ops
from .numeric.nn import BatchNorm2d, Conv2d, Module, init_module
from .numeric.tensor import Tensor

STEM_WIDTH = 16
BLOCK_WIDTHS = (160, 320, 640)
UNITS_PER_BLOCK = 4
DOWNSAMPLE = 8


def scaled(width: int, width_scale: float) -> int:
    return max(1, int(round(width * width_scale)))


class WideResidualUnit(Module):
    """BN-ReLU-Conv3x3-BN-ReLU-Conv3x3 with an identity or 1x1 projection shortcut."""

    def __init__(self, n_in: int, n_out: int, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.n_in, self.n_out, self.stride = n_in, n_out, stride
        self.bn1 = BatchNorm2d(n_in)
        self.conv1 = Conv2d(n_in, n_out, 3, stride=stride, pad=1)
        self.bn2 = BatchNorm2d(n_out)
        self.conv2 = Conv2d(n_out, n_out, 3, stride=1, pad=1)
        # identity is only well-defined when neither channels nor extent change
        self.shortcut = Conv2d(n_in, n_out, 1, stride=stride) if (n_in != n_out or stride != 1) else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.n_in:
            raise ops.ShapeError(f"unit expects {self.n_in} channels, got {x.shape[-3]}")
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ops.ShapeError(f"spatial extent {h}×{w} not divisible by stride {self.stride}")
        act = ops.relu(self.bn1(x))
        main = self.conv2(ops.relu(self.bn2(self.conv1(act))))
        skip = x if self.shortcut is None else self.shortcut(act)
        return ops.add(main, skip)


class FeatureExtractor(Module):
    def __init__(self, width_scale: float = 1.0):
        if width_scale <= 0:
            raise ValueError("width_scale must be positive")
        self.width_scale = width_scale
        stem = scaled(STEM_WIDTH, width_scale)
        self.stem = Conv2d(1, stem, 3, stride=1, pad=1)
        units = []
        n_in = stem
        for width in BLOCK_WIDTHS:
            n_out = scaled(width, width_scale)
            for u in range(UNITS_PER_BLOCK):
                units.append(WideResidualUnit(n_in, n_out, stride=2 if u == 0 else 1))
                n_in = n_out
        self.units = units
        self.bn_out = BatchNorm2d(n_in)

    @property
    def out_channels(self) -> int:
        return self.bn_out.channels

    @property
    def blocks(self) -> list[list[WideResidualUnit]]:
        return [self.units[i:i + UNITS_PER_BLOCK] for i in range(0, len(self.units), UNITS_PER_BLOCK)]

    def forward(self, image: Tensor) -> Tensor:
        side = image.shape[-1]
        if image.shape[-2] % DOWNSAMPLE or side % DOWNSAMPLE:
            raise ops.ShapeError(f"input side {image.shape[-2:]} must be divisible by {DOWNSAMPLE}")
        if image.ndim == 3:
            out = self.forward(ops.reshape(image, (1,) + image.shape))
            return ops.reshape(out, out.shape[1:])
        x = self.stem(image)
        for unit in self.units:
            x = unit(x)
        return ops.relu(self.bn_out(x))


def extract_features(image: Tensor, net: FeatureExtractor) -> Tensor:
    return net(image)


def he_initialize(net: Module, seed: int) -> Module:
    """He-normal conv/FC weights, zero biases, BN affine (1, 0); deterministic in ``seed``."""
    init_module(net, np.random.default_rng(seed))
    return net
