"""Two-scale network: global extractor + heads + localizer, local extractor + heads,
and the fused-feature MLP classifiers."""
from __future__ import annotations

import numpy as np

from .backbone import DOWNSAMPLE, FeatureExtractor, he_initialize
from .losses import N_POLARITY, N_TYPES
from .numeric import ops
from .numeric.nn import Linear, Module
from .numeric.tensor import Tensor
from .zoom import LOCALIZER_POOL_OUT, Localizer, VarifocalConstants

CLASSIFIER_POOL_OUT = 4
ENSEMBLE_HIDDEN = 512


def pool_to(features: Tensor, out_side: int) -> Tensor:
    side = features.shape[-1]
    if side % out_side:
        raise ops.ShapeError(f"feature side {side} not divisible into {out_side}×{out_side}")
    k = side // out_side
    return ops.max_pool2d(features, k) if k > 1 else features


class ClassifierHeads(Module):
    """Max-pool to 4×4, then one FC layer each for type (24) and polarity (2)."""

    def __init__(self, channels: int):
        d = channels * CLASSIFIER_POOL_OUT ** 2
        self.type_fc = Linear(d, N_TYPES)
        self.polarity_fc = Linear(d, N_POLARITY)

    def forward(self, features: Tensor):
        flat = ops.flatten(pool_to(features, CLASSIFIER_POOL_OUT))
        return self.type_fc(flat), self.polarity_fc(flat)


class EnsembleMLP(Module):
    def __init__(self, d_in: int, n_out: int, hidden: int = ENSEMBLE_HIDDEN):
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, n_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class VarifocalModel(Module):
    def __init__(self, width_scale: float = 1.0, consts: VarifocalConstants = VarifocalConstants()):
        self.width_scale = width_scale
        self.consts = consts
        if consts.image_side % (DOWNSAMPLE * LOCALIZER_POOL_OUT):
            raise ValueError(f"image side must be a multiple of {DOWNSAMPLE * LOCALIZER_POOL_OUT}")
        if consts.zoom_side % (DOWNSAMPLE * CLASSIFIER_POOL_OUT):
            raise ValueError(f"zoom side must be a multiple of {DOWNSAMPLE * CLASSIFIER_POOL_OUT}")
        self.g_extractor = FeatureExtractor(width_scale)
        c = self.g_extractor.out_channels
        self.g_heads = ClassifierHeads(c)
        self.localizer = Localizer(c, consts.image_side // DOWNSAMPLE)
        self.l_extractor = FeatureExtractor(width_scale)
        self.l_heads = ClassifierHeads(c)
        self.type_mlp = EnsembleMLP(self.ensemble_dim, N_TYPES)
        self.polarity_mlp = EnsembleMLP(self.ensemble_dim, N_POLARITY)

    @property
    def feature_channels(self) -> int:
        return self.g_extractor.out_channels

    @property
    def ensemble_dim(self) -> int:
        return 2 * self.feature_channels * CLASSIFIER_POOL_OUT ** 2

    def parameter_groups(self) -> dict[str, list]:
        return {
            "g_net": self.g_extractor.parameters() + self.g_heads.parameters(),
            "localizer": self.localizer.parameters(),
            "l_net": self.l_extractor.parameters() + self.l_heads.parameters(),
            "ensemble": self.type_mlp.parameters() + self.polarity_mlp.parameters(),
        }

    def initialize(self, seed: int) -> "VarifocalModel":
        """Step 1: He initialization of every layer from one seed."""
        he_initialize(self, seed)
        # the localizer has no hidden activation, so He weights put its sigmoid deep in
        # saturation (exactly 1.0 in float32); a zero last layer starts every box at u = 0.5
        self.localizer.fc2.weight.data[...] = 0
        return self

    def fused_features(self, g_features: Tensor, l_features: Tensor) -> Tensor:
        g = ops.flatten(pool_to(g_features, CLASSIFIER_POOL_OUT))
        l = ops.flatten(pool_to(l_features, CLASSIFIER_POOL_OUT))
        return ops.concat([g, l], axis=1)

    def meta(self) -> dict[str, np.ndarray]:
        c = self.consts
        return {
            "meta.width_scale": np.array([self.width_scale], dtype=np.float64),
            "meta.image_side": np.array([c.image_side], dtype=np.int64),
            "meta.zoom_side": np.array([c.zoom_side], dtype=np.int64),
            "meta.k": np.array([c.k], dtype=np.float64),
        }

    @classmethod
    def from_meta(cls, arrays: dict) -> "VarifocalModel":
        side = int(arrays["meta.image_side"][0])
        consts = VarifocalConstants(t1=side / 4, t2=side / 2, k=float(arrays["meta.k"][0]),
                                    image_side=side, zoom_side=int(arrays["meta.zoom_side"][0]))
        return cls(float(arrays["meta.width_scale"][0]), consts)
