"""Zoom mechanism: box regression head, box geometry, boxcar mask and its gradient.

Pixel ``(row, col)`` of an image is treated as the point ``(col + 0.5, row + 0.5)``
in continuous coordinates, so a box with integer corners ``[x0, x1)`` covers
exactly the columns ``x0 .. x1-1`` of the hard slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import ops
from .numeric.nn import Linear, Module
from .numeric.tensor import Tensor, as_tensor

LOCALIZER_HIDDEN = 1024
LOCALIZER_POOL_OUT = 8


@dataclass(frozen=True)
class VarifocalConstants:
    t1: float = 64.0
    t2: float = 128.0
    k: float = 10.0
    image_side: int = 256
    zoom_side: int = 128

    def __post_init__(self):
        if self.t1 <= 0 or self.k <= 0:
            raise ValueError("T1 and k must be positive")
        if self.t2 != 2 * self.t1:
            raise ValueError(f"T2 must equal 2*T1 (got T1={self.t1}, T2={self.t2})")
        if 2 * self.t1 + self.t2 != self.image_side:
            raise ValueError(f"T1 + T2 + T1 must equal image_side {self.image_side}")
        if self.zoom_side < 2:
            raise ValueError("zoom_side must be at least 2")

    @classmethod
    def for_side(cls, image_side: int, k: float = 10.0) -> "VarifocalConstants":
        """Constants at the reference proportions (T1 = side/4, zoom = side/2)."""
        return cls(t1=image_side / 4, t2=image_side / 2, k=k, image_side=image_side, zoom_side=image_side // 2)


@dataclass(frozen=True)
class RelativeBox:
    u_x: float
    u_y: float
    u_l: float

    def __post_init__(self):
        for name in ("u_x", "u_y", "u_l"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_x, self.u_y, self.u_l], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "RelativeBox":
        a = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PixelBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float
    half_side: float

    @property
    def side(self) -> float:
        return 2 * self.half_side

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_tl + self.half_side, self.y_tl + self.half_side)


# ---------------------------------------------------------------------------
# localization head


class Localizer(Module):
    """Max-pool to 8×8, FC to 1024, FC to 3, sigmoid."""

    def __init__(self, channels: int, feature_side: int):
        if feature_side % LOCALIZER_POOL_OUT:
            raise ValueError(f"feature side {feature_side} must be a multiple of {LOCALIZER_POOL_OUT}")
        self.channels, self.feature_side = channels, feature_side
        self.pool = feature_side // LOCALIZER_POOL_OUT
        self.fc1 = Linear(channels * LOCALIZER_POOL_OUT ** 2, LOCALIZER_HIDDEN)
        self.fc2 = Linear(LOCALIZER_HIDDEN, 3)

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1:] != (self.channels, self.feature_side, self.feature_side):
            raise ops.ShapeError(
                f"localizer expects N×{self.channels}×{self.feature_side}×{self.feature_side}, got {features.shape}")
        pooled = ops.max_pool2d(features, self.pool) if self.pool > 1 else features
        return self.head(pooled)

    def head(self, pooled: Tensor) -> Tensor:
        """FC-FC-sigmoid on features already pooled to 8×8."""
        return ops.sigmoid(self.fc2(self.fc1(ops.flatten(pooled))))


def localize(global_features: Tensor, head: Localizer) -> RelativeBox:
    """Box prediction for a single ``C×H×W`` feature map."""
    f = as_tensor(global_features)
    if f.ndim == 3:
        f = ops.reshape(f, (1,) + f.shape)
    return RelativeBox.from_array(head(f).data[0])


# ---------------------------------------------------------------------------
# geometry


def box_to_pixels(u: RelativeBox, c: VarifocalConstants) -> PixelBox:
    half = u.u_l * c.t1 / 2 + c.t1 / 2
    cx = c.t1 + u.u_x * c.t2
    cy = c.t1 + u.u_y * c.t2
    return PixelBox(cx - half, cy - half, cx + half, cy + half, half)


def heaviside_smooth(x, k: float):
    """Logistic step ``1 / (1 + exp(-k x))``, evaluated without overflow."""
    if k <= 0:
        raise ValueError("k must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(k * x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def heaviside_slope(x, k: float):
    """Derivative ``k H (1 - H)`` of :func:`heaviside_smooth`, written as
    ``k z / (1 + z)^2`` with ``z = exp(-k|x|)`` so the tails do not underflow to 0."""
    if k <= 0:
        raise ValueError("k must be positive")
    z = np.exp(-np.abs(k * np.asarray(x, dtype=np.float64)))
    out = k * z / (1.0 + z) ** 2
    return float(out) if out.ndim == 0 else out


def _coords(c: VarifocalConstants) -> np.ndarray:
    return np.arange(c.image_side, dtype=np.float64) + 0.5


def edge_profiles(box: PixelBox, c: VarifocalConstants) -> tuple[np.ndarray, np.ndarray]:
    """1-D boxcar profiles along x (columns) and y (rows)."""
    p = _coords(c)
    px = heaviside_smooth(p - box.x_tl, c.k) - heaviside_smooth(p - box.x_br, c.k)
    py = heaviside_smooth(p - box.y_tl, c.k) - heaviside_smooth(p - box.y_br, c.k)
    return px, py


def boxcar_mask(box: PixelBox, c: VarifocalConstants) -> np.ndarray:
    px, py = edge_profiles(box, c)
    return np.outer(py, px)


def _profile_partials(box: PixelBox, c: VarifocalConstants):
    p = _coords(c)
    sx_tl, sx_br = heaviside_slope(p - box.x_tl, c.k), heaviside_slope(p - box.x_br, c.k)
    sy_tl, sy_br = heaviside_slope(p - box.y_tl, c.k), heaviside_slope(p - box.y_br, c.k)
    # d/d center moves both edges together; d/d half-side moves them apart
    return (sx_br - sx_tl, sx_tl + sx_br), (sy_br - sy_tl, sy_tl + sy_br)


def boxcar_partials(box: PixelBox, c: VarifocalConstants) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask derivatives with respect to the center x, center y and half side."""
    px, py = edge_profiles(box, c)
    (dpx_c, dpx_l), (dpy_c, dpy_l) = _profile_partials(box, c)
    return np.outer(py, dpx_c), np.outer(dpy_c, px), np.outer(dpy_l, px) + np.outer(py, dpx_l)


def localization_backward(g_top: np.ndarray, box: PixelBox, u: RelativeBox, c: VarifocalConstants) -> np.ndarray:
    """Gradient of the classification loss with respect to ``(u_x, u_y, u_l)``.

    ``g_top`` is the L-Net input gradient already placed on the image grid.  Each
    pixel contributes its negative squared gradient weighted by the analytic
    boxcar derivative, then the chain factors ``T2, T2, T1/2`` apply.
    """
    g = np.asarray(g_top, dtype=np.float64)
    if g.shape != (c.image_side, c.image_side):
        raise ops.ShapeError(f"G_top shape {g.shape} does not match mask grid {(c.image_side,) * 2}")
    saliency = -(g * g)
    return _energy_gradient(saliency, box, c)


def _energy_gradient(saliency: np.ndarray, box: PixelBox, c: VarifocalConstants) -> np.ndarray:
    px, py = edge_profiles(box, c)
    (dpx_c, dpx_l), (dpy_c, dpy_l) = _profile_partials(box, c)
    d_cx = py @ saliency @ dpx_c
    d_cy = dpy_c @ saliency @ px
    d_l = dpy_l @ saliency @ px + py @ saliency @ dpx_l
    return np.array([d_cx * c.t2, d_cy * c.t2, d_l * c.t1 / 2])


def boxcar_energy(saliency: np.ndarray, u: RelativeBox, c: VarifocalConstants) -> float:
    """Sum of ``saliency`` under the soft mask of ``u``; the boxcar-forward variant
    whose exact derivative :func:`localization_backward` evaluates."""
    return float(np.sum(saliency * boxcar_mask(box_to_pixels(u, c), c)))


# ---------------------------------------------------------------------------
# hard-slice forward path


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def slice_bounds(box: PixelBox, c: VarifocalConstants) -> tuple[int, int, int, int]:
    """Integer ``(y0, y1, x0, x1)`` of the hard slice, clipped to the image."""
    x0 = min(max(_round_half_up(box.x_tl), 0), c.image_side)
    x1 = min(max(_round_half_up(box.x_br), 0), c.image_side)
    y0 = min(max(_round_half_up(box.y_tl), 0), c.image_side)
    y1 = min(max(_round_half_up(box.y_br), 0), c.image_side)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise ValueError(f"degenerate crop {x1 - x0}×{y1 - y0} after rounding")
    return y0, y1, x0, x1


def crop_and_zoom(image, box: PixelBox, c: VarifocalConstants) -> Tensor:
    """Slice the box out of a ``1×S×S`` (or ``N×1×S×S``) image and resize to ``zoom_side``."""
    image = as_tensor(image)
    if image.shape[-2:] != (c.image_side, c.image_side):
        raise ops.ShapeError(f"image {image.shape} does not match image_side {c.image_side}")
    y0, y1, x0, x1 = slice_bounds(box, c)
    region = image.data[..., y0:y1, x0:x1]
    return ops.bilinear_resize(Tensor(np.ascontiguousarray(region)), c.zoom_side, c.zoom_side)


def map_gradient_to_image(g_zoom: np.ndarray, box: PixelBox, c: VarifocalConstants) -> np.ndarray:
    """Place an L-Net input gradient onto the image grid by nearest-neighbour lookup.

    Pixels outside the hard slice receive zero.
    """
    g_zoom = np.asarray(g_zoom, dtype=np.float64)
    g_zoom = g_zoom.reshape(g_zoom.shape[-2:])
    y0, y1, x0, x1 = slice_bounds(box, c)
    h, w = y1 - y0, x1 - x0
    zh, zw = g_zoom.shape
    rows = np.floor(np.arange(h) * (zh - 1) / (h - 1) + 0.5).astype(np.int64)
    cols = np.floor(np.arange(w) * (zw - 1) / (w - 1) + 0.5).astype(np.int64)
    out = np.zeros((c.image_side, c.image_side))
    out[y0:y1, x0:x1] = g_zoom[np.ix_(rows, cols)]
    return out


def ground_truth_box(raw_image: np.ndarray, c: VarifocalConstants, fg_threshold: float = 250.0) -> RelativeBox:
    """Centered box label from the foreground extent of a 0-255 image (dark object on white)."""
    img = np.asarray(raw_image).reshape(np.asarray(raw_image).shape[-2:])
    fg = img < fg_threshold
    if not fg.any():
        raise ValueError("image has no foreground pixels")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    d = max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1)
    u_l = float(np.clip(d / c.t1 - 1.0, 0.0, 1.0))
    return RelativeBox(0.5, 0.5, u_l)
