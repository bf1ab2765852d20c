"""2D similarity transforms and box utilities."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Similarity:
    """Scale-rotation-translation map  p -> scale * R(theta) @ p + t."""

    scale: float
    theta: float  # radians, counter-clockwise in (x right, y down) convention
    tx: float
    ty: float

    def matrix(self):
        c = self.scale * np.cos(self.theta)
        s = self.scale * np.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty]], dtype=np.float64)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        m = self.matrix()
        return pts @ m[:, :2].T + m[:, 2]

    def inverse(self):
        if self.scale == 0:
            raise DataError("similarity with zero scale is not invertible")
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.theta), np.sin(-self.theta)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return Similarity(inv_scale, -self.theta, tx, ty)

    def compose(self, inner):
        """Return transform equivalent to applying `inner` first, then self."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        tx = self.scale * (c * inner.tx - s * inner.ty) + self.tx
        ty = self.scale * (s * inner.tx + c * inner.ty) + self.ty
        return Similarity(self.scale * inner.scale, self.theta + inner.theta, tx, ty)


def box_area(box):
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_intersection(a, b):
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[2], b[2])
    y1 = min(a[3], b[3])
    if x1 <= x0 or y1 <= y0:
        return 0.0
    return (x1 - x0) * (y1 - y0)


def box_iou(a, b):
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def overlap_fraction(box, reference):
    """Intersection area divided by the area of `reference`."""
    ref = box_area(reference)
    if ref <= 0:
        return 0.0
    return box_intersection(box, reference) / ref


def landmarks_to_box(points, pad_fraction=0.1):
    """Tight box around points, padded on all sides by a fraction of its height."""
    pts = np.asarray(points, dtype=np.float64)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad = pad_fraction * max(y1 - y0, 1e-9)
    return (x0 - pad, y0 - pad, x1 + pad, y1 + pad)
