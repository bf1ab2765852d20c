"""Synthetic planted-world data: faces built from oriented-gradient patches.

A small two-viewpoint, three-part arrangement of 12 landmarks, each rendered
as a distinctively oriented grating patch.  Quadrant-shaped occluders erase
patches (and paint the occluding region) on a configurable fraction of faces.
Used for end-to-end pipeline tests where ground truth is known exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .model import StateSpace, Topology
from .supervision import AnnotatedFace, ReferenceShapeSet, quadrant_mask, save_manifest

PLANTED_MIRROR = (0, 1, 3, 2, 9, 8, 11, 10, 5, 4, 7, 6)
EYE_RIGHT = (4, 5, 6, 7)  # x < 0 cluster
EYE_LEFT = (8, 9, 10, 11)


def planted_topology():
    return Topology(
        parent=(-1, 0, 0),
        part_of=(0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2),
        part_names=("core", "right_eye", "left_eye"),
        landmark_mirror=PLANTED_MIRROR,
    )


def _base_layout():
    return np.array(
        [
            [0.0, -2.0],
            [0.0, 12.0],
            [-9.0, 24.0],
            [9.0, 24.0],
            [-26.0, -18.0],
            [-14.0, -18.0],
            [-26.0, -8.0],
            [-14.0, -8.0],
            [14.0, -18.0],
            [26.0, -18.0],
            [14.0, -8.0],
            [26.0, -8.0],
        ]
    )


def _yaw(points, yaw_deg, depth=10.0):
    pts = np.asarray(points, dtype=np.float64)
    r2 = (pts[:, 0] ** 2 + pts[:, 1] ** 2) / (40.0**2)
    z = depth * np.exp(-r2 / 0.5)
    t = np.radians(yaw_deg)
    x = pts[:, 0] * np.cos(t) + z * np.sin(t)
    return np.stack([x, pts[:, 1]], axis=1)


@dataclass
class PlantedWorld:
    topology: Topology = field(default_factory=planted_topology)
    layouts: np.ndarray = None  # (2, 12, 2) true viewpoint layouts
    angles: np.ndarray = None  # per-landmark grating angle (radians)
    eye_right: tuple = EYE_RIGHT
    eye_left: tuple = EYE_LEFT
    patch_radius: float = 6.0
    grating_period: float = 6.0

    def __post_init__(self):
        if self.layouts is None:
            base = _base_layout()
            self.layouts = np.stack([_yaw(base, -15.0), _yaw(base, 15.0)])
        if self.angles is None:
            self.angles = np.array([k * np.pi / 12.0 for k in range(12)])

    @property
    def ipd(self):
        r = self.layouts[0][list(self.eye_right)].mean(axis=0)
        l = self.layouts[0][list(self.eye_left)].mean(axis=0)
        return float(np.linalg.norm(r - l))

    def references(self):
        shapes = []
        for layout in self.layouts:
            ipd = np.linalg.norm(
                layout[list(self.eye_right)].mean(axis=0)
                - layout[list(self.eye_left)].mean(axis=0)
            )
            s = layout / ipd
            shapes.append(s - s.mean(axis=0))
        return ReferenceShapeSet(np.stack(shapes), self.eye_right, self.eye_left)


def _render_patch(canvas, cx, cy, angle, radius, period, amplitude=0.5):
    h, w = canvas.shape
    x0, x1 = int(np.floor(cx - radius - 1)), int(np.ceil(cx + radius + 1))
    y0, y1 = int(np.floor(cy - radius - 1)), int(np.ceil(cy + radius + 1))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x1 <= x0 or y1 <= y0:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    window = np.exp(-r2 / (2.0 * (radius * 0.55) ** 2))
    wave = amplitude * np.cos(2.0 * np.pi * u / period)
    canvas[y0 : y1 + 1, x0 : x1 + 1] = np.clip(
        canvas[y0 : y1 + 1, x0 : x1 + 1] + window * wave, 0.0, 1.0
    )


def _background(shape, rng):
    return np.clip(0.45 + rng.normal(0.0, 0.03, size=shape), 0.0, 1.0)


def _scatter_distractors(canvas, rng, count):
    h, w = canvas.shape
    for _ in range(count):
        _render_patch(
            canvas,
            rng.uniform(8, w - 8),
            rng.uniform(8, h - 8),
            rng.uniform(0, np.pi),
            rng.uniform(4, 7),
            rng.uniform(5, 9),
            amplitude=0.4,
        )


def render_face_image(
    world,
    rng,
    image_size=(160, 160),
    occlude=False,
    scale_range=(0.95, 1.05),
    jitter=0.8,
    distractors=2,
):
    """One synthetic face; returns (image, landmarks, occlusion bits)."""
    h, w = image_size
    canvas = _background((h, w), rng)
    view = int(rng.integers(2))
    scale = rng.uniform(*scale_range)
    layout = world.layouts[view] * scale
    pad = world.patch_radius * 2 + 8
    x_lo, y_lo = layout.min(axis=0)
    x_hi, y_hi = layout.max(axis=0)
    cx = rng.uniform(pad - x_lo, w - pad - x_hi)
    cy = rng.uniform(pad - y_lo, h - pad - y_hi)
    pts = layout + np.array([cx, cy]) + rng.normal(0.0, jitter, size=layout.shape)
    occluded = np.zeros(len(pts), dtype=bool)
    region = None
    if occlude:
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        a = rng.uniform(x0, x1)
        b = rng.uniform(y0, y1)
        quadrant = int(rng.integers(4))
        occluded = quadrant_mask(pts, a, b, quadrant)
        margin = world.patch_radius + 4
        bx0, bx1 = x0 - margin, x1 + margin
        by0, by1 = y0 - margin, y1 + margin
        if quadrant == 0:
            region = (bx0, by0, a, b)
        elif quadrant == 1:
            region = (a, by0, bx1, b)
        elif quadrant == 2:
            region = (bx0, b, a, by1)
        else:
            region = (a, b, bx1, by1)
    _scatter_distractors(canvas, rng, int(rng.integers(0, distractors + 1)))
    for k, (x, y) in enumerate(pts):
        if occluded[k]:
            continue
        _render_patch(
            canvas, x, y, world.angles[k], world.patch_radius, world.grating_period
        )
    if region is not None:
        rx0, ry0, rx1, ry1 = (
            max(int(np.floor(region[0])), 0),
            max(int(np.floor(region[1])), 0),
            min(int(np.ceil(region[2])), w - 1),
            min(int(np.ceil(region[3])), h - 1),
        )
        if rx1 > rx0 and ry1 > ry0:
            canvas[ry0:ry1, rx0:rx1] = np.clip(
                0.22 + rng.normal(0.0, 0.02, size=(ry1 - ry0, rx1 - rx0)), 0.0, 1.0
            )
    return canvas, pts, occluded, view


def render_negative_image(rng, image_size=(160, 160), distractors=6):
    canvas = _background(image_size, rng)
    _scatter_distractors(canvas, rng, int(rng.integers(2, distractors + 1)))
    return canvas


def _save_png(canvas, path):
    arr = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def generate_planted_dataset(
    out_dir,
    n_train=200,
    n_test=100,
    n_negatives=24,
    occlusion_rate=0.4,
    seed=0,
    image_size=(160, 160),
):
    """Write images plus train/test manifests; returns paths and the world."""
    world = PlantedWorld()
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("train", "test", "negatives"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    def emit(split, count):
        faces = []
        for i in range(count):
            occ = bool(rng.random() < occlusion_rate)
            canvas, pts, bits, _ = render_face_image(
                world, rng, image_size=image_size, occlude=occ
            )
            name = os.path.join(split, f"{split}_{i:04d}.png")
            _save_png(canvas, os.path.join(out_dir, name))
            x0, y0 = pts.min(axis=0)
            x1, y1 = pts.max(axis=0)
            pad = 0.1 * (y1 - y0)
            faces.append(
                AnnotatedFace(
                    image=name,
                    landmarks=pts,
                    occluded=bits,
                    box=(x0 - pad, y0 - pad, x1 + pad, y1 + pad),
                )
            )
        return faces

    train_faces = emit("train", n_train)
    test_faces = emit("test", n_test)
    negatives = []
    for i in range(n_negatives):
        canvas = render_negative_image(rng, image_size=image_size)
        name = os.path.join("negatives", f"neg_{i:04d}.png")
        _save_png(canvas, os.path.join(out_dir, name))
        negatives.append(os.path.join(out_dir, name))
    train_manifest = os.path.join(out_dir, "train_manifest.json")
    test_manifest = os.path.join(out_dir, "test_manifest.json")
    save_manifest(train_faces, train_manifest)
    save_manifest(test_faces, test_manifest)
    return {
        "world": world,
        "train_manifest": train_manifest,
        "test_manifest": test_manifest,
        "negatives": negatives,
        "image_root": out_dir,
    }


def planted_trivial_state_space(world, n_occlusions=2):
    """Fixed visible/occluded patterns per part, for hand-built test models."""
    topo = world.topology
    patterns = []
    for p in range(topo.n_parts):
        nk = len(topo.landmarks_of(p))
        pat = np.zeros((2, n_occlusions, nk), dtype=bool)
        if n_occlusions > 1:
            pat[:, 1, :] = True
        patterns.append(pat)
    return StateSpace(2, 1, n_occlusions, tuple(patterns))
