"""Image ingestion and HOG feature pyramids over scales and in-plane rotations.

The cell descriptor is the 31-dimensional analytic-reduction HOG used
throughout the DPM family: 18 contrast-sensitive orientation channels,
9 contrast-insensitive channels and 4 block-normalization sums, computed over
square cells with clipped block normalization and a one-cell boundary trim.
"""

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

from .errors import DataError

HOG_DIM = 31
_EPS = 1e-4
_CLIP = 0.2
_TEXTURE_SCALE = 0.2357

# Unit vectors of the 9 base orientations (20-degree steps).  Stored with the
# conventional 4-decimal truncation so flipping dx maps the dot-product set
# onto itself exactly in floating point.
_UU = np.array([1.0000, 0.9397, 0.7660, 0.5000, 0.1736, -0.1736, -0.5000, -0.7660, -0.9397])
_VV = np.array([0.0000, 0.3420, 0.6428, 0.8660, 0.9848, 0.9848, 0.8660, 0.6428, 0.3420])

# Channel permutation induced by a horizontal image flip: signed channel b maps
# to (9 - b) mod 18, unsigned channel u to (9 - u) mod 9, and the four texture
# sums swap left/right block pairs.
HOG_MIRROR_PERMUTATION = np.array(
    [(9 - b) % 18 for b in range(18)]
    + [18 + (9 - u) % 9 for u in range(9)]
    + [29, 30, 27, 28]
)


def load_image(path):
    """Load a PNG/PGM/PPM image losslessly as float64 in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def _gradients(image, visible_h, visible_w):
    """Centered-difference gradients for pixels [1, visible-1), clamped reads."""
    h, w = image.shape[:2]
    ys = np.arange(1, visible_h - 1)
    xs = np.arange(1, visible_w - 1)
    iy = np.minimum(ys, h - 2)
    ix = np.minimum(xs, w - 2)
    if image.ndim == 2:
        chans = image[:, :, None]
    else:
        chans = image
    best_v = None
    dx = dy = None
    for c in range(chans.shape[2]):
        ch = chans[:, :, c]
        cdx = ch[np.ix_(iy, ix + 1)] - ch[np.ix_(iy, ix - 1)]
        cdy = ch[np.ix_(iy + 1, ix)] - ch[np.ix_(iy - 1, ix)]
        v = cdx * cdx + cdy * cdy
        if best_v is None:
            best_v, dx, dy = v, cdx, cdy
        else:
            take = v > best_v  # strict: earlier channel wins ties
            dx = np.where(take, cdx, dx)
            dy = np.where(take, cdy, dy)
            best_v = np.where(take, v, best_v)
    return dx, dy, np.sqrt(best_v)


def _bilinear_axis(coords, cell_size):
    """Integer-exact bilinear cell weights along one axis.

    For pixel p the continuous cell coordinate is (p + 0.5)/cell - 0.5; the
    numerator 2p + 1 - cell is kept integral so weights mirror exactly under
    image reflection.
    """
    num = 2 * coords + 1 - cell_size
    den = 2 * cell_size
    i0 = num // den
    frac = (num - i0 * den) / float(den)
    return i0, frac


def hog(image, cell_size=8):
    """31-d HOG cell grid with one-cell trim.

    Orientation votes are snapped to the best of 18 signed directions; exact
    ties (e.g. purely vertical gradients) split their vote equally so a
    horizontal image flip permutes channels exactly rather than approximately.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < 2 * cell_size or w < 2 * cell_size:
        raise DataError(
            f"image {h}x{w} too small for cell size {cell_size} (need >= 2 cells)"
        )
    blocks_y = max(int(round(h / cell_size)), 1)
    blocks_x = max(int(round(w / cell_size)), 1)
    out_y = max(blocks_y - 2, 0)
    out_x = max(blocks_x - 2, 0)
    visible_h = blocks_y * cell_size
    visible_w = blocks_x * cell_size

    dx, dy, mag = _gradients(image, visible_h, visible_w)
    ny, nx = mag.shape

    dots = _UU[:, None, None] * dx[None] + _VV[:, None, None] * dy[None]
    adots = np.abs(dots)
    best = adots.max(axis=0)
    ties = adots == best
    share = mag / ties.sum(axis=0)

    ys = np.arange(1, visible_h - 1)
    xs = np.arange(1, visible_w - 1)
    iy0, fy = _bilinear_axis(ys, cell_size)
    ix0, fx = _bilinear_axis(xs, cell_size)
    wy = np.stack([1.0 - fy, fy])  # weight of cells iy0, iy0 + 1
    wx = np.stack([1.0 - fx, fx])
    iy = np.stack([iy0, iy0 + 1])
    ix = np.stack([ix0, ix0 + 1])
    oky = (iy >= 0) & (iy < blocks_y)
    okx = (ix >= 0) & (ix < blocks_x)

    hist = np.zeros((blocks_y, blocks_x, 18))
    flat = hist.reshape(-1)
    for o in range(9):
        vote = np.where(ties[o], share, 0.0)
        if not vote.any():
            continue
        bins = np.where(dots[o] >= 0, o, o + 9)
        for a in range(2):
            for b in range(2):
                m = oky[a][:, None] & okx[b][None, :] & (vote > 0)
                if not m.any():
                    continue
                cy = np.broadcast_to(iy[a][:, None], (ny, nx))[m]
                cx = np.broadcast_to(ix[b][None, :], (ny, nx))[m]
                ww = (wy[a][:, None] * wx[b][None, :])[m] * vote[m]
                idx = (cy * blocks_x + cx) * 18 + bins[m]
                np.add.at(flat, idx, ww)

    energy = np.zeros((blocks_y, blocks_x))
    for u in range(9):
        s = hist[:, :, u] + hist[:, :, u + 9]
        energy += s * s

    out = np.zeros((out_y, out_x, HOG_DIM))
    if out_y == 0 or out_x == 0:
        return out
    block2 = (
        energy[:-1, :-1] + energy[:-1, 1:] + energy[1:, :-1] + energy[1:, 1:]
    )  # block2[i, j] = energy of 2x2 block anchored at (i, j)
    # for center cell (block coords y+1, x+1): down-right, up-right, down-left, up-left
    n_dr = 1.0 / np.sqrt(block2[1:, 1:] + _EPS)
    n_ur = 1.0 / np.sqrt(block2[:-1, 1:] + _EPS)
    n_dl = 1.0 / np.sqrt(block2[1:, :-1] + _EPS)
    n_ul = 1.0 / np.sqrt(block2[:-1, :-1] + _EPS)

    center = hist[1:-1, 1:-1, :]
    t_dr = np.zeros((out_y, out_x))
    t_ur = np.zeros((out_y, out_x))
    t_dl = np.zeros((out_y, out_x))
    t_ul = np.zeros((out_y, out_x))
    for o in range(18):
        v = center[:, :, o]
        h1 = np.minimum(v * n_dr, _CLIP)
        h2 = np.minimum(v * n_ur, _CLIP)
        h3 = np.minimum(v * n_dl, _CLIP)
        h4 = np.minimum(v * n_ul, _CLIP)
        out[:, :, o] = 0.5 * ((h1 + h2) + (h3 + h4))
        t_dr += h1
        t_ur += h2
        t_dl += h3
        t_ul += h4
    for u in range(9):
        v = center[:, :, u] + center[:, :, u + 9]
        h1 = np.minimum(v * n_dr, _CLIP)
        h2 = np.minimum(v * n_ur, _CLIP)
        h3 = np.minimum(v * n_dl, _CLIP)
        h4 = np.minimum(v * n_ul, _CLIP)
        out[:, :, 18 + u] = 0.5 * ((h1 + h2) + (h3 + h4))
    out[:, :, 27] = _TEXTURE_SCALE * t_dr
    out[:, :, 28] = _TEXTURE_SCALE * t_ur
    out[:, :, 29] = _TEXTURE_SCALE * t_dl
    out[:, :, 30] = _TEXTURE_SCALE * t_ul
    return out


def extract_patch(level, loc, shape):
    """Row-major flattened (h, w, D) window anchored at loc; zero outside grid."""
    cells = level.cells if hasattr(level, "cells") else np.asarray(level)
    h, w = shape
    gh, gw = cells.shape[:2]
    y, x = int(loc[0]), int(loc[1])
    if not (0 <= y < gh and 0 <= x < gw):
        raise DataError(f"patch anchor ({y}, {x}) outside grid {gh}x{gw}")
    out = np.zeros((h, w, cells.shape[2]))
    y1, x1 = min(y + h, gh), min(x + w, gw)
    out[: y1 - y, : x1 - x] = cells[y:y1, x:x1]
    return out.ravel()


def correlate_templates(cells, templates, row_chunk=64):
    """Cross-correlate every template with the cell grid (zero padded).

    cells: (H, W, D); templates: (T, th, tw, D).  Returns (T, H, W) responses
    anchored at the template's top-left cell.
    """
    cells = np.ascontiguousarray(cells)
    templates = np.asarray(templates)
    t, th, tw, d = templates.shape
    gh, gw = cells.shape[:2]
    padded = np.zeros((gh + th - 1, gw + tw - 1, d))
    padded[:gh, :gw] = cells
    tmat = templates.reshape(t, -1).T  # (th*tw*D, T)
    out = np.empty((t, gh, gw))
    win = np.lib.stride_tricks.sliding_window_view(padded, (th, tw, d))
    # win shape: (gh, gw, 1, th, tw, d)
    for y0 in range(0, gh, row_chunk):
        y1 = min(y0 + row_chunk, gh)
        block = win[y0:y1, :, 0].reshape((y1 - y0) * gw, th * tw * d)
        out[:, y0:y1, :] = (block @ tmat).T.reshape(t, y1 - y0, gw)
    return out


@dataclass
class FeatureLevel:
    """HOG grid of one (scale, rotation) slice of the pyramid.

    ``fwd`` maps original-image pixel coordinates (x, y) to pixel coordinates
    of the resampled image this grid was computed from; ``inv`` is its inverse.
    """

    cells: np.ndarray
    cell_size: int
    scale: float
    rotation: float
    fwd: np.ndarray
    inv: np.ndarray
    level_index: int = -1
    rotation_index: int = -1

    @property
    def grid_shape(self):
        return self.cells.shape[:2]

    def grid_to_image(self, locs, template_shape):
        """Map grid anchors (y, x) to original-image pixel centers (x, y)."""
        locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
        th, tw = template_shape[:2]
        cs = self.cell_size
        px = (locs[:, 1] + 1.0) * cs + (tw * cs - 1) / 2.0
        py = (locs[:, 0] + 1.0) * cs + (th * cs - 1) / 2.0
        pts = np.stack([px, py, np.ones_like(px)], axis=1)
        return pts @ self.inv.T

    def image_to_grid(self, points, template_shape):
        """Inverse of grid_to_image, rounded to the nearest anchor cell."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        th, tw = template_shape[:2]
        cs = self.cell_size
        lvl = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ self.fwd.T
        x = (lvl[:, 0] - (tw * cs - 1) / 2.0) / cs - 1.0
        y = (lvl[:, 1] - (th * cs - 1) / 2.0) / cs - 1.0
        return np.stack(
            [np.floor(y + 0.5).astype(np.int64), np.floor(x + 0.5).astype(np.int64)],
            axis=1,
        )


@dataclass
class FeaturePyramid:
    levels: list = field(default_factory=list)
    rotations: tuple = (0.0,)
    levels_per_octave: int = 5

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


DEFAULT_ROTATIONS = tuple(float(r) for r in range(-30, 31, 6))


def _resample(image, scale, rotation_deg):
    """Scale then rotate (bilinear, reflected border); returns image + affine."""
    h, w = image.shape[:2]
    sw = max(int(round(w * scale)), 2)
    sh = max(int(round(h * scale)), 2)
    sx = sw / w
    sy = sh / h
    if scale >= 1.0:
        scaled = cv2.resize(image, (sw, sh), interpolation=cv2.INTER_LINEAR)
    else:
        scaled = cv2.resize(image, (sw, sh), interpolation=cv2.INTER_AREA)
    if rotation_deg == 0.0:
        fwd = np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
        return scaled, fwd
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (sw - 1) / 2.0, (sh - 1) / 2.0
    # output bounding box of the rotated rectangle
    ow = int(math.ceil(abs(sw * c) + abs(sh * s)))
    oh = int(math.ceil(abs(sw * s) + abs(sh * c)))
    ox, oy = (ow - 1) / 2.0, (oh - 1) / 2.0
    rot = np.array(
        [
            [c, -s, ox - c * cx + s * cy],
            [s, c, oy - s * cx - c * cy],
        ]
    )
    rotated = cv2.warpAffine(
        scaled,
        rot,
        (ow, oh),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT,
    )
    fwd = np.array(
        [
            [rot[0, 0] * sx, rot[0, 1] * sy, rot[0, 2]],
            [rot[1, 0] * sx, rot[1, 1] * sy, rot[1, 2]],
        ]
    )
    return rotated, fwd


def _invert_affine(fwd):
    a = np.vstack([fwd, [0.0, 0.0, 1.0]])
    return np.linalg.inv(a)[:2]


def pyramid_scales(image_shape, cell_size, levels_per_octave, min_grid=3):
    """Scales 2 * 2^(-k / levels_per_octave) while the trimmed grid stays usable."""
    h, w = image_shape[:2]
    scales = []
    k = 0
    while True:
        s = 2.0 * 2.0 ** (-k / levels_per_octave)
        grid = min(round(h * s / cell_size), round(w * s / cell_size)) - 2
        if grid < min_grid or min(h * s, w * s) < 2 * cell_size:
            break
        scales.append(s)
        k += 1
    if not scales:
        raise DataError("image too small for any pyramid level")
    return scales


def build_pyramid(
    image,
    cell_size=8,
    levels_per_octave=5,
    rotations=DEFAULT_ROTATIONS,
    min_grid=3,
    workers=1,
):
    """HOG pyramid over scales (with a 2x upsampled base octave) and rotations."""
    image = np.asarray(image, dtype=np.float64)
    scales = pyramid_scales(image.shape, cell_size, levels_per_octave, min_grid)
    jobs = [
        (li, ri, s, float(rot))
        for li, s in enumerate(scales)
        for ri, rot in enumerate(rotations)
    ]

    def make(job):
        li, ri, s, rot = job
        resampled, fwd = _resample(image, s, rot)
        cells = hog(resampled, cell_size)
        return FeatureLevel(
            cells=cells,
            cell_size=cell_size,
            scale=s,
            rotation=rot,
            fwd=fwd,
            inv=_invert_affine(fwd),
            level_index=li,
            rotation_index=ri,
        )

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            levels = list(pool.map(make, jobs))
    else:
        levels = [make(j) for j in jobs]
    return FeaturePyramid(
        levels=levels,
        rotations=tuple(float(r) for r in rotations),
        levels_per_octave=levels_per_octave,
    )
