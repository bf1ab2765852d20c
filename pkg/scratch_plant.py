"""Scratch: hand-built true model on planted data; isolates detection machinery."""
import os
import numpy as np

from hpm.detection import detect
from hpm.features import hog, FeatureLevel
from hpm.model import ModelSpec, zero_params
from hpm.synthetic import PlantedWorld, render_face_image, planted_trivial_state_space, _render_patch, _background
from hpm.training import SPRING_EPS

world = PlantedWorld()
topo = world.topology
ss = planted_trivial_state_space(world)   # V=2, S=1, O=2
CELL = 4
T = 5
model = ModelSpec(topo, ss, CELL, (T, T, 31), zero_params(topo, ss, (T, T, 31)))

# Build templates: render each landmark's patch alone on a neutral canvas, take
# the 5x5 cell HOG block centered on it.
for v in range(2):
    layout = world.layouts[v]
    for k in range(12):
        canvas = np.full((96, 96), 0.45)
        cx = cy = 48.0
        _render_patch(canvas, cx, cy, world.angles[k], world.patch_radius, world.grating_period)
        cells = hog(canvas, CELL)
        # anchor so template centers on (cx, cy): center_px = (x+1)*cell + (T*cell-1)/2
        ax = int(round((cx - (T * CELL - 1) / 2.0) / CELL - 1))
        ay = int(round((cy - (T * CELL - 1) / 2.0) / CELL - 1))
        tmpl = cells[ay:ay + T, ax:ax + T, :].copy()
        g = v  # S=1 so g == viewpoint
        model.params.templates[k, g] = tmpl * 3.0

# Springs: peak at true offset (parent centroid - landmark), in cells.
for v in range(2):
    layout = world.layouts[v]
    for p in range(topo.n_parts):
        members = topo.landmarks_of(p)
        centroid = layout[members].mean(axis=0)
        for k in members:
            d = (centroid - layout[k]) / CELL  # (dx, dy) parent - child
            w2 = -0.5
            model.params.lm_springs[k, v] = (-2 * w2 * d[0], -2 * w2 * d[1], w2, w2)
    # part-part springs
    for e, (i, j) in enumerate(topo.part_edges()):
        ci = layout[topo.landmarks_of(i)].mean(axis=0)
        cj = layout[topo.landmarks_of(j)].mean(axis=0)
        d = (ci - cj) / CELL
        w2 = -0.5
        model.params.pp_springs[e, v] = (-2 * w2 * d[0], -2 * w2 * d[1], w2, w2)

# occluded state gets a small bias so it only wins when appearance is absent
model.params.lm_bias[:, :, 1] = 0.1

rng = np.random.default_rng(5)
img, pts, occ, view = render_face_image(world, rng, occlude=False, scale_range=(1.0, 1.0), jitter=0.0)
print("true view:", view, "landmarks[0]:", pts[0])

dets = detect(model, img, threshold=-1e9, levels_per_octave=4, rotations=(0.0,), per_level_cap=20)
print("detections:", len(dets))
for d in dets[:3]:
    err = np.linalg.norm(d.landmarks - pts, axis=1).mean()
    print(f"  score {d.score:.2f} view {d.viewpoint} level {d.level} mean landmark err {err:.2f}px box {tuple(round(v,1) for v in d.box)}")
print("gt box approx:", (pts.min(0).tolist(), pts.max(0).tolist()))

# occluded face
img2, pts2, occ2, view2 = render_face_image(world, rng, occlude=True, scale_range=(1.0, 1.0), jitter=0.0)
dets2 = detect(model, img2, threshold=-1e9, levels_per_octave=4, rotations=(0.0,), per_level_cap=20)
d = dets2[0]
err = np.linalg.norm(d.landmarks - pts2, axis=1).mean()
print(f"occluded face: gt bits {occ2.astype(int)}")
print(f"  top: score {d.score:.2f} view {d.viewpoint} err {err:.2f}px pred bits {d.occluded.astype(int)}")
