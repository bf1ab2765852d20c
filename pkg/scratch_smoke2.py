"""Scratch: HOG properties, serialization, supervision units, mirror tying."""
import numpy as np

from hpm.features import hog, HOG_MIRROR_PERMUTATION, extract_patch, correlate_templates, build_pyramid
from hpm.model import tie_mirror_parameters, score_configuration, Configuration, zero_params, ModelSpec, StateSpace, Topology
from hpm.serialize import save_model, load_model
from hpm.supervision import (procrustes_align, synthetic_reference_shapes, assign_viewpoint,
                             sample_quadrant_occlusion, quadrant_mask, cluster_occlusion_patterns, kmeans)
from hpm.geometry import Similarity
from hpm.face import face_topology, mean_face_shape

rng = np.random.default_rng(7)

# HOG: constant image -> ~zero
img = np.full((64, 64), 0.5)
f = hog(img, 8)
assert f.shape == (6, 6, 31), f.shape
assert np.abs(f).max() < 1e-9
print("HOG constant OK, shape", f.shape)

# HOG: flip property
img = rng.random((64, 80))
a = hog(img, 8)
b = hog(img[:, ::-1].copy(), 8)
mapped = a[:, ::-1, :][:, :, HOG_MIRROR_PERMUTATION]
err = np.abs(b - mapped).max()
print("HOG flip max err:", err)
assert err < 1e-9, err

# HOG flip with color
img3 = rng.random((64, 80, 3))
a = hog(img3, 8)
b = hog(img3[:, ::-1].copy(), 8)
mapped = a[:, ::-1, :][:, :, HOG_MIRROR_PERMUTATION]
err = np.abs(b - mapped).max()
print("HOG color flip max err:", err)
assert err < 1e-9, err

# HOG shift covariance: shift by one cell (interior cells only)
img = rng.random((96, 96))
a = hog(img, 8)
b = hog(np.roll(img, 8, axis=1), 8)
err = np.abs(a[:, 1:-2, :] - b[:, 2:-1, :]).max()
print("HOG shift interior err:", err)
assert err < 1e-6

# vertical step edge energy
img = np.zeros((64, 64)); img[:, 32:] = 1.0
f = hog(img, 8)
col = f[:, 2:4, :18]  # cells straddling the edge
# vertical edge -> horizontal gradient -> orientation bin 0 or 9
energy_expected = f[:, :, 0].sum() + f[:, :, 9].sum()
energy_total = f[:, :, :18].sum()
print("vertical edge energy concentration:", energy_expected / max(energy_total, 1e-12))
assert energy_expected / max(energy_total, 1e-12) > 0.95

# pyramid
pyr = build_pyramid(rng.random((100, 120)), cell_size=8, levels_per_octave=3, rotations=(0.0, 6.0))
print("pyramid levels:", len(pyr))
lvl = pyr.levels[0]
locs = np.array([[2, 3], [4, 5]])
px = lvl.grid_to_image(locs, (5, 5))
back = lvl.image_to_grid(px, (5, 5))
assert np.array_equal(back, locs), (locs, back)
rot = [l for l in pyr.levels if l.rotation != 0][0]
px = rot.grid_to_image(locs, (5, 5))
back = rot.image_to_grid(px, (5, 5))
assert np.array_equal(back, locs), (locs, back, "rotated")
print("grid<->image round trip OK (incl rotation)")

# procrustes
A = rng.random((10, 2)) * 5
sim_true = Similarity(2.0, np.radians(30), 1.5, -0.7)
B = sim_true.apply(A)
sim, resid = procrustes_align(A, B)
assert resid < 1e-9, resid
assert np.allclose(sim.apply(A), B, atol=1e-9)
print("procrustes exact recovery OK")

# quadrant masks: coherence + distribution sanity
pts = rng.random((12, 2)) * 100
for _ in range(200):
    m = sample_quadrant_occlusion(pts, rng)
    # must match quadrant_mask for some (a,b,q) by construction; check coherence:
    occ = pts[m]
    vis = pts[~m]
    if m.any() and (~m).any():
        pass  # full verification in tests via support enumeration
print("quadrant sampling runs")

# occlusion pattern clustering
masks = np.array([[0,0,0,0]]*10 + [[1,1,0,0]]*10 + [[0,0,1,1]]*10 + [[1,1,1,1]]*10, dtype=bool)
lib, assign = cluster_occlusion_patterns(masks, 4, rng)
assert not lib[0].any()  # all-visible first
recovered = {tuple(r.astype(int)) for r in lib}
assert recovered == {(0,0,0,0),(1,1,0,0),(0,0,1,1),(1,1,1,1)}, recovered
print("pattern clustering recovers planted patterns; library:", [r.astype(int).tolist() for r in lib])

# viewpoint assignment on synthetic refs
refs = synthetic_reference_shapes(3)
v, sim, resid = assign_viewpoint(refs.shapes[2] * 37.0 + 5.0, refs)
assert v == 2, v
print("viewpoint assignment OK")

# mirror tying on the default face topology
topo = face_topology()
V, S, O = 3, 2, 2
patterns = []
for p in range(topo.n_parts):
    nk = len(topo.landmarks_of(p))
    patterns.append(np.zeros((V, O, nk), dtype=bool))
    patterns[-1][:, 1, :] = True  # pattern 1 = fully occluded (mirror-symmetric)
ss = StateSpace(V, S, O, tuple(patterns))
params = zero_params(topo, ss, (3, 3, 31))
params.templates[...] = rng.normal(size=params.templates.shape)
params.lm_springs[...] = rng.normal(size=params.lm_springs.shape)
params.lm_springs[:, :, 2:] = -np.abs(params.lm_springs[:, :, 2:])
params.pp_springs[...] = rng.normal(size=params.pp_springs.shape)
params.pp_springs[:, :, 2:] = -np.abs(params.pp_springs[:, :, 2:])
params.lm_bias[...] = rng.normal(size=params.lm_bias.shape)
finite = params.pp_bias > -1e29
params.pp_bias[finite] = rng.normal(size=int(finite.sum()))
params.root_offset = 0.25
model = ModelSpec(topo, ss, 8, (3, 3, 31), params)
tied = tie_mirror_parameters(model)
tied2 = tie_mirror_parameters(tied)
assert np.array_equal(tied.params.templates, tied2.params.templates)
assert np.array_equal(tied.params.pp_bias, tied2.params.pp_bias)
assert np.array_equal(tied.params.lm_springs, tied2.params.lm_springs)
print("mirror tying idempotent OK")

# mirror scoring invariance: score left config on I == mirrored config on flip(I)
img = rng.random((80, 80))
cellsA = hog(img, 8)
cellsB = hog(img[:, ::-1].copy(), 8)
W = cellsA.shape[1]
grid = cellsA.shape[:2]
sigma = np.array(topo.landmark_mirror)
pi = topo.part_mirror()
S_loc = ss.n_shapes
def mirror_state(g):
    v, s = divmod(g, S_loc)
    return (V - 1 - v) * S_loc + s
rngc = np.random.default_rng(3)
for trial in range(20):
    v = int(rngc.integers(V)); s = int(rngc.integers(S_loc)); o = int(rngc.integers(O))
    g = v * S_loc + s
    part_loc = np.stack([rngc.integers(1, grid[0]-4, topo.n_parts), rngc.integers(1, W-4, topo.n_parts)], 1)
    lm_loc = np.stack([rngc.integers(1, grid[0]-4, topo.n_landmarks), rngc.integers(1, W-4, topo.n_landmarks)], 1)
    part_state = np.tile([g, o], (topo.n_parts, 1))
    lm_state = np.tile([g, o], (topo.n_landmarks, 1))
    cfg = Configuration(part_loc.copy(), part_state.copy(), lm_loc.copy(), lm_state.copy())
    qa = score_configuration(tied, cellsA, cfg)
    # mirrored configuration on flipped image
    gm = mirror_state(g)
    mp_loc = part_loc.copy(); ml_loc = lm_loc.copy()
    tw = 3
    mp_loc2 = np.zeros_like(part_loc); ml_loc2 = np.zeros_like(lm_loc)
    for p in range(topo.n_parts):
        mp_loc2[pi[p]] = (part_loc[p][0], W - part_loc[p][1] - tw)
    for k in range(topo.n_landmarks):
        ml_loc2[sigma[k]] = (lm_loc[k][0], W - lm_loc[k][1] - tw)
    cfg2 = Configuration(mp_loc2, np.tile([gm, o], (topo.n_parts, 1)), ml_loc2, np.tile([gm, o], (topo.n_landmarks, 1)))
    qb = score_configuration(tied, cellsB, cfg2)
    if abs(qa - qb) > 1e-9:
        print("mirror scoring mismatch", trial, qa, qb)
        break
else:
    print("mirror scoring invariance OK")

# serialization round trip
save_model(model, "/tmp/m1.json")
b1 = load_model("/tmp/m1.json")
save_model(b1, "/tmp/m2.json")
assert open("/tmp/m1.json","rb").read() == open("/tmp/m2.json","rb").read()
m2 = b1["hires"]
assert np.array_equal(m2.params.pp_bias, model.params.pp_bias)
assert np.array_equal(m2.params.templates, model.params.templates)
print("serialization round trip bit-exact OK (with -inf intact)")
