"""Scratch smoke test: random small model, scoring vs feature vector, infer vs naive."""
import numpy as np

from hpm.model import (
    ModelSpec, ParamLayout, StateSpace, Topology, zero_params,
    assemble_feature_vector, score_configuration, Configuration, NEG_INF,
)
from hpm.inference import infer, infer_naive, gdt_1d, gdt_2d


def random_small_model(rng, n_parts=2, lm_per_part=(2, 1), grid=8, S=2, O=2, V=1,
                       template=(2, 2, 3), neg_inf_prob=0.2):
    parent = tuple([-1] + [rng.integers(0, p) for p in range(1, n_parts)])
    part_of = []
    for p, n in enumerate(lm_per_part):
        part_of += [p] * n
    topo = Topology(parent=parent, part_of=tuple(part_of))
    patterns = []
    for p in range(n_parts):
        nk = lm_per_part[p]
        pats = rng.random((V, O, nk)) < 0.4
        pats[:, 0, :] = False  # pattern 0 all-visible
        patterns.append(pats)
    ss = StateSpace(V, S, O, tuple(patterns))
    params = zero_params(topo, ss, template)
    params.templates[...] = rng.normal(size=params.templates.shape)
    params.lm_springs[...] = rng.normal(size=params.lm_springs.shape) * 0.5
    params.lm_springs[:, :, 2:] = -rng.random(params.lm_springs[:, :, 2:].shape) * 0.5
    params.pp_springs[...] = rng.normal(size=params.pp_springs.shape) * 0.5
    params.pp_springs[:, :, 2:] = -rng.random(params.pp_springs[:, :, 2:].shape) * 0.5
    b = rng.normal(size=params.pp_bias.shape)
    mask = rng.random(params.pp_bias.shape) < neg_inf_prob
    b[mask] = NEG_INF
    b[:, 0, 0, 0, 0] = 0.5  # keep the all-zero assignment feasible
    cross = ~ss.same_viewpoint_mask()
    b[:, cross, :, :] = NEG_INF
    params.pp_bias[...] = b
    params.lm_bias[...] = rng.normal(size=params.lm_bias.shape)
    params.root_offset = float(rng.normal())
    return ModelSpec(topo, ss, 8, template, params)


def random_config(rng, model, grid):
    topo = model.topology
    G = model.state_space.n_states
    O = model.state_space.n_occlusions
    part_loc = rng.integers(0, grid, size=(topo.n_parts, 2))
    part_state = np.stack([rng.integers(0, G, topo.n_parts), rng.integers(0, O, topo.n_parts)], 1)
    lm_loc = rng.integers(0, grid, size=(topo.n_landmarks, 2))
    lm_state = np.array([part_state[topo.part_of[k]] for k in range(topo.n_landmarks)])
    return Configuration(part_loc, part_state, lm_loc, lm_state)


rng = np.random.default_rng(0)

# 1. GDT vs brute
for trial in range(200):
    n = int(rng.integers(1, 60))
    vals = rng.normal(size=n) * 3
    if rng.random() < 0.3:
        vals[rng.random(n) < 0.3] = NEG_INF
    w1 = rng.uniform(-2, 2)
    w2 = rng.uniform(-2, 0) if rng.random() < 0.9 else 0.0
    out, arg = gdt_1d(vals, w1, w2)
    # brute with same contract
    finite = vals > -1e29
    if not finite.any():
        assert np.all(out == NEG_INF) and np.all(arg == 0)
        continue
    P = np.arange(n)[:, None]
    Q = np.arange(n)[None, :]
    D = (P - Q).astype(float)
    M = np.where(finite[None, :], vals[None, :] + w1 * D + w2 * D * D, -np.inf)
    barg = np.argmax(M, axis=1)
    bval = M[np.arange(n), barg]
    assert np.allclose(out, bval, atol=1e-9), (trial, np.abs(out - bval).max())
    assert np.array_equal(arg, barg), (trial, "argmax mismatch")
print("gdt_1d vs brute OK")

# 2. scoring vs feature vector
model = random_small_model(rng)
layout = ParamLayout(model)
w = layout.to_vector(model.params)
grid = 8
cells = rng.normal(size=(grid, grid, 3))
bad = 0
for trial in range(300):
    cfg = random_config(rng, model, grid)
    q = score_configuration(model, cells, cfg)
    if q <= -1e29:
        bad += 1
        try:
            assemble_feature_vector(model, cells, cfg, layout)
            raise AssertionError("expected error")
        except Exception:
            pass
        continue
    psi = assemble_feature_vector(model, cells, cfg, layout)
    q2 = float(psi.dot(w))
    assert abs(q - q2) < 1e-9, (trial, q, q2)
print(f"w.psi == Q OK ({bad} -inf configs skipped)")

# 3. param vector round trip
params2 = layout.from_vector(w, model)
w2 = layout.to_vector(params2)
assert np.array_equal(w, w2)
print("layout round trip OK")

# 4. infer vs naive on random models
mismatch = 0
for trial in range(30):
    m = random_small_model(rng, lm_per_part=(2, 1))
    cells = rng.normal(size=(6, 6, 3))
    for lm in (0.0, 0.5):
        r1 = infer(m, cells, loss_margin=lm)
        r2 = infer_naive(m, cells, loss_margin=lm)
        assert abs(r1.score - r2.score) < 1e-9, (trial, lm, r1.score, r2.score)
        same = (np.array_equal(r1.config.part_loc, r2.config.part_loc)
                and np.array_equal(r1.config.part_state, r2.config.part_state)
                and np.array_equal(r1.config.landmark_loc, r2.config.landmark_loc)
                and np.array_equal(r1.config.landmark_state, r2.config.landmark_state))
        if not same:
            mismatch += 1
            print("CONFIG MISMATCH", trial, lm)
            print(" infer parts", r1.config.part_loc.tolist(), r1.config.part_state.tolist())
            print(" naive parts", r2.config.part_loc.tolist(), r2.config.part_state.tolist())
            print(" infer lms", r1.config.landmark_loc.tolist())
            print(" naive lms", r2.config.landmark_loc.tolist())
        # rescoring: plain score of config should equal score when lm == 0
        if lm == 0.0:
            q = score_configuration(m, cells, r1.config)
            assert abs(q - r1.score) < 1e-6, (q, r1.score)
        # root map agreement
        assert np.allclose(r1.root_map, r2.root_map, atol=1e-9)
print("infer vs naive:", "OK" if mismatch == 0 else f"{mismatch} MISMATCHES")
