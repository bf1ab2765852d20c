"""Margin-scaled structured-SVM learning with hard-negative mining.

Positives are fully clamped by supervision; negatives are mined by
loss-augmented inference over negative-image pyramids.  All negatives found in
one (image, level) window share a single slack variable, and their margin is
scaled down to 1 - m * delta(o) by the fraction of occluded landmarks, so
heavily occluded false positives are penalized less.  The solver is dual
coordinate ascent over the cached constraint set with a per-window simplex cap
realizing the shared slack; squared-displacement spring weights are projected
to stay concave after each solve.
"""

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConvergenceError, DataError
from .features import FeatureLevel, build_pyramid, hog, load_image
from .geometry import Similarity
from .inference import infer
from .model import (
    NEG_INF_THRESHOLD,
    Configuration,
    ModelSpec,
    ParamLayout,
    assemble_feature_vector,
    tie_mirror_parameters,
    zero_params,
)

try:
    import numba as _numba
except Exception:  # pragma: no cover
    _numba = None

SPRING_EPS = 0.01  # quadratic spring coefficients are projected to <= -SPRING_EPS


@dataclass
class TrainingConfig:
    C: float = 0.002
    margin_scale: float = 0.5  # m
    rounds: int = 8
    per_image_cap: int = 10
    tolerance: float = 1e-6
    max_passes: int = 4000
    seed: int = 0
    virtual_positives: int = 8
    canonical_ipd: float = 40.0
    cell_size: int = 8
    template_cells: int = 5
    n_shapes: int = 3
    n_occlusions: int = 4
    levels_per_octave: int = 4
    mining_rotations: tuple = (0.0,)
    train_lowres: bool = False
    lowres_cell_size: int = 4
    lowres_template_cells: int = 7
    workers: int = 1

    def __post_init__(self):
        if self.C <= 0:
            raise DataError("C must be positive")
        if not 0.0 <= self.margin_scale < 1.0:
            raise DataError("margin scale m must lie in [0, 1)")


def delta_occlusion(model, config):
    """Fraction of occluded landmarks of a configuration, in [0, 1]."""
    count = 0
    for k in range(model.n_landmarks):
        g, o = config.landmark_state[k]
        if model.landmark_occluded(k, int(g), int(o)):
            count += 1
    return count / model.n_landmarks


# ---------------------------------------------------------------------------
# Positive feature extraction
# ---------------------------------------------------------------------------


def canonical_level(image, similarity, norm_landmarks, model, margin_cells=3):
    """Warp an image into the canonical frame and compute its feature grid.

    ``similarity`` maps original pixels into the centroid-centered canonical
    frame; the canvas places the landmark bounding box plus a margin at
    positive coordinates so every anchor is interior.
    """
    import cv2

    cs = model.cell_size
    th, tw = model.template_shape[:2]
    pts = np.asarray(norm_landmarks)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad = (max(th, tw) + margin_cells) * cs
    shift = Similarity(1.0, 0.0, pad - x0, pad - y0)
    full = shift.compose(similarity)
    width = int(np.ceil(x1 - x0 + 2 * pad))
    height = int(np.ceil(y1 - y0 + 2 * pad))
    canvas = cv2.warpAffine(
        np.asarray(image, dtype=np.float64),
        full.matrix(),
        (width, height),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REFLECT,
    )
    cells = hog(canvas, cs)
    fwd = full.matrix()
    inv = np.vstack([fwd, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(inv)[:2]
    return FeatureLevel(
        cells=cells,
        cell_size=cs,
        scale=full.scale,
        rotation=np.degrees(full.theta),
        fwd=fwd,
        inv=inv,
    )


def supervised_configuration(model, level, example):
    """Grid configuration clamped by the supervision labels."""
    topo = model.topology
    S = model.state_space.n_shapes
    grid = level.grid_shape
    anchors = level.image_to_grid(
        example.similarity.inverse().apply(example.norm_landmarks),
        model.template_shape,
    )
    anchors[:, 0] = np.clip(anchors[:, 0], 0, grid[0] - 1)
    anchors[:, 1] = np.clip(anchors[:, 1], 0, grid[1] - 1)
    part_loc = np.zeros((topo.n_parts, 2), dtype=np.int64)
    part_state = np.zeros((topo.n_parts, 2), dtype=np.int64)
    lm_state = np.zeros((topo.n_landmarks, 2), dtype=np.int64)
    for p in range(topo.n_parts):
        members = topo.landmarks_of(p)
        mean = anchors[members].mean(axis=0)
        part_loc[p] = (
            min(max(int(np.floor(mean[0] + 0.5)), 0), grid[0] - 1),
            min(max(int(np.floor(mean[1] + 0.5)), 0), grid[1] - 1),
        )
        g = example.viewpoint * S + int(example.part_shape[p])
        part_state[p] = (g, int(example.part_pattern[p]))
    for k in range(topo.n_landmarks):
        lm_state[k] = part_state[topo.part_of[k]]
    return Configuration(part_loc, part_state, anchors.astype(np.int64), lm_state)


def positive_features(model, supervision, image_dir="", image_cache=None, layout=None):
    """Assemble the joint feature row of every supervised (virtual) positive.

    Virtual positives share their source image's canonical feature grid; the
    occlusion labels alone zero out the corresponding appearance blocks.
    """
    if layout is None:
        layout = ParamLayout(model)
    rows = []
    deltas = []
    level_cache = {}
    for ex in supervision.examples:
        key = ex.source_index
        if key not in level_cache:
            path = os.path.join(image_dir, ex.image) if image_dir else ex.image
            if image_cache is not None and path in image_cache:
                image = image_cache[path]
            else:
                image = load_image(path)
                if image_cache is not None:
                    image_cache[path] = image
            level_cache[key] = canonical_level(
                image, ex.similarity, ex.norm_landmarks, model
            )
        level = level_cache[key]
        config = supervised_configuration(model, level, ex)
        rows.append(assemble_feature_vector(model, level, config, layout))
        deltas.append(delta_occlusion(model, config))
    return sparse.vstack(rows, format="csr"), np.asarray(deltas)


# ---------------------------------------------------------------------------
# Negative cache
# ---------------------------------------------------------------------------


@dataclass
class NegativeCache:
    """Mined constraints grouped by (image, level) window with shared slack."""

    rows: list = field(default_factory=list)  # csr rows (1, dim)
    deltas: list = field(default_factory=list)
    windows: list = field(default_factory=list)  # window key per row
    alphas: list = field(default_factory=list)  # dual warm start per row
    signatures: set = field(default_factory=set)

    def __len__(self):
        return len(self.rows)

    def window_index(self):
        keys = {}
        idx = np.zeros(len(self.rows), dtype=np.int64)
        for i, wkey in enumerate(self.windows):
            idx[i] = keys.setdefault(wkey, len(keys))
        return idx, len(keys)

    def add(self, window, psi, delta, signature):
        if signature in self.signatures:
            return False
        self.signatures.add(signature)
        self.rows.append(psi)
        self.deltas.append(delta)
        self.windows.append(window)
        self.alphas.append(0.0)
        return True

    def matrix(self, dim):
        if not self.rows:
            return sparse.csr_matrix((0, dim))
        return sparse.vstack(self.rows, format="csr")

    def prune(self, w, m, slack_margin=1.0):
        """Drop rows with zero dual weight that are far from activity."""
        if not self.rows:
            return 0
        mat = self.matrix(self.rows[0].shape[1])
        scores = mat @ w
        keep = []
        for i in range(len(self.rows)):
            margin = 1.0 - m * self.deltas[i]
            active = self.alphas[i] > 0 or scores[i] + margin > -slack_margin
            if active:
                keep.append(i)
        dropped = len(self.rows) - len(keep)
        if dropped:
            self.rows = [self.rows[i] for i in keep]
            self.deltas = [self.deltas[i] for i in keep]
            self.windows = [self.windows[i] for i in keep]
            self.alphas = [self.alphas[i] for i in keep]
        return dropped


def window_slacks(w, cache, m):
    """Current shared slack per window: max over its rows of the hinge term."""
    slacks = {}
    if not cache.rows:
        return slacks
    mat = cache.matrix(cache.rows[0].shape[1])
    scores = mat @ w
    for i, wkey in enumerate(cache.windows):
        margin = 1.0 - m * cache.deltas[i]
        v = scores[i] + margin
        slacks[wkey] = max(slacks.get(wkey, 0.0), v, 0.0)
    return slacks


def svm_objective(w, positives, cache, C, m):
    """0.5 ||w||^2 + C * (positive hinges + per-window max negative hinges)."""
    obj = 0.5 * float(np.dot(w, w))
    if positives is not None and positives.shape[0]:
        margins = 1.0 - positives @ w
        obj += C * float(np.maximum(margins, 0.0).sum())
    for v in window_slacks(w, cache, m).values():
        obj += C * v
    return obj


# ---------------------------------------------------------------------------
# Dual coordinate ascent solver
# ---------------------------------------------------------------------------


def _cd_passes(indptr, indices, values, signs, margins, norms, window, alpha,
               group_sum, w, C, max_passes, tol):
    last = 0.0
    for sweep in range(max_passes):
        max_viol = 0.0
        for r in range(margins.shape[0]):
            s = 0.0
            for t in range(indptr[r], indptr[r + 1]):
                s += values[t] * w[indices[t]]
            g = margins[r] - signs[r] * s
            a = alpha[r]
            if signs[r] > 0:
                cap = C
            else:
                cap = C - (group_sum[window[r]] - a)
            if g > 0 and a < cap:
                viol = g
            elif g < 0 and a > 0:
                viol = -g
            else:
                viol = 0.0
            if viol > max_viol:
                max_viol = viol
            if norms[r] <= 0.0:
                continue
            na = a + g / norms[r]
            if na < 0.0:
                na = 0.0
            if na > cap:
                na = cap
            d = na - a
            if d != 0.0:
                alpha[r] = na
                if signs[r] < 0:
                    group_sum[window[r]] += d
                yd = signs[r] * d
                for t in range(indptr[r], indptr[r + 1]):
                    w[indices[t]] += yd * values[t]
        last = max_viol
        if max_viol < tol:
            return sweep + 1, last
    return max_passes, last


if _numba is not None:
    _cd_passes = _numba.njit(cache=True)(_cd_passes)


def solve(positives, pos_alphas, cache, C, m, layout, model,
          tolerance=1e-6, max_passes=4000):
    """Minimize the shared-slack SVM objective over the cached constraint set.

    Returns the trained parameter vector with quadratic spring weights
    projected to <= -SPRING_EPS.  Dual variables live in ``pos_alphas`` and
    ``cache.alphas`` and warm-start subsequent calls.
    """
    n_pos = positives.shape[0]
    neg_mat = cache.matrix(layout.dim)
    n_neg = neg_mat.shape[0]
    stacked = sparse.vstack([positives, neg_mat], format="csr") if n_neg else positives.tocsr()
    signs = np.concatenate([np.ones(n_pos), -np.ones(n_neg)])
    margins = np.concatenate(
        [np.ones(n_pos), 1.0 - m * np.asarray(cache.deltas, dtype=np.float64)]
    ) if n_neg else np.ones(n_pos)
    norms = np.asarray(stacked.multiply(stacked).sum(axis=1)).ravel()
    win_idx, n_windows = cache.window_index()
    window = np.concatenate([np.full(n_pos, -1, dtype=np.int64), win_idx]) if n_neg else np.full(n_pos, -1, dtype=np.int64)
    # positives use window id pointing at a dummy slot (their cap is individual)
    window_safe = np.where(window < 0, n_windows, window)
    alpha = np.concatenate([pos_alphas, np.asarray(cache.alphas, dtype=np.float64)]) if n_neg else pos_alphas.copy()
    group_sum = np.zeros(n_windows + 1)
    for i in range(n_neg):
        group_sum[win_idx[i]] += alpha[n_pos + i]

    w = np.zeros(layout.dim)
    w += (alpha[:n_pos] * signs[:n_pos]) @ positives if n_pos else 0.0
    if n_neg:
        w += (alpha[n_pos:] * signs[n_pos:]) @ neg_mat

    sweeps, viol = _cd_passes(
        stacked.indptr.astype(np.int64),
        stacked.indices.astype(np.int64),
        stacked.data.astype(np.float64),
        signs,
        margins,
        norms,
        window_safe,
        alpha,
        group_sum,
        w,
        float(C),
        int(max_passes),
        float(tolerance),
    )
    if viol >= max(tolerance * 100, 1e-3):
        raise ConvergenceError(
            f"dual coordinate ascent stopped after {sweeps} sweeps with "
            f"violation {viol:.3g}",
            objective_trace=[svm_objective(w, positives, cache, C, m)],
        )
    pos_alphas[:] = alpha[:n_pos]
    cache.alphas = list(alpha[n_pos:])

    params = layout.from_vector(w, model)
    params.lm_springs[:, :, 2:] = np.minimum(params.lm_springs[:, :, 2:], -SPRING_EPS)
    if params.pp_springs.size:
        params.pp_springs[:, :, 2:] = np.minimum(params.pp_springs[:, :, 2:], -SPRING_EPS)
    return params


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------


def mine_hard_negatives(
    model,
    image,
    image_key,
    m,
    cap,
    slacks,
    cache,
    layout,
    levels_per_octave=4,
    rotations=(0.0,),
    min_grid=None,
):
    """Loss-augmented inference over a negative image; cache violated configs.

    A configuration violates when its augmented score exceeds -1 plus the
    current slack of its (image, level) window.  Adds at most ``cap`` new
    constraints per window per call; returns the number added.
    """
    if min_grid is None:
        min_grid = max(model.template_shape[:2]) + 1
    pyramid = build_pyramid(
        image,
        cell_size=model.cell_size,
        levels_per_octave=levels_per_octave,
        rotations=rotations,
        min_grid=min_grid,
    )
    added = 0
    for level in pyramid:
        window = (image_key, level.level_index, level.rotation_index)
        eta = slacks.get(window, 0.0)
        res = infer(model, level, loss_margin=m)
        if not res.ok:
            continue
        flat = res.root_map.ravel()
        order = np.argsort(-flat, kind="stable")
        taken = 0
        for pos in order[: cap * 4]:
            v = float(flat[pos])
            if v <= NEG_INF_THRESHOLD or v + 1.0 <= eta + 1e-9:
                break
            y, x = divmod(int(pos), res.root_map.shape[1])
            score, config = res.backtrack(y, x)
            delta = delta_occlusion(model, config)
            sig = hashlib.sha1(
                config.key() + repr(window).encode()
            ).hexdigest()
            psi = assemble_feature_vector(model, level, config, layout)
            if cache.add(window, psi, delta, sig):
                added += 1
                taken += 1
            if taken >= cap:
                break
    return added


# ---------------------------------------------------------------------------
# Full training pipeline
# ---------------------------------------------------------------------------


def build_model_spec(topology, state_space, cfg, lowres=False):
    cell = cfg.lowres_cell_size if lowres else cfg.cell_size
    tcells = cfg.lowres_template_cells if lowres else cfg.template_cells
    template_shape = (tcells, tcells, 31)
    params = zero_params(topology, state_space, template_shape)
    return ModelSpec(
        topology=topology,
        state_space=state_space,
        cell_size=cell,
        template_shape=template_shape,
        params=params,
        meta={},
    )


def train_component(
    model,
    supervision,
    negative_images,
    cfg,
    image_dir="",
    log_path=None,
    checkpoint_dir=None,
):
    """Alternate solve / mine until no new violated constraints or round cap."""
    layout = ParamLayout(model)
    positives, _ = positive_features(model, supervision, image_dir, image_cache={})
    pos_alphas = np.zeros(positives.shape[0])
    cache = NegativeCache()
    m = cfg.margin_scale
    mirrorable = model.topology.landmark_mirror is not None and model.state_space.n_viewpoints > 1
    neg_cache = {}

    log_rows = []
    last_objective = None
    for round_idx in range(cfg.rounds):
        params = solve(
            positives, pos_alphas, cache, cfg.C, m, layout, model,
            tolerance=cfg.tolerance, max_passes=cfg.max_passes,
        )
        model.params = params
        if mirrorable:
            model = tie_mirror_parameters(model)
        w = layout.to_vector(model.params)
        objective = svm_objective(w, positives, cache, cfg.C, m)
        slacks = window_slacks(w, cache, m)
        added = 0
        for key, path in enumerate(negative_images):
            if key not in neg_cache:
                neg_cache[key] = load_image(path) if isinstance(path, str) else path
            added += mine_hard_negatives(
                model, neg_cache[key], key, m, cfg.per_image_cap, slacks,
                cache, layout,
                levels_per_octave=cfg.levels_per_octave,
                rotations=cfg.mining_rotations,
            )
        pruned = cache.prune(w, m)
        log_rows.append(
            {
                "round": round_idx,
                "objective": objective,
                "constraints": len(cache),
                "new_violations": added,
                "pruned": pruned,
            }
        )
        if checkpoint_dir:
            from .serialize import save_model

            os.makedirs(checkpoint_dir, exist_ok=True)
            save_model(model, os.path.join(checkpoint_dir, f"round_{round_idx:02d}.json"))
        last_objective = objective
        if added == 0:
            break

    if log_path:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["round", "objective", "constraints", "new_violations", "pruned"]
            )
            writer.writeheader()
            writer.writerows(log_rows)
    model.meta["final_objective"] = last_objective
    model.meta["rounds_run"] = len(log_rows)
    return model, log_rows


def derive_lowres_supervision(supervision, groups, scale=0.5):
    """Half-resolution supervision: one pseudo-landmark per landmark group.

    The pseudo-landmark sits at the group centroid; it is occluded when more
    than half of its member landmarks are.  Patterns are the fixed pair
    (visible, occluded) per part.
    """
    from .supervision import SupervisionResult, SupervisedExample
    from .model import StateSpace

    V = supervision.state_space.n_viewpoints
    n_parts = len(groups)
    patterns = []
    for _ in range(n_parts):
        pat = np.zeros((V, 2, 1), dtype=bool)
        pat[:, 1, 0] = True
        patterns.append(pat)
    ss = StateSpace(V, 1, 2, tuple(patterns))
    shrink = Similarity(scale, 0.0, 0.0, 0.0)
    examples = []
    for ex in supervision.examples:
        centroids = np.stack(
            [ex.norm_landmarks[g].mean(axis=0) for g in groups]
        ) * scale
        bits = np.array(
            [np.mean(ex.landmark_occluded[g]) > 0.5 for g in groups]
        )
        examples.append(
            SupervisedExample(
                source_index=ex.source_index,
                image=ex.image,
                viewpoint=ex.viewpoint,
                similarity=shrink.compose(ex.similarity),
                norm_landmarks=centroids,
                part_shape=np.zeros(n_parts, dtype=np.int64),
                part_pattern=bits.astype(np.int64),
                landmark_occluded=bits,
                is_virtual=ex.is_virtual,
            )
        )
    return SupervisionResult(
        examples=examples,
        state_space=ss,
        shape_centers=None,
        references=supervision.references,
        canonical_ipd=supervision.canonical_ipd * scale,
    )


def train(
    faces,
    negative_images,
    refs,
    topology,
    cfg,
    image_dir="",
    out_dir=None,
    lowres_topology=None,
    lowres_groups=None,
):
    """Full pipeline: supervision, model construction, alternated solve/mine.

    Returns (bundle, supervision, logs) where bundle maps component names to
    trained ModelSpec instances.
    """
    from .supervision import build_supervision

    rng = np.random.default_rng(cfg.seed)
    supervision = build_supervision(
        faces,
        refs,
        topology,
        cfg.n_shapes,
        cfg.n_occlusions,
        cfg.canonical_ipd,
        cfg.virtual_positives,
        rng,
    )
    model = build_model_spec(topology, supervision.state_space, cfg)
    log_path = os.path.join(out_dir, "training_log.csv") if out_dir else None
    ckpt = os.path.join(out_dir, "checkpoints") if out_dir else None
    model, logs = train_component(
        model, supervision, negative_images, cfg,
        image_dir=image_dir, log_path=log_path, checkpoint_dir=ckpt,
    )
    bundle = {"hires": model, "lowres": None}
    if cfg.train_lowres:
        if lowres_topology is None or lowres_groups is None:
            raise DataError("low-resolution training needs a topology and groups")
        low_sup = derive_lowres_supervision(supervision, lowres_groups)
        low_model = build_model_spec(lowres_topology, low_sup.state_space, cfg, lowres=True)
        low_log = os.path.join(out_dir, "training_log_lowres.csv") if out_dir else None
        low_model, low_logs = train_component(
            low_model, low_sup, negative_images, cfg,
            image_dir=image_dir, log_path=low_log,
        )
        bundle["lowres"] = low_model
        logs = {"hires": logs, "lowres": low_logs}
    return bundle, supervision, logs
