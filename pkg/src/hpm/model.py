"""Hierarchical part model: structure, parameters, configurations and exact scoring.

The model is a two-layer tree.  Parts form a tree among themselves; each
landmark hangs off its owning part in a star topology.  Every node carries a
grid location, a shape state (local shape crossed with a global viewpoint) and
an occlusion state (an index into its part's occlusion-pattern library).  Only
landmarks have appearance templates.  The score of a full configuration is a
sum of appearance terms, quadratic spring terms and pairwise co-occurrence
biases; hard structural constraints are encoded as -inf bias entries.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

# Sentinel standing in for -inf.  Absorbing under addition of any realistic
# model score (|score| << 1e13) and exactly representable in float64.
NEG_INF = -1.0e30
NEG_INF_THRESHOLD = -1.0e29

# Deformation feature is (dx, dy, dx^2, dy^2) of (parent - child); the dx*dy
# cross term is deliberately excluded.
N_SPRING = 4


def is_neg_inf(x):
    return x <= NEG_INF_THRESHOLD


@dataclass(frozen=True)
class Topology:
    """Tree of parts plus the landmark -> part assignment.

    Parts are numbered so that every part's parent has a smaller id; part 0 is
    the root (parent -1).  Landmarks are numbered 0..n_landmarks-1 globally.
    """

    parent: tuple
    part_of: tuple
    part_names: tuple = None
    landmark_mirror: tuple = None  # self-inverse landmark permutation, optional

    def __post_init__(self):
        if len(self.parent) == 0:
            raise ConfigError("topology needs at least one part")
        if self.parent[0] != -1:
            raise ConfigError("part 0 must be the root (parent -1)")
        for p, q in enumerate(self.parent):
            if p == 0:
                continue
            if not 0 <= q < p:
                raise ConfigError(
                    f"part {p} must have a parent with a smaller id, got {q}"
                )
        for k, p in enumerate(self.part_of):
            if not 0 <= p < len(self.parent):
                raise ConfigError(f"landmark {k} assigned to unknown part {p}")
        if self.landmark_mirror is not None:
            sigma = list(self.landmark_mirror)
            if sorted(sigma) != list(range(len(self.part_of))):
                raise ConfigError("landmark_mirror must be a permutation")
            for k, m in enumerate(sigma):
                if sigma[m] != k:
                    raise ConfigError("landmark_mirror must be self-inverse")

    @property
    def n_parts(self):
        return len(self.parent)

    @property
    def n_landmarks(self):
        return len(self.part_of)

    @property
    def n_nodes(self):
        return self.n_parts + self.n_landmarks

    def children_of(self, part):
        return [p for p, q in enumerate(self.parent) if q == part]

    def landmarks_of(self, part):
        return [k for k, p in enumerate(self.part_of) if p == part]

    def part_edges(self):
        """Part-part edges as (parent, child), ordered by child id."""
        return [(self.parent[p], p) for p in range(1, self.n_parts)]

    def part_mirror(self):
        """Part permutation induced by the landmark mirror table."""
        if self.landmark_mirror is None:
            raise ConfigError("topology has no landmark mirror correspondence table")
        sigma = self.landmark_mirror
        mapping = []
        for p in range(self.n_parts):
            images = {self.part_of[sigma[k]] for k in self.landmarks_of(p)}
            if len(images) != 1:
                raise ConfigError(
                    f"landmarks of part {p} do not mirror onto a single part"
                )
            mapping.append(images.pop())
        if sorted(mapping) != list(range(self.n_parts)):
            raise ConfigError("mirrored parts do not form a permutation")
        return mapping


@dataclass(frozen=True)
class StateSpace:
    """Mixture structure: viewpoints x local shapes, and occlusion patterns.

    A node's shape state g in [0, V*S) decomposes uniquely as
    (viewpoint, local shape) = (g // S, g % S).  ``patterns[p][v, o]`` is the
    boolean occlusion bitmask of pattern o for part p under viewpoint v, over
    that part's landmarks in local order.
    """

    n_viewpoints: int
    n_shapes: int
    n_occlusions: int
    patterns: tuple  # per part: bool ndarray (V, O, n_landmarks_of_part)

    def __post_init__(self):
        if self.n_viewpoints < 1 or self.n_shapes < 1 or self.n_occlusions < 1:
            raise ConfigError("state space dimensions must be positive")
        for p, pat in enumerate(self.patterns):
            if pat.shape[:2] != (self.n_viewpoints, self.n_occlusions):
                raise ConfigError(f"pattern table of part {p} has wrong shape")
            if pat.dtype != np.bool_:
                raise ConfigError(f"pattern table of part {p} must be boolean")

    @property
    def n_states(self):
        return self.n_viewpoints * self.n_shapes

    def viewpoint_of(self, g):
        return g // self.n_shapes

    def local_shape_of(self, g):
        return g % self.n_shapes

    def same_viewpoint_mask(self):
        """Boolean (G, G) mask of (g_i, g_j) pairs sharing a viewpoint."""
        g = np.arange(self.n_states)
        v = g // self.n_shapes
        return v[:, None] == v[None, :]


@dataclass
class ParamVector:
    """All learnable weights plus the structural -inf bias entries.

    Shapes (L landmarks, P parts, E = P - 1 part edges, G = V*S states,
    O occlusion patterns, template (th, tw, D)):

    - templates:   (L, G, th, tw, D)
    - lm_springs:  (L, G, 4)   spring of the (owning part -> landmark) edge
    - pp_springs:  (E, G, 4)   spring of part edge e, indexed by child state
    - pp_bias:     (E, G, G, O, O)  [parent g, child g, parent o, child o];
                   entries mixing viewpoints are structurally -inf
    - lm_bias:     (L, G, O)   diagonal (s_k = s_j, o_k = o_j) entries of the
                   part-landmark bias; off-diagonal entries are implicit -inf
    - root_offset: scalar added once to every configuration score
    """

    templates: np.ndarray
    lm_springs: np.ndarray
    pp_springs: np.ndarray
    pp_bias: np.ndarray
    lm_bias: np.ndarray
    root_offset: float = 0.0

    def copy(self):
        return ParamVector(
            self.templates.copy(),
            self.lm_springs.copy(),
            self.pp_springs.copy(),
            self.pp_bias.copy(),
            self.lm_bias.copy(),
            float(self.root_offset),
        )


def zero_params(topology, state_space, template_shape):
    """Fresh all-zero parameters with structural -inf masks installed."""
    L = topology.n_landmarks
    P = topology.n_parts
    G = state_space.n_states
    O = state_space.n_occlusions
    th, tw, d = template_shape
    pv = ParamVector(
        templates=np.zeros((L, G, th, tw, d)),
        lm_springs=np.zeros((L, G, N_SPRING)),
        pp_springs=np.zeros((max(P - 1, 0), G, N_SPRING)),
        pp_bias=np.zeros((max(P - 1, 0), G, G, O, O)),
        lm_bias=np.zeros((L, G, O)),
        root_offset=0.0,
    )
    cross = ~state_space.same_viewpoint_mask()
    pv.pp_bias[:, cross, :, :] = NEG_INF
    return pv


@dataclass
class ModelSpec:
    """Topology + state space + dimensions + parameters of one component."""

    topology: Topology
    state_space: StateSpace
    cell_size: int
    template_shape: tuple  # (th, tw, D)
    params: ParamVector
    meta: dict = field(default_factory=dict)

    @property
    def n_landmarks(self):
        return self.topology.n_landmarks

    def landmark_occluded(self, k, g, o):
        """Whether landmark k is hidden under shape state g and pattern o."""
        part = self.topology.part_of[k]
        local = self.topology.landmarks_of(part).index(k)
        v = self.state_space.viewpoint_of(g)
        return bool(self.state_space.patterns[part][v, o, local])

    def occlusion_table(self):
        """Bool (L, G, O): landmark occluded under (g, o) of its parent part."""
        L = self.n_landmarks
        G = self.state_space.n_states
        O = self.state_space.n_occlusions
        S = self.state_space.n_shapes
        table = np.zeros((L, G, O), dtype=bool)
        for part in range(self.topology.n_parts):
            pat = self.state_space.patterns[part]
            for local, k in enumerate(self.topology.landmarks_of(part)):
                for g in range(G):
                    table[k, g] = pat[g // S, :, local]
        return table

    def copy(self):
        return ModelSpec(
            self.topology,
            self.state_space,
            self.cell_size,
            self.template_shape,
            self.params.copy(),
            dict(self.meta),
        )


@dataclass
class Configuration:
    """A full hypothesis: per-node locations (y, x), shape and occlusion states."""

    part_loc: np.ndarray  # (P, 2) int, (y, x)
    part_state: np.ndarray  # (P, 2) int, (g, o)
    landmark_loc: np.ndarray  # (L, 2) int
    landmark_state: np.ndarray  # (L, 2) int
    level_index: int = -1
    rotation_index: int = -1

    def copy(self):
        return Configuration(
            self.part_loc.copy(),
            self.part_state.copy(),
            self.landmark_loc.copy(),
            self.landmark_state.copy(),
            self.level_index,
            self.rotation_index,
        )

    def key(self):
        return (
            self.part_loc.tobytes()
            + self.part_state.tobytes()
            + self.landmark_loc.tobytes()
            + self.landmark_state.tobytes()
        )


def deformation_feature(parent_loc, child_loc):
    """psi(l_parent - l_child) = (dx, dy, dx^2, dy^2) in grid cells."""
    dy = float(parent_loc[0] - child_loc[0])
    dx = float(parent_loc[1] - child_loc[1])
    return np.array([dx, dy, dx * dx, dy * dy])


def spring_score(weights, parent_loc, child_loc):
    return float(np.dot(weights, deformation_feature(parent_loc, child_loc)))


def spring_peak_offset(weights):
    """(dy, dx) displacement parent - child maximizing the spring score.

    Degenerate (near-zero) quadratic coefficients give a zero offset; used to
    place occluded landmarks, whose location does not affect the score.
    """
    wdx, wdy, wdxx, wdyy = weights
    dx = -wdx / (2.0 * wdxx) if wdxx < -1e-12 else 0.0
    dy = -wdy / (2.0 * wdyy) if wdyy < -1e-12 else 0.0
    return dy, dx


def occluded_landmark_location(model, k, g, parent_loc, grid_shape):
    """Conventional location for an occluded landmark: clamped spring peak."""
    dy, dx = spring_peak_offset(model.params.lm_springs[k, g])
    y = int(np.floor(parent_loc[0] - dy + 0.5))
    x = int(np.floor(parent_loc[1] - dx + 0.5))
    y = min(max(y, 0), grid_shape[0] - 1)
    x = min(max(x, 0), grid_shape[1] - 1)
    return y, x


def _cells_of(features):
    return features.cells if hasattr(features, "cells") else np.asarray(features)


def _check_location(loc, grid_shape, what):
    y, x = int(loc[0]), int(loc[1])
    if not (0 <= y < grid_shape[0] and 0 <= x < grid_shape[1]):
        raise DataError(f"{what} location ({y}, {x}) outside grid {grid_shape}")


def _patch(cells, loc, template_shape):
    """Template-sized window anchored at ``loc`` (top-left); zero outside grid."""
    th, tw, d = template_shape
    h, w = cells.shape[:2]
    y, x = int(loc[0]), int(loc[1])
    out = np.zeros((th, tw, d))
    y1, x1 = min(y + th, h), min(x + tw, w)
    if y1 > y and x1 > x:
        out[: y1 - y, : x1 - x] = cells[y:y1, x:x1]
    return out


def score_configuration(model, features, config):
    """Exact score of a configuration: unary + spring + bias (+ root offset).

    Occluded landmarks contribute neither appearance nor spring (their score
    block is identically zero); hard-constraint violations and -inf bias
    entries make the result absorbingly -inf.
    """
    cells = _cells_of(features)
    grid = cells.shape[:2]
    topo = model.topology
    pv = model.params
    for p in range(topo.n_parts):
        _check_location(config.part_loc[p], grid, f"part {p}")
    for k in range(topo.n_landmarks):
        _check_location(config.landmark_loc[k], grid, f"landmark {k}")

    total = pv.root_offset
    # part-part edges
    for e, (i, j) in enumerate(topo.part_edges()):
        gi, oi = config.part_state[i]
        gj, oj = config.part_state[j]
        total += pv.pp_bias[e, gi, gj, oi, oj]
        total += spring_score(pv.pp_springs[e, gj], config.part_loc[i], config.part_loc[j])
    # part-landmark edges
    for k in range(topo.n_landmarks):
        j = topo.part_of[k]
        gj, oj = config.part_state[j]
        gk, ok = config.landmark_state[k]
        if gk != gj or ok != oj:
            total += NEG_INF  # hard mixture-compatibility constraint
            continue
        total += pv.lm_bias[k, gk, ok]
        if model.landmark_occluded(k, gk, ok):
            continue
        total += spring_score(pv.lm_springs[k, gk], config.part_loc[j], config.landmark_loc[k])
        patch = _patch(cells, config.landmark_loc[k], model.template_shape)
        total += float(np.vdot(pv.templates[k, gk], patch))
    return float(total)


class ParamLayout:
    """Flat indexing of the learnable parameters (structural -inf excluded).

    Block order: appearance templates, landmark springs, part springs,
    same-viewpoint part-part bias entries, landmark biases, root offset.
    """

    def __init__(self, model):
        topo = model.topology
        ss = model.state_space
        th, tw, d = model.template_shape
        self.tsize = th * tw * d
        self.L = topo.n_landmarks
        self.E = topo.n_parts - 1
        self.G = ss.n_states
        self.O = ss.n_occlusions
        self.S = ss.n_shapes
        self.V = ss.n_viewpoints
        self.off_templates = 0
        self.off_lm_springs = self.off_templates + self.L * self.G * self.tsize
        self.off_pp_springs = self.off_lm_springs + self.L * self.G * N_SPRING
        self.off_pp_bias = self.off_pp_springs + self.E * self.G * N_SPRING
        # same-view entries only: per edge V * S * S * O * O
        self.pp_bias_per_edge = self.V * self.S * self.S * self.O * self.O
        self.off_lm_bias = self.off_pp_bias + self.E * self.pp_bias_per_edge
        self.off_root = self.off_lm_bias + self.L * self.G * self.O
        self.dim = self.off_root + 1

    def template_slice(self, k, g):
        start = self.off_templates + (k * self.G + g) * self.tsize
        return slice(start, start + self.tsize)

    def lm_spring_slice(self, k, g):
        start = self.off_lm_springs + (k * self.G + g) * N_SPRING
        return slice(start, start + N_SPRING)

    def pp_spring_slice(self, e, g):
        start = self.off_pp_springs + (e * self.G + g) * N_SPRING
        return slice(start, start + N_SPRING)

    def pp_bias_index(self, e, gi, gj, oi, oj):
        v, si = divmod(gi, self.S)
        vj, sj = divmod(gj, self.S)
        if v != vj:
            raise ConfigError("cross-viewpoint bias entries are not parameters")
        idx = ((((e * self.V + v) * self.S + si) * self.S + sj) * self.O + oi) * self.O + oj
        return self.off_pp_bias + idx

    def lm_bias_index(self, k, g, o):
        return self.off_lm_bias + (k * self.G + g) * self.O + o

    def to_vector(self, params):
        w = np.zeros(self.dim)
        if self.L:
            w[self.off_templates : self.off_lm_springs] = params.templates.ravel()
            w[self.off_lm_springs : self.off_pp_springs] = params.lm_springs.ravel()
        if self.E:
            w[self.off_pp_springs : self.off_pp_bias] = params.pp_springs.ravel()
            view = self._same_view_bias_view(params.pp_bias)
            w[self.off_pp_bias : self.off_lm_bias] = view.ravel()
        w[self.off_lm_bias : self.off_root] = params.lm_bias.ravel()
        w[self.off_root] = params.root_offset
        return w

    def from_vector(self, w, model):
        """Write learnable entries of w into a fresh ParamVector for `model`."""
        params = zero_params(model.topology, model.state_space, model.template_shape)
        if self.L:
            params.templates[...] = w[self.off_templates : self.off_lm_springs].reshape(
                params.templates.shape
            )
            params.lm_springs[...] = w[self.off_lm_springs : self.off_pp_springs].reshape(
                params.lm_springs.shape
            )
        if self.E:
            params.pp_springs[...] = w[self.off_pp_springs : self.off_pp_bias].reshape(
                params.pp_springs.shape
            )
            flat = w[self.off_pp_bias : self.off_lm_bias].reshape(
                self.E, self.V, self.S, self.S, self.O, self.O
            )
            for v in range(self.V):
                gs = slice(v * self.S, (v + 1) * self.S)
                params.pp_bias[:, gs, gs, :, :] = flat[:, v]
        params.lm_bias[...] = w[self.off_lm_bias : self.off_root].reshape(
            params.lm_bias.shape
        )
        params.root_offset = float(w[self.off_root])
        return params

    def _same_view_bias_view(self, pp_bias):
        blocks = []
        for v in range(self.V):
            gs = slice(v * self.S, (v + 1) * self.S)
            blocks.append(pp_bias[:, gs, gs, :, :])
        return np.stack(blocks, axis=1)  # (E, V, S, S, O, O)


def assemble_feature_vector(model, features, config, layout=None):
    """Sparse joint feature map Psi with w . Psi == score_configuration.

    Raises DataError for configurations whose score is -inf (no finite
    feature representation exists for structurally forbidden states).
    """
    from scipy import sparse

    cells = _cells_of(features)
    grid = cells.shape[:2]
    if layout is None:
        layout = ParamLayout(model)
    topo = model.topology
    for p in range(topo.n_parts):
        _check_location(config.part_loc[p], grid, f"part {p}")
    for k in range(topo.n_landmarks):
        _check_location(config.landmark_loc[k], grid, f"landmark {k}")
    cols, vals = [], []

    def put(sl_or_idx, value):
        if isinstance(sl_or_idx, slice):
            cols.extend(range(sl_or_idx.start, sl_or_idx.stop))
            vals.extend(np.asarray(value).ravel())
        else:
            cols.append(sl_or_idx)
            vals.append(value)

    for e, (i, j) in enumerate(topo.part_edges()):
        gi, oi = config.part_state[i]
        gj, oj = config.part_state[j]
        if is_neg_inf(model.params.pp_bias[e, gi, gj, oi, oj]):
            raise DataError("configuration hits a -inf bias entry; no feature map")
        put(layout.pp_bias_index(e, gi, gj, oi, oj), 1.0)
        put(
            layout.pp_spring_slice(e, gj),
            deformation_feature(config.part_loc[i], config.part_loc[j]),
        )
    for k in range(topo.n_landmarks):
        j = topo.part_of[k]
        gj, oj = config.part_state[j]
        gk, ok = config.landmark_state[k]
        if gk != gj or ok != oj:
            raise DataError(
                "landmark mixture state differs from its part; no feature map"
            )
        put(layout.lm_bias_index(k, gk, ok), 1.0)
        if model.landmark_occluded(k, gk, ok):
            continue  # appearance and spring blocks stay exactly zero
        put(
            layout.lm_spring_slice(k, gk),
            deformation_feature(config.part_loc[j], config.landmark_loc[k]),
        )
        put(layout.template_slice(k, gk), _patch(cells, config.landmark_loc[k], model.template_shape))
    put(layout.off_root, 1.0)

    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    return sparse.csr_matrix(
        (vals, (np.zeros_like(cols), cols)), shape=(1, layout.dim)
    )


# ---------------------------------------------------------------------------
# Mirror tying
# ---------------------------------------------------------------------------


def _hog_mirror_permutation():
    # import here to keep model.py importable without the features module cost
    from .features import HOG_MIRROR_PERMUTATION

    return HOG_MIRROR_PERMUTATION


def flip_template(template, channel_perm):
    """Horizontally flip a (th, tw, D) template, permuting orientation channels."""
    return template[:, ::-1, :][:, :, channel_perm].copy()


def mirror_spring(weights):
    """Spring weights under x-reflection: dx flips sign, squares are even."""
    wdx, wdy, wdxx, wdyy = weights
    return np.array([-wdx, wdy, wdxx, wdyy])


def _mirror_state(g, state_space):
    v, s = divmod(g, state_space.n_shapes)
    return (state_space.n_viewpoints - 1 - v) * state_space.n_shapes + s


def check_mirror_consistency(model):
    """Validate that occlusion patterns are index-aligned across mirror views."""
    topo = model.topology
    ss = model.state_space
    sigma = topo.landmark_mirror
    pi = topo.part_mirror()
    for p in range(topo.n_parts):
        own = topo.landmarks_of(p)
        other = topo.landmarks_of(pi[p])
        # local index of each mirrored landmark inside the mirrored part
        perm = [other.index(sigma[k]) for k in own]
        for v in range(ss.n_viewpoints):
            vm = ss.n_viewpoints - 1 - v
            a = ss.patterns[p][v]
            b = ss.patterns[pi[p]][vm][:, perm]
            if not np.array_equal(a, b):
                raise ConfigError(
                    f"occlusion patterns of part {p} (view {v}) are not mirror "
                    f"images of part {pi[p]} (view {vm}); re-run supervision "
                    "with mirrored pattern construction"
                )


def tie_mirror_parameters(model):
    """Return a model whose left/right viewpoint parameters mirror exactly.

    Each tied pair is replaced by the average of itself and its mirrored
    counterpart, so applying the operation twice changes nothing and data from
    both sides contributes.  Requires a landmark mirror table on the topology.
    """
    topo = model.topology
    ss = model.state_space
    if topo.landmark_mirror is None:
        raise ConfigError("mirror tying needs a landmark correspondence table")
    sigma = topo.landmark_mirror
    pi = topo.part_mirror()
    check_mirror_consistency(model)
    perm = _hog_mirror_permutation()
    src = model.params
    out = src.copy()
    G = ss.n_states

    for k in range(topo.n_landmarks):
        for g in range(G):
            gm = _mirror_state(g, ss)
            a = src.templates[k, g]
            b = flip_template(src.templates[sigma[k], gm], perm)
            out.templates[k, g] = (a + b) / 2.0
            sa = src.lm_springs[k, g]
            sb = mirror_spring(src.lm_springs[sigma[k], gm])
            out.lm_springs[k, g] = (sa + sb) / 2.0
            ba = src.lm_bias[k, g]
            bb = src.lm_bias[sigma[k], gm]
            out.lm_bias[k, g] = (ba + bb) / 2.0

    edges = topo.part_edges()
    edge_index = {edge: e for e, edge in enumerate(edges)}
    for e, (i, j) in enumerate(edges):
        em = edge_index.get((pi[i], pi[j]))
        if em is None:
            raise ConfigError(
                f"part edge ({i}, {j}) has no mirrored edge ({pi[i]}, {pi[j]})"
            )
        for g in range(G):
            gm = _mirror_state(g, ss)
            sa = src.pp_springs[e, g]
            sb = mirror_spring(src.pp_springs[em, gm])
            out.pp_springs[e, g] = (sa + sb) / 2.0
        for gi in range(G):
            for gj in range(G):
                a = src.pp_bias[e, gi, gj]
                b = src.pp_bias[em, _mirror_state(gi, ss), _mirror_state(gj, ss)]
                out.pp_bias[e, gi, gj] = (a + b) / 2.0

    tied = model.copy()
    tied.params = out
    return tied
