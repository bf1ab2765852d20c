"""Exact max-sum inference over (location, shape, occlusion) on the model tree.

Messages are computed with generalized distance transforms (linear-time
lower-envelope max-convolution with a concave quadratic).  Landmark-to-part
messages skip the transform entirely for channels whose occlusion pattern
hides the landmark (their score is the bias alone); part-to-part messages
compute one transform per child (shape, occlusion) channel and reuse it across
parent shapes, since springs depend only on the child shape.

Tie-breaking everywhere is by smallest (y, x, shape, occlusion) tuple, so the
factored path and the brute-force oracle agree configuration-for-configuration.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GuardError
from .features import correlate_templates
from .model import (
    NEG_INF,
    NEG_INF_THRESHOLD,
    Configuration,
    occluded_landmark_location,
    spring_peak_offset,
)

try:
    import numba as _numba
except Exception:  # pragma: no cover - numba is present in normal installs
    _numba = None


def _envelope_fill(values, w1, w2, out, arg):
    """Lower-envelope max-convolution core; sentinel entries have no support."""
    n = values.shape[0]
    m = 0
    src = np.empty(n, dtype=np.int64)
    for q in range(n):
        if values[q] > NEG_INF_THRESHOLD:
            src[m] = q
            m += 1
    if m == 0:
        for p in range(n):
            out[p] = NEG_INF
            arg[p] = 0
        return

    if w2 == 0.0:
        best = src[0]
        best_v = values[best] - w1 * best
        for i in range(1, m):
            q = src[i]
            v = values[q] - w1 * q
            if v > best_v:
                best_v = v
                best = q
        for p in range(n):
            d = float(p - best)
            out[p] = values[best] + w1 * d
            arg[p] = best
        return

    hull = np.empty(m, dtype=np.int64)
    z = np.empty(m + 1, dtype=np.float64)
    hull[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    for i in range(1, m):
        q2 = float(src[i])
        v2 = values[src[i]]
        s = 0.0
        while True:
            j = hull[k]
            q1 = float(src[j])
            v1 = values[src[j]]
            s = ((v2 - v1) - w1 * (q2 - q1) + w2 * (q2 * q2 - q1 * q1)) / (
                2.0 * w2 * (q2 - q1)
            )
            if k > 0 and s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        hull[k] = i
        z[k] = s
        z[k + 1] = np.inf

    k = 0
    for p in range(n):
        while z[k + 1] < p:  # at p == boundary the left (lower q) parabola keeps it
            k += 1
        q = src[hull[k]]
        d = float(p - q)
        out[p] = values[q] + w1 * d + w2 * (d * d)
        arg[p] = q


def _gdt_2d_fill(grid, wx1, wx2, wy1, wy2, out, arg_y, arg_x):
    """Separable 2D transform: rows (x) first, then columns (y)."""
    h, w = grid.shape
    mid = np.empty((h, w), dtype=np.float64)
    arg_rows = np.empty((h, w), dtype=np.int64)
    row_out = np.empty(w, dtype=np.float64)
    row_arg = np.empty(w, dtype=np.int64)
    for y in range(h):
        _envelope_fill(grid[y], wx1, wx2, row_out, row_arg)
        mid[y] = row_out
        arg_rows[y] = row_arg
    col_out = np.empty(h, dtype=np.float64)
    col_arg = np.empty(h, dtype=np.int64)
    col = np.empty(h, dtype=np.float64)
    for x in range(w):
        for y in range(h):
            col[y] = mid[y, x]
        _envelope_fill(col, wy1, wy2, col_out, col_arg)
        for y in range(h):
            out[y, x] = col_out[y]
            arg_y[y, x] = col_arg[y]
            arg_x[y, x] = arg_rows[col_arg[y], x]


if _numba is not None:
    _envelope_fill = _numba.njit(cache=True)(_envelope_fill)
    _gdt_2d_fill = _numba.njit(cache=True)(_gdt_2d_fill)


def gdt_1d(values, w1, w2):
    """out[p] = max_q values[q] + w1*(p-q) + w2*(p-q)^2, with argmaxes.

    Requires w2 <= 0 (concave quadratic).  Entries at or below the -inf
    sentinel threshold are treated as having no support: they are never
    selected, and if no finite entry exists the output is all-sentinel with
    argmax 0.  Linear time via the lower-envelope parabola algorithm; exact
    value ties go to the lowest q.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise DataError("gdt_1d expects a 1D array")
    if w2 > 0:
        raise DataError(f"quadratic spring coefficient must be <= 0, got {w2}")
    out = np.empty(values.shape[0], dtype=np.float64)
    arg = np.empty(values.shape[0], dtype=np.int64)
    _envelope_fill(values, float(w1), float(w2), out, arg)
    return out, arg


def gdt_2d(grid, wx1, wx2, wy1, wy2):
    """Separable 2D max-convolution; returns (out, arg_y, arg_x).

    Equals the joint 2D maximization because the quadratic has no cross term;
    composed argmax ties resolve to the smallest (y, x).
    """
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError("gdt_2d expects a 2D array")
    if wx2 > 0 or wy2 > 0:
        raise DataError("quadratic spring coefficients must be <= 0")
    h, w = grid.shape
    out = np.empty((h, w), dtype=np.float64)
    arg_y = np.empty((h, w), dtype=np.int64)
    arg_x = np.empty((h, w), dtype=np.int64)
    _gdt_2d_fill(grid, float(wx1), float(wx2), float(wy1), float(wy2), out, arg_y, arg_x)
    return out, arg_y, arg_x


@dataclass
class InferenceStats:
    """Distance-transform accounting for one or more infer calls."""

    landmark_dts: int = 0
    landmark_dts_skipped: int = 0
    part_dts: int = 0


@dataclass
class MessageTable:
    """Score grid per (shape, occlusion) channel plus backtracking pointers.

    scores: (G, O, H, W).  child_y/child_x give the maximizing child location
    per parent state and location; child_g/child_o the maximizing child state
    (None for landmark messages, whose state is pinned to the parent's).
    """

    scores: np.ndarray
    child_y: np.ndarray
    child_x: np.ndarray
    child_g: np.ndarray = None
    child_o: np.ndarray = None


def compute_unary_responses(model, level):
    """Template correlations per landmark and shape state: (L, G, H, W)."""
    cells = level.cells if hasattr(level, "cells") else np.asarray(level)
    L = model.n_landmarks
    G = model.state_space.n_states
    tmpl = model.params.templates.reshape((L * G,) + model.params.templates.shape[2:])
    resp = correlate_templates(cells, tmpl)
    return resp.reshape(L, G, cells.shape[0], cells.shape[1])


def _peak_location_grids(model, k, g, grid_shape):
    """Conventional occluded-landmark location per parent location (row/col)."""
    h, w = grid_shape
    pdy, pdx = spring_peak_offset(model.params.lm_springs[k, g])
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    cy = np.clip(np.floor(ys - pdy + 0.5), 0, h - 1).astype(np.int32)
    cx = np.clip(np.floor(xs - pdx + 0.5), 0, w - 1).astype(np.int32)
    return cy, cx


def message_landmark_to_part(
    model,
    k,
    responses,
    loss_margin=0.0,
    skip_occluded=True,
    stats=None,
):
    """Message from landmark k to its owning part over (l_j, s_j, o_j).

    ``responses`` holds the landmark's unary response per shape state
    (G, H, W).  Channels whose pattern hides k have constant score equal to
    the landmark bias: their transform is skipped (unless ``skip_occluded``
    is disabled, which runs and discards it, for benchmarking the saving).
    With loss_margin m > 0, occluded channels are offset by -m / n_landmarks,
    realizing margin-scaled loss augmentation.
    """
    ss = model.state_space
    G, O = ss.n_states, ss.n_occlusions
    h, w = responses.shape[1:]
    scores = np.empty((G, O, h, w))
    cy = np.empty((G, O, h, w), dtype=np.int32)
    cx = np.empty((G, O, h, w), dtype=np.int32)
    params = model.params
    penalty = loss_margin / model.n_landmarks if loss_margin else 0.0

    for g in range(G):
        wdx, wdy, wdxx, wdyy = params.lm_springs[k, g]
        peak = None
        for o in range(O):
            occluded = model.landmark_occluded(k, g, o)
            if occluded:
                if skip_occluded:
                    if stats is not None:
                        stats.landmark_dts_skipped += 1
                else:
                    gdt_2d(responses[g], wdx, wdxx, wdy, wdyy)  # discarded
                    if stats is not None:
                        stats.landmark_dts += 1
                scores[g, o] = params.lm_bias[k, g, o] - penalty
                if peak is None:
                    peak = _peak_location_grids(model, k, g, (h, w))
                cy[g, o] = peak[0][:, None]
                cx[g, o] = peak[1][None, :]
            else:
                out, ay, ax = gdt_2d(responses[g], wdx, wdxx, wdy, wdyy)
                if stats is not None:
                    stats.landmark_dts += 1
                scores[g, o] = out + params.lm_bias[k, g, o]
                cy[g, o] = ay
                cx[g, o] = ax
    return MessageTable(scores, cy, cx)


def message_part_to_part(model, edge_index, child_scores, stats=None):
    """Message from child part j to its parent i over (l_i, s_i, o_i).

    ``child_scores`` is the summed message stack at j: (G, O, H, W).  Step one
    runs one distance transform per child (s_j, o_j) channel (springs depend
    only on the child shape, so the result is shared by every parent shape);
    step two maximizes over child channels with the edge bias added.
    """
    ss = model.state_space
    G, O = ss.n_states, ss.n_occlusions
    h, w = child_scores.shape[2:]
    params = model.params
    nu = np.empty((G, O, h, w))
    ay = np.zeros((G, O, h, w), dtype=np.int64)
    ax = np.zeros((G, O, h, w), dtype=np.int64)
    for gj in range(G):
        wdx, wdy, wdxx, wdyy = params.pp_springs[edge_index, gj]
        for oj in range(O):
            channel = child_scores[gj, oj]
            if np.all(channel <= NEG_INF_THRESHOLD):
                nu[gj, oj] = NEG_INF
                continue
            nu[gj, oj], ay[gj, oj], ax[gj, oj] = gdt_2d(channel, wdx, wdxx, wdy, wdyy)
            if stats is not None:
                stats.part_dts += 1

    # tie keys: smaller == lexicographically smaller (y, x, g, o) of the child
    keys = (ay * w + ax) * (G * O) + (
        np.arange(G)[:, None, None, None] * O + np.arange(O)[None, :, None, None]
    )
    scores = np.empty((G, O, h, w))
    cy = np.empty((G, O, h, w), dtype=np.int32)
    cx = np.empty((G, O, h, w), dtype=np.int32)
    cg = np.empty((G, O, h, w), dtype=np.int8)
    co = np.empty((G, O, h, w), dtype=np.int8)
    for gi in range(G):
        for oi in range(O):
            best = np.full((h, w), NEG_INF)
            best_key = np.full((h, w), np.iinfo(np.int64).max, dtype=np.int64)
            b_y = np.zeros((h, w), dtype=np.int32)
            b_x = np.zeros((h, w), dtype=np.int32)
            b_g = np.zeros((h, w), dtype=np.int8)
            b_o = np.zeros((h, w), dtype=np.int8)
            for gj in range(G):
                for oj in range(O):
                    bias = params.pp_bias[edge_index, gi, gj, oi, oj]
                    cand = nu[gj, oj] + bias
                    take = (cand > best) | ((cand == best) & (keys[gj, oj] < best_key))
                    if take.any():
                        best = np.where(take, cand, best)
                        best_key = np.where(take, keys[gj, oj], best_key)
                        b_y = np.where(take, ay[gj, oj].astype(np.int32), b_y)
                        b_x = np.where(take, ax[gj, oj].astype(np.int32), b_x)
                        b_g[take] = gj
                        b_o[take] = oj
            scores[gi, oi] = best
            cy[gi, oi] = b_y
            cx[gi, oi] = b_x
            cg[gi, oi] = b_g
            co[gi, oi] = b_o
    return MessageTable(scores, cy, cx, cg, co)


@dataclass
class InferenceResult:
    """Best configuration, per-root-location score map, backtracking handles."""

    score: float
    config: Configuration
    root_map: np.ndarray
    ok: bool = True
    stats: InferenceStats = field(default_factory=InferenceStats)
    _root_total: np.ndarray = None
    _messages: dict = None
    _model: object = None

    def backtrack(self, y, x):
        """Best configuration with the root part at (y, x), and its score."""
        if self._root_total is None:
            raise DataError("this result does not retain backtracking tables")
        return _backtrack_at(self._model, self._messages, self._root_total, int(y), int(x))


def _backtrack_at(model, messages, root_total, y, x):
    topo = model.topology
    h, w = root_total.shape[2:]
    chan = root_total[:, :, y, x]
    g, o = np.unravel_index(int(np.argmax(chan)), chan.shape)  # lowest (g, o) on ties
    score = float(chan[g, o])

    part_loc = np.zeros((topo.n_parts, 2), dtype=np.int64)
    part_state = np.zeros((topo.n_parts, 2), dtype=np.int64)
    lm_loc = np.zeros((topo.n_landmarks, 2), dtype=np.int64)
    lm_state = np.zeros((topo.n_landmarks, 2), dtype=np.int64)
    part_loc[0] = (y, x)
    part_state[0] = (g, o)
    for p in range(1, topo.n_parts):
        parent = topo.parent[p]
        py, px = part_loc[parent]
        gi, oi = part_state[parent]
        msg = messages[("part", p)]
        part_loc[p] = (msg.child_y[gi, oi, py, px], msg.child_x[gi, oi, py, px])
        part_state[p] = (msg.child_g[gi, oi, py, px], msg.child_o[gi, oi, py, px])
    for k in range(topo.n_landmarks):
        j = topo.part_of[k]
        py, px = part_loc[j]
        gj, oj = part_state[j]
        lm_state[k] = (gj, oj)
        msg = messages[("landmark", k)]
        lm_loc[k] = (msg.child_y[gj, oj, py, px], msg.child_x[gj, oj, py, px])
    return score, Configuration(part_loc, part_state, lm_loc, lm_state)


def infer(
    model,
    level,
    loss_margin=0.0,
    responses=None,
    skip_occluded=True,
    stats=None,
):
    """Exact maximization of the (optionally loss-augmented) score.

    With loss_margin m > 0 the returned configuration maximizes
    Q(l, s, o) - m * delta(o), where delta is the fraction of occluded
    landmarks; the augmentation is applied by offsetting every occluded
    landmark's message by m / n_landmarks.
    """
    cells = level.cells if hasattr(level, "cells") else np.asarray(level)
    if loss_margin < 0:
        raise DataError("loss margin must be >= 0")
    h, w = cells.shape[:2]
    if h < 1 or w < 1:
        return InferenceResult(NEG_INF, None, np.zeros((0, 0)), ok=False)
    if stats is None:
        stats = InferenceStats()
    if responses is None:
        responses = compute_unary_responses(model, level)

    topo = model.topology
    ss = model.state_space
    G, O = ss.n_states, ss.n_occlusions
    messages = {}
    root_total = None
    for p in range(topo.n_parts - 1, -1, -1):
        total = np.zeros((G, O, h, w))
        for k in topo.landmarks_of(p):
            msg = message_landmark_to_part(
                model, k, responses[k], loss_margin, skip_occluded, stats
            )
            total += msg.scores
            msg.scores = None  # only the backpointers are needed from here on
            messages[("landmark", k)] = msg
        for c in topo.children_of(p):
            cmsg = messages[("part", c)]
            total += cmsg.scores
            cmsg.scores = None
        if p == 0:
            root_total = total + model.params.root_offset
        else:
            messages[("part", p)] = message_part_to_part(model, p - 1, total, stats)

    root_map = root_total.max(axis=(0, 1))
    flat = int(np.argmax(root_map))  # first max in C order = smallest (y, x)
    by, bx = divmod(flat, w)
    result = InferenceResult(
        score=0.0,
        config=None,
        root_map=root_map,
        stats=stats,
        _root_total=root_total,
        _messages=messages,
        _model=model,
    )
    score, config = result.backtrack(by, bx)
    result.score = score
    result.config = config
    return result


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


def infer_naive(model, level, loss_margin=0.0, max_states=10**8):
    """Exhaustive-enumeration oracle for infer, with identical tie-breaking.

    Enumerates the joint state of all parts as one dense array (axes ordered
    by part id, each part's states flattened in (y, x, shape, occlusion)
    order) and scans every landmark location directly per part state.  Uses
    none of the distance-transform or message-factorization machinery.
    """
    cells = level.cells if hasattr(level, "cells") else np.asarray(level)
    h, w = cells.shape[:2]
    topo = model.topology
    ss = model.state_space
    G, O = ss.n_states, ss.n_occlusions
    n_loc = h * w
    per_part = n_loc * G * O
    total_states = 1
    for _ in range(topo.n_parts):
        total_states *= per_part
        if total_states > max_states:
            raise GuardError(
                f"naive enumeration refused: more than {max_states} joint part states"
            )

    responses = compute_unary_responses(model, level)
    penalty = loss_margin / model.n_landmarks if loss_margin else 0.0

    ys = np.arange(h)
    xs = np.arange(w)
    dyt = (ys[:, None] - ys[None, :]).astype(np.float64)  # parent - child
    dxt = (xs[:, None] - xs[None, :]).astype(np.float64)

    def spring_grids(weights):
        wdx, wdy, wdxx, wdyy = weights
        return wdx * dxt + wdxx * (dxt * dxt), wdy * dyt + wdyy * (dyt * dyt)

    # per-landmark lookup: value (n_loc, G, O) over parent states, argmax loc
    lm_value = np.zeros((topo.n_landmarks, n_loc, G, O))
    lm_arg = np.zeros((topo.n_landmarks, n_loc, G), dtype=np.int64)
    for k in range(topo.n_landmarks):
        for g in range(G):
            fx, fy = spring_grids(model.params.lm_springs[k, g])
            r = responses[k, g]
            cand = (
                fy[:, None, :, None] + fx[None, :, None, :] + r[None, None, :, :]
            ).reshape(n_loc, n_loc)
            best_loc = np.argmax(cand, axis=1)  # first max = smallest (y, x)
            best_val = cand[np.arange(n_loc), best_loc]
            lm_arg[k, :, g] = best_loc
            for o in range(O):
                bias = model.params.lm_bias[k, g, o]
                if model.landmark_occluded(k, g, o):
                    lm_value[k, :, g, o] = bias - penalty
                else:
                    lm_value[k, :, g, o] = best_val + bias

    joint = np.full([per_part] * topo.n_parts, model.params.root_offset)

    def axis_shape(*parts):
        return [per_part if p in parts else 1 for p in range(topo.n_parts)]

    for p in range(topo.n_parts):
        own = np.zeros((n_loc, G, O))
        for k in topo.landmarks_of(p):
            own += lm_value[k]
        joint += own.reshape(axis_shape(p))

    for e, (i, j) in enumerate(topo.part_edges()):
        pair = np.zeros((n_loc, G, O, n_loc, G, O))
        for gj in range(G):
            fx, fy = spring_grids(model.params.pp_springs[e, gj])
            s = (fy[:, None, :, None] + fx[None, :, None, :]).reshape(n_loc, n_loc)
            pair[:, :, :, :, gj, :] += s[:, None, None, :, None]
        bias = model.params.pp_bias[e].transpose(0, 2, 1, 3)  # (gi, oi, gj, oj)
        pair += bias[None, :, :, None, :, :]
        # topology guarantees i < j, so row-major (i-state, j-state) matches axes
        joint += pair.reshape(per_part, per_part).reshape(axis_shape(i, j))

    flat_best = int(np.argmax(joint))
    best_score = float(joint.ravel()[flat_best])
    idx = np.unravel_index(flat_best, joint.shape)

    part_loc = np.zeros((topo.n_parts, 2), dtype=np.int64)
    part_state = np.zeros((topo.n_parts, 2), dtype=np.int64)
    for p in range(topo.n_parts):
        loc_flat, rem = divmod(int(idx[p]), G * O)
        part_state[p] = divmod(rem, O)
        part_loc[p] = divmod(loc_flat, w)

    lm_loc = np.zeros((topo.n_landmarks, 2), dtype=np.int64)
    lm_state = np.zeros((topo.n_landmarks, 2), dtype=np.int64)
    for k in range(topo.n_landmarks):
        j = topo.part_of[k]
        g, o = part_state[j]
        lm_state[k] = (g, o)
        if model.landmark_occluded(k, g, o):
            lm_loc[k] = occluded_landmark_location(
                model, k, g, tuple(part_loc[j]), (h, w)
            )
        else:
            parent_flat = part_loc[j][0] * w + part_loc[j][1]
            lm_loc[k] = divmod(int(lm_arg[k, parent_flat, g]), w)

    config = Configuration(part_loc, part_state, lm_loc, lm_state)
    if topo.n_parts > 1:
        reduced = joint.max(axis=tuple(range(1, topo.n_parts)))
    else:
        reduced = joint
    root_map = reduced.reshape(n_loc, G * O).max(axis=1).reshape(h, w)
    return InferenceResult(best_score, config, root_map)


def save_score_maps(path, result, extra=None):
    """Dump per-root-location score maps as a portable .npz float-grid file."""
    arrays = {"root_map": result.root_map}
    if extra:
        arrays.update(extra)
    np.savez(path, **arrays)
