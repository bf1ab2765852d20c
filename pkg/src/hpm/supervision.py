"""Derives fully supervised mixture labels from raw landmark annotations.

Pipeline: viewpoint assignment by nearest reference shape under Procrustes
alignment, scale/rotation normalization into a canonical frame, per-part
k-means shape clustering, synthetic quarter-plane occlusion sampling to build
virtual positives, and occlusion-pattern clustering with snapping so every
example's landmark bits equal its part pattern bits exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import Similarity
from .model import StateSpace

# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class AnnotatedFace:
    image: str
    landmarks: np.ndarray  # (L, 2) pixel coordinates (x, y)
    occluded: np.ndarray = None  # optional (L,) bool
    box: tuple = None  # optional (x0, y0, x1, y1)

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise DataError(f"landmarks of {self.image} must be (L, 2)")
        if not np.isfinite(self.landmarks).all():
            raise DataError(f"landmarks of {self.image} contain non-finite values")
        if self.occluded is not None:
            self.occluded = np.asarray(self.occluded, dtype=bool)
            if self.occluded.shape != (len(self.landmarks),):
                raise DataError(f"occlusion flags of {self.image} have wrong length")


def load_manifest(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except Exception as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise DataError(f"manifest {path} lacks an 'images' list")
    faces = []
    for i, item in enumerate(doc["images"]):
        try:
            faces.append(
                AnnotatedFace(
                    image=item["image"],
                    landmarks=np.asarray(item["landmarks"], dtype=np.float64),
                    occluded=item.get("occluded"),
                    box=tuple(item["box"]) if item.get("box") else None,
                )
            )
        except (KeyError, DataError) as exc:
            raise DataError(f"manifest {path} entry {i}: {exc}") from exc
    return faces


def save_manifest(faces, path):
    doc = {
        "images": [
            {
                "image": f.image,
                "landmarks": np.asarray(f.landmarks).tolist(),
                "occluded": np.asarray(f.occluded, dtype=int).tolist()
                if f.occluded is not None
                else None,
                "box": list(f.box) if f.box else None,
            }
            for f in faces
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Procrustes alignment and reference shapes
# ---------------------------------------------------------------------------


def procrustes_align(shape_a, shape_b):
    """Similarity transform T minimizing sum ||T(a_i) - b_i||^2, plus RMS residual.

    Closed form via complex least squares (rotation + scale, no reflection).
    """
    a = np.asarray(shape_a, dtype=np.float64)
    b = np.asarray(shape_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2 or len(a) < 2:
        raise DataError("shapes must be equal (n>=2, 2) point arrays")
    za = a[:, 0] + 1j * a[:, 1]
    zb = b[:, 0] + 1j * b[:, 1]
    ma, mb = za.mean(), zb.mean()
    ca = za - ma
    cb = zb - mb
    denom = np.vdot(ca, ca).real
    if denom < 1e-20:
        raise DataError("degenerate shape: all points coincide")
    coeff = np.vdot(ca, cb) / denom  # vdot conjugates the first argument
    shift = mb - coeff * ma
    sim = Similarity(
        scale=float(abs(coeff)),
        theta=float(np.angle(coeff)),
        tx=float(shift.real),
        ty=float(shift.imag),
    )
    residual = float(np.sqrt(np.mean(np.abs(coeff * za + shift - zb) ** 2)))
    return sim, residual


@dataclass
class ReferenceShapeSet:
    """Viewpoint-labeled canonical shapes, scale-normalized to unit IPD."""

    shapes: np.ndarray  # (V, L, 2)
    eye_right: tuple  # landmark indices whose mean is the right eye center
    eye_left: tuple

    def __post_init__(self):
        self.shapes = np.asarray(self.shapes, dtype=np.float64)
        if self.shapes.ndim != 3:
            raise ConfigError("reference shapes must be (V, L, 2)")

    @property
    def n_viewpoints(self):
        return len(self.shapes)


def interpupillary_distance(landmarks, eye_right, eye_left):
    pts = np.asarray(landmarks, dtype=np.float64)
    r = pts[list(eye_right)].mean(axis=0)
    l = pts[list(eye_left)].mean(axis=0)
    d = float(np.linalg.norm(r - l))
    if d <= 0:
        raise DataError("coincident eye centers: interpupillary distance is zero")
    return d


def normalize_reference(shape, eye_right, eye_left):
    shape = np.asarray(shape, dtype=np.float64)
    ipd = interpupillary_distance(shape, eye_right, eye_left)
    out = shape / ipd
    return out - out.mean(axis=0)


def synthetic_reference_shapes(n_viewpoints, eye_right=None, eye_left=None):
    """Default reference set: yaw-warped mean face, 15 degrees per viewpoint."""
    from .face import LEFT_EYE_LANDMARKS, RIGHT_EYE_LANDMARKS, mean_face_shape, yaw_warp

    eye_right = tuple(eye_right or RIGHT_EYE_LANDMARKS)
    eye_left = tuple(eye_left or LEFT_EYE_LANDMARKS)
    base = mean_face_shape()
    shapes = []
    for v in range(n_viewpoints):
        yaw = (v - (n_viewpoints - 1) / 2.0) * 15.0
        shapes.append(normalize_reference(yaw_warp(base, yaw), eye_right, eye_left))
    return ReferenceShapeSet(np.stack(shapes), eye_right, eye_left)


def assign_viewpoint(landmarks, refs):
    """Viewpoint of the reference with minimum Procrustes residual (ties: lowest id)."""
    best = None
    for v in range(refs.n_viewpoints):
        sim, resid = procrustes_align(landmarks, refs.shapes[v])
        if best is None or resid < best[1]:
            best = (v, resid, sim)
    return best[0], best[2], best[1]


def normalize_example(landmarks, refs, canonical_ipd):
    """Map landmarks into the canonical frame of their nearest reference.

    The canonical frame is the (unit-IPD) reference frame scaled by
    ``canonical_ipd``, re-centered on the shape centroid; the returned
    similarity maps original image pixels into that frame.
    """
    v, sim, resid = assign_viewpoint(landmarks, refs)
    scaled = Similarity(canonical_ipd, 0.0, 0.0, 0.0).compose(sim)
    pts = scaled.apply(landmarks)
    centroid = pts.mean(axis=0)
    final = Similarity(1.0, 0.0, -centroid[0], -centroid[1]).compose(scaled)
    return v, final, final.apply(landmarks), resid


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def kmeans(points, k, rng, max_iter=100):
    """Plain k-means with k-means++ seeding; deterministic given the rng.

    Ties in assignment go to the lowest center index; an emptied cluster is
    reseeded at the point farthest from its assigned center.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < k:
        raise DataError(f"k-means needs at least {k} points, got {n}")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(n))]
        else:
            centers[j] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    assign = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), new_assign]))
                centers[j] = x[far]
                new_assign[far] = j
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
    return centers, assign


# ---------------------------------------------------------------------------
# Shape clustering
# ---------------------------------------------------------------------------


def _mirror_center(center, local_perm):
    pts = center.reshape(-1, 2)[local_perm]
    return np.stack([-pts[:, 0], pts[:, 1]], axis=1).reshape(-1)


def cluster_part_shapes(norm_shapes, viewpoints, topology, n_shapes, n_viewpoints, rng):
    """Per (viewpoint, part) k-means of centroid-subtracted landmark layouts.

    Returns (centers[v][p] -> (S, 2*n_k), assignment (N, P) of local shapes).
    When the topology carries a mirror table, right-side viewpoint centers are
    constructed as mirror images of their left-side counterparts so that shape
    indices correspond across mirrored views.
    """
    shapes = np.asarray(norm_shapes, dtype=np.float64)
    viewpoints = np.asarray(viewpoints)
    n = len(shapes)
    P = topology.n_parts
    assignment = np.zeros((n, P), dtype=np.int64)
    centers = [[None] * P for _ in range(n_viewpoints)]
    mirrored = topology.landmark_mirror is not None and n_viewpoints > 1
    pi = topology.part_mirror() if mirrored else None
    sigma = topology.landmark_mirror if mirrored else None
    half = (n_viewpoints + 1) // 2  # views [0, half) clustered, rest mirrored

    def part_vectors(sel, p):
        members = topology.landmarks_of(p)
        pts = shapes[np.ix_(np.flatnonzero(sel), members)]
        pts = pts - pts.mean(axis=1, keepdims=True)
        return pts.reshape(len(pts), -1)

    def local_mirror_perm(p):
        members = topology.landmarks_of(p)
        other = topology.landmarks_of(pi[p])
        return [other.index(sigma[k]) for k in members]

    for v in range(n_viewpoints if not mirrored else half):
        sel = viewpoints == v
        vm = n_viewpoints - 1 - v
        pool_mirror = mirrored and vm != v
        sel_m = (viewpoints == vm) if pool_mirror else np.zeros(n, dtype=bool)
        count = int(sel.sum()) + int(sel_m.sum())
        for p in range(P):
            if count < n_shapes:
                raise DataError(
                    f"viewpoint {v} has {count} examples, fewer than S={n_shapes}; "
                    "lower the shape mixture count or add data"
                )
            vecs = part_vectors(sel, p)
            if pool_mirror and sel_m.any():
                # mirrored examples of the mirror view contribute symmetrically
                mv = part_vectors(sel_m, pi[p])
                perm = local_mirror_perm(p)
                mv = np.stack([_mirror_center(row, perm) for row in mv])
                vecs = np.concatenate([vecs, mv], axis=0)
            c, a = kmeans(vecs, n_shapes, rng)
            centers[v][p] = c
            assignment[sel, p] = a[: int(sel.sum())]

    if mirrored:
        for v in range(half, n_viewpoints):
            vm = n_viewpoints - 1 - v
            for p in range(P):
                src_part = pi[p]
                members = topology.landmarks_of(p)
                other = topology.landmarks_of(src_part)
                local_perm = [other.index(sigma[k]) for k in members]
                centers[v][p] = np.stack(
                    [_mirror_center(c, local_perm) for c in centers[vm][src_part]]
                )
            sel = viewpoints == v
            if not sel.any():
                continue
            for p in range(P):
                vecs = part_vectors(sel, p)
                dist = ((vecs[:, None, :] - centers[v][p][None]) ** 2).sum(axis=2)
                assignment[sel, p] = np.argmin(dist, axis=1)
    return centers, assignment


# ---------------------------------------------------------------------------
# Synthetic occlusion
# ---------------------------------------------------------------------------


def sample_quadrant_occlusion(landmarks, rng):
    """Quarter-plane occluder mask over the landmarks.

    The origin (a, b) is uniform over the tight bounding box; one of the four
    open quadrants is chosen uniformly; a landmark is occluded iff strictly
    inside it (points on a boundary line stay visible).
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    if len(pts) < 1:
        raise DataError("need at least one landmark")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    a = rng.uniform(x0, x1)
    b = rng.uniform(y0, y1)
    quadrant = int(rng.integers(4))
    return quadrant_mask(pts, a, b, quadrant)


def quadrant_mask(points, a, b, quadrant):
    pts = np.asarray(points, dtype=np.float64)
    left = pts[:, 0] < a
    right = pts[:, 0] > a
    up = pts[:, 1] < b
    down = pts[:, 1] > b
    if quadrant == 0:
        return left & up
    if quadrant == 1:
        return right & up
    if quadrant == 2:
        return left & down
    if quadrant == 3:
        return right & down
    raise DataError(f"quadrant must be in 0..3, got {quadrant}")


def generate_virtual_masks(landmarks, count, rng):
    """Sampled coherent occlusion masks for virtual positives (default 8)."""
    return [sample_quadrant_occlusion(landmarks, rng) for _ in range(count)]


# ---------------------------------------------------------------------------
# Occlusion-pattern clustering
# ---------------------------------------------------------------------------


def _pattern_sort_key(pattern):
    return (int(pattern.sum()), pattern.astype(np.uint8).tobytes())


def cluster_occlusion_patterns(masks, k, rng):
    """Cluster binary masks into a k-pattern library; snap masks onto it.

    The all-visible pattern is always forced into the library (replacing the
    nearest center) so unoccluded data is representable; it sits at index 0.
    Returns (patterns (k, n) bool, assignment (M,) int).
    """
    masks = np.asarray(masks, dtype=bool)
    m, n = masks.shape
    distinct = np.unique(masks, axis=0)
    if len(distinct) < k:
        library = [row for row in distinct]
        all_visible = np.zeros(n, dtype=bool)
        all_occluded = np.ones(n, dtype=bool)
        if not any(np.array_equal(r, all_visible) for r in library):
            library.append(all_visible)
        if len(library) < k and not any(np.array_equal(r, all_occluded) for r in library):
            library.append(all_occluded)
        while len(library) < k:
            library.append(all_occluded.copy())
        library = np.stack(library[:k])
    else:
        centers, _ = kmeans(masks.astype(np.float64), k, rng)
        library = centers >= 0.5
    all_visible = np.zeros(n, dtype=bool)
    if not (library == all_visible).all(axis=1).any():
        hamming = (library != all_visible).sum(axis=1)
        library[int(np.argmin(hamming))] = all_visible
    # deterministic order: all-visible first, then by occlusion count / bytes
    rest = [r for r in library if r.any()]
    rest.sort(key=_pattern_sort_key)
    library = np.stack([all_visible] + rest) if rest else library[:1]
    while len(library) < k:
        library = np.vstack([library, library[-1][None]])
    library = library[:k]
    dist = (masks[:, None, :] != library[None, :, :]).sum(axis=2)
    assignment = np.argmin(dist, axis=1)
    return library, assignment


# ---------------------------------------------------------------------------
# Full supervision pipeline
# ---------------------------------------------------------------------------


@dataclass
class SupervisedExample:
    source_index: int
    image: str
    viewpoint: int
    similarity: Similarity  # original image px -> canonical frame
    norm_landmarks: np.ndarray  # (L, 2) canonical-frame coordinates
    part_shape: np.ndarray  # (P,) local shape index
    part_pattern: np.ndarray  # (P,) occlusion pattern index
    landmark_occluded: np.ndarray  # (L,) bool, equal to pattern bits
    is_virtual: bool = False


@dataclass
class SupervisionResult:
    examples: list
    state_space: StateSpace
    shape_centers: list  # centers[v][p]
    references: ReferenceShapeSet
    canonical_ipd: float
    meta: dict = field(default_factory=dict)


def build_supervision(
    faces,
    refs,
    topology,
    n_shapes,
    n_occlusions,
    canonical_ipd,
    virtual_count,
    rng,
):
    """Derive every supervised label and the model state space from raw data."""
    if not faces:
        raise DataError("empty manifest: no annotated faces")
    L = topology.n_landmarks
    for f in faces:
        if len(f.landmarks) != L:
            raise DataError(
                f"{f.image} has {len(f.landmarks)} landmarks, topology wants {L}"
            )
    V = refs.n_viewpoints

    views = np.zeros(len(faces), dtype=np.int64)
    sims = []
    norms = np.zeros((len(faces), L, 2))
    for i, face in enumerate(faces):
        v, sim, pts, _ = normalize_example(face.landmarks, refs, canonical_ipd)
        views[i] = v
        sims.append(sim)
        norms[i] = pts

    centers, shape_assign = cluster_part_shapes(
        norms, views, topology, n_shapes, V, rng
    )

    # original masks (ground truth if provided) plus sampled virtual masks
    records = []  # (source_index, mask, is_virtual)
    for i, face in enumerate(faces):
        base = (
            face.occluded.copy()
            if face.occluded is not None
            else np.zeros(L, dtype=bool)
        )
        records.append((i, base, False))
        for mask in generate_virtual_masks(norms[i], virtual_count, rng):
            records.append((i, mask.copy(), True))

    mirrored = topology.landmark_mirror is not None and V > 1
    sigma = topology.landmark_mirror if mirrored else None
    pi = topology.part_mirror() if mirrored else None
    half = (V + 1) // 2 if mirrored else V

    # cluster per (part, viewpoint); mirrored viewpoints reuse mirrored libraries
    patterns = [np.zeros((V, n_occlusions, len(topology.landmarks_of(p))), dtype=bool)
                for p in range(topology.n_parts)]
    rec_views = np.array([views[src] for src, _, _ in records])
    for v in range(half):
        sel = np.flatnonzero(rec_views == v)
        vm = V - 1 - v
        sel_m = np.flatnonzero(rec_views == vm) if (mirrored and vm != v) else []
        for p in range(topology.n_parts):
            members = topology.landmarks_of(p)
            rows = [records[i][1][members] for i in sel]
            if mirrored and len(sel_m):
                other = topology.landmarks_of(pi[p])
                perm = [other.index(sigma[k]) for k in members]
                rows += [records[i][1][other][perm] for i in sel_m]
            sub = np.stack(rows) if rows else np.zeros((1, len(members)), dtype=bool)
            library, _ = cluster_occlusion_patterns(sub, n_occlusions, rng)
            patterns[p][v] = library
    if mirrored:
        for v in range(half, V):
            vm = V - 1 - v
            for p in range(topology.n_parts):
                src_part = pi[p]
                members = topology.landmarks_of(p)
                other = topology.landmarks_of(src_part)
                local_perm = [other.index(sigma[k]) for k in members]
                patterns[p][v] = patterns[src_part][vm][:, local_perm]

    state_space = StateSpace(V, n_shapes, n_occlusions, tuple(patterns))

    examples = []
    for src, mask, is_virtual in records:
        v = int(views[src])
        part_pattern = np.zeros(topology.n_parts, dtype=np.int64)
        bits = np.zeros(L, dtype=bool)
        for p in range(topology.n_parts):
            members = topology.landmarks_of(p)
            library = patterns[p][v]
            dist = (library != mask[members][None, :]).sum(axis=1)
            idx = int(np.argmin(dist))
            part_pattern[p] = idx
            bits[members] = library[idx]
        examples.append(
            SupervisedExample(
                source_index=src,
                image=faces[src].image,
                viewpoint=v,
                similarity=sims[src],
                norm_landmarks=norms[src].copy(),
                part_shape=shape_assign[src].copy(),
                part_pattern=part_pattern,
                landmark_occluded=bits,
                is_virtual=is_virtual,
            )
        )
    return SupervisionResult(
        examples=examples,
        state_space=state_space,
        shape_centers=centers,
        references=refs,
        canonical_ipd=canonical_ipd,
    )


# ---------------------------------------------------------------------------
# Cache serialization
# ---------------------------------------------------------------------------


def save_supervision(result, path):
    doc = {
        "canonical_ipd": result.canonical_ipd,
        "state_space": {
            "viewpoints": result.state_space.n_viewpoints,
            "shapes": result.state_space.n_shapes,
            "occlusion_patterns": result.state_space.n_occlusions,
            "patterns": [np.asarray(p, dtype=int).tolist() for p in result.state_space.patterns],
        },
        "examples": [
            {
                "source_index": e.source_index,
                "image": e.image,
                "viewpoint": e.viewpoint,
                "similarity": [e.similarity.scale, e.similarity.theta, e.similarity.tx, e.similarity.ty],
                "norm_landmarks": e.norm_landmarks.tolist(),
                "part_shape": e.part_shape.tolist(),
                "part_pattern": e.part_pattern.tolist(),
                "landmark_occluded": e.landmark_occluded.astype(int).tolist(),
                "is_virtual": e.is_virtual,
            }
            for e in result.examples
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_supervision(path, refs=None):
    with open(path) as fh:
        doc = json.load(fh)
    ss = StateSpace(
        n_viewpoints=doc["state_space"]["viewpoints"],
        n_shapes=doc["state_space"]["shapes"],
        n_occlusions=doc["state_space"]["occlusion_patterns"],
        patterns=tuple(np.asarray(p, dtype=bool) for p in doc["state_space"]["patterns"]),
    )
    examples = [
        SupervisedExample(
            source_index=e["source_index"],
            image=e["image"],
            viewpoint=e["viewpoint"],
            similarity=Similarity(*e["similarity"]),
            norm_landmarks=np.asarray(e["norm_landmarks"], dtype=np.float64),
            part_shape=np.asarray(e["part_shape"], dtype=np.int64),
            part_pattern=np.asarray(e["part_pattern"], dtype=np.int64),
            landmark_occluded=np.asarray(e["landmark_occluded"], dtype=bool),
            is_virtual=e["is_virtual"],
        )
        for e in doc["examples"]
    ]
    return SupervisionResult(
        examples=examples,
        state_space=ss,
        shape_centers=None,
        references=refs,
        canonical_ipd=doc["canonical_ipd"],
    )
