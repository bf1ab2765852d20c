"""Default 68-landmark face topology, mean shape and mirror correspondence.

The landmark numbering follows the common 68-point annotation standard: jaw
0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.  Ten parts group the
landmarks; the nose is the root.  All of this is data, not behavior: custom
topologies can be loaded from JSON instead.
"""

import json

import numpy as np

from .errors import ConfigError
from .model import StateSpace, Topology

# mirror pairs under a horizontal flip (self-inverse permutation)
_MIRROR_PAIRS = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 64), (61, 63), (65, 67)]
)

FACE_PART_LANDMARKS = {
    "nose": list(range(27, 36)),
    "right_brow": list(range(17, 22)),
    "left_brow": list(range(22, 27)),
    "right_eye": list(range(36, 42)),
    "left_eye": list(range(42, 48)),
    "upper_lip": list(range(48, 55)) + list(range(60, 65)),
    "lower_lip": list(range(55, 60)) + list(range(65, 68)),
    "chin": list(range(6, 11)),
    "right_jaw": list(range(0, 6)),
    "left_jaw": list(range(11, 17)),
}

_PART_ORDER = (
    "nose",
    "right_brow",
    "left_brow",
    "right_eye",
    "left_eye",
    "upper_lip",
    "lower_lip",
    "chin",
    "right_jaw",
    "left_jaw",
)

_PART_PARENT = {
    "nose": None,
    "right_brow": "nose",
    "left_brow": "nose",
    "right_eye": "nose",
    "left_eye": "nose",
    "upper_lip": "nose",
    "lower_lip": "upper_lip",
    "chin": "lower_lip",
    "right_jaw": "chin",
    "left_jaw": "chin",
}

RIGHT_EYE_LANDMARKS = list(range(36, 42))
LEFT_EYE_LANDMARKS = list(range(42, 48))


def face_landmark_mirror():
    sigma = list(range(68))
    for a, b in _MIRROR_PAIRS:
        sigma[a], sigma[b] = b, a
    return tuple(sigma)


def face_topology():
    """Default face: 68 landmarks grouped into 10 parts, nose-rooted tree."""
    index = {name: i for i, name in enumerate(_PART_ORDER)}
    parent = tuple(
        -1 if _PART_PARENT[name] is None else index[_PART_PARENT[name]]
        for name in _PART_ORDER
    )
    part_of = [None] * 68
    for name, members in FACE_PART_LANDMARKS.items():
        for k in members:
            part_of[k] = index[name]
    return Topology(
        parent=parent,
        part_of=tuple(part_of),
        part_names=_PART_ORDER,
        landmark_mirror=face_landmark_mirror(),
    )


# low-resolution companion: 7 parts, each holding a single template pseudo-landmark
LOWRES_GROUPS = {
    "nose": list(range(27, 36)),
    "right_eye": list(range(36, 42)),
    "left_eye": list(range(42, 48)),
    "mouth": list(range(48, 68)),
    "chin": list(range(6, 11)),
    "right_jaw": list(range(0, 6)),
    "left_jaw": list(range(11, 17)),
}

_LOWRES_ORDER = ("nose", "right_eye", "left_eye", "mouth", "chin", "right_jaw", "left_jaw")
_LOWRES_PARENT = {
    "nose": None,
    "right_eye": "nose",
    "left_eye": "nose",
    "mouth": "nose",
    "chin": "mouth",
    "right_jaw": "chin",
    "left_jaw": "chin",
}
_LOWRES_MIRROR = (0, 2, 1, 3, 4, 6, 5)


def lowres_topology():
    """7-part half-resolution companion topology (one template per part)."""
    index = {name: i for i, name in enumerate(_LOWRES_ORDER)}
    parent = tuple(
        -1 if _LOWRES_PARENT[name] is None else index[_LOWRES_PARENT[name]]
        for name in _LOWRES_ORDER
    )
    return Topology(
        parent=parent,
        part_of=tuple(range(len(_LOWRES_ORDER))),
        part_names=_LOWRES_ORDER,
        landmark_mirror=_LOWRES_MIRROR,
    )


def lowres_group_members():
    return [LOWRES_GROUPS[name] for name in _LOWRES_ORDER]


def mean_face_shape():
    """Synthetic frontal 68-point layout in a unit box, y pointing down."""
    pts = np.zeros((68, 2))
    # jaw: elliptical arc through the chin
    for i in range(17):
        t = np.pi + i * np.pi / 16.0
        pts[i] = (0.5 + 0.38 * np.cos(t), 0.45 - 0.48 * np.sin(t))
    # brows
    for i in range(5):
        t = i / 4.0
        pts[17 + i] = (0.18 + 0.26 * t, 0.26 - 0.03 * np.sin(t * np.pi))
        pts[22 + i] = (0.56 + 0.26 * t, 0.26 - 0.03 * np.sin((1 - t) * np.pi))
    # nose bridge and base
    for i in range(4):
        pts[27 + i] = (0.5, 0.33 + 0.06 * i)
    for i in range(5):
        t = i / 4.0
        pts[31 + i] = (0.42 + 0.16 * t, 0.57 + 0.015 * np.sin(t * np.pi))
    # eyes (hexagons)
    right = [(0.24, 0.36), (0.285, 0.345), (0.35, 0.345), (0.40, 0.36), (0.35, 0.375), (0.285, 0.375)]
    for i, p in enumerate(right):
        pts[36 + i] = p
    left = [(0.60, 0.36), (0.65, 0.345), (0.715, 0.345), (0.76, 0.36), (0.715, 0.375), (0.65, 0.375)]
    for i, p in enumerate(left):
        pts[42 + i] = p
    # mouth, outer then inner ring
    outer = [
        (0.36, 0.72), (0.42, 0.695), (0.46, 0.685), (0.50, 0.69), (0.54, 0.685),
        (0.58, 0.695), (0.64, 0.72), (0.58, 0.755), (0.54, 0.765), (0.50, 0.768),
        (0.46, 0.765), (0.42, 0.755),
    ]
    for i, p in enumerate(outer):
        pts[48 + i] = p
    inner = [
        (0.40, 0.72), (0.46, 0.71), (0.50, 0.712), (0.54, 0.71), (0.60, 0.72),
        (0.54, 0.735), (0.50, 0.738), (0.46, 0.735),
    ]
    for i, p in enumerate(inner):
        pts[60 + i] = p
    return pts


def yaw_warp(shape, yaw_deg, depth_scale=0.22):
    """Approximate out-of-plane yaw by rotating about a vertical axis.

    Landmarks get a synthetic depth that bulges near the face midline (nose),
    giving plausible foreshortening and nose displacement for side views.
    """
    pts = np.asarray(shape, dtype=np.float64)
    cx = pts[:, 0].mean()
    cy = pts[:, 1].mean()
    r2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
    z = depth_scale * np.exp(-r2 / 0.08)
    t = np.radians(yaw_deg)
    x = (pts[:, 0] - cx) * np.cos(t) + z * np.sin(t) + cx
    return np.stack([x, pts[:, 1]], axis=1)


def load_topology(path):
    """Read a topology JSON: {"parent": [...], "part_of": [...], ...}."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return Topology(
            parent=tuple(doc["parent"]),
            part_of=tuple(doc["part_of"]),
            part_names=tuple(doc["part_names"]) if doc.get("part_names") else None,
            landmark_mirror=tuple(doc["landmark_mirror"])
            if doc.get("landmark_mirror")
            else None,
        )
    except KeyError as exc:
        raise ConfigError(f"topology file {path} lacks key {exc}") from exc


def trivial_state_space(topology, n_viewpoints=1, n_shapes=1, n_occlusions=1):
    """State space with all-visible patterns only; useful for tests."""
    patterns = tuple(
        np.zeros((n_viewpoints, n_occlusions, len(topology.landmarks_of(p))), dtype=bool)
        for p in range(topology.n_parts)
    )
    return StateSpace(n_viewpoints, n_shapes, n_occlusions, patterns)
