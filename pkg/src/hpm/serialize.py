"""Versioned JSON model files with base64 template blocks.

The file is a single structured-text document: a human-inspectable header
(format, version, dimensions), occlusion patterns as 0/1 lists, bias tables as
nested JSON lists in which -inf entries appear symbolically as the string
"-inf", and dense template/spring blocks as little-endian float64 base64.
Round-trips are bit-exact.
"""

import base64
import json

import numpy as np

from .errors import ModelFormatError
from .model import (
    NEG_INF,
    ModelSpec,
    ParamVector,
    StateSpace,
    Topology,
    is_neg_inf,
)

FORMAT_NAME = "hpm-model"
FORMAT_VERSION = 1


def _encode_block(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "dims": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_block(obj, where):
    try:
        dims = tuple(int(d) for d in obj["dims"])
        raw = base64.b64decode(obj["data"].encode("ascii"), validate=True)
    except Exception as exc:
        raise ModelFormatError(f"corrupt array block at {where}: {exc}") from exc
    expected = int(np.prod(dims)) * 8
    if len(raw) != expected:
        raise ModelFormatError(
            f"array block at {where} has {len(raw)} bytes, expected {expected} "
            f"for dims {list(dims)}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def _encode_bias(arr):
    """Nested lists; -inf sentinel entries become the string '-inf'."""

    def conv(a):
        if a.ndim == 1:
            return ["-inf" if is_neg_inf(v) else float(v) for v in a]
        return [conv(sub) for sub in a]

    return {"dims": list(arr.shape), "data": conv(arr)}


def _decode_bias(obj, where):
    dims = tuple(int(d) for d in obj["dims"])
    out = np.empty(dims, dtype=np.float64)
    flat = out.reshape(-1)

    def walk(node, depth, base):
        if depth == len(dims) - 1:
            if len(node) != dims[depth]:
                raise ModelFormatError(f"bias table at {where} has ragged dims")
            for i, v in enumerate(node):
                if v == "-inf":
                    flat[base + i] = NEG_INF
                elif isinstance(v, (int, float)):
                    flat[base + i] = float(v)
                else:
                    raise ModelFormatError(
                        f"bias table at {where} holds non-numeric entry {v!r}"
                    )
            return
        if len(node) != dims[depth]:
            raise ModelFormatError(f"bias table at {where} has ragged dims")
        stride = int(np.prod(dims[depth + 1 :]))
        for i, sub in enumerate(node):
            walk(sub, depth + 1, base + i * stride)

    walk(obj["data"], 0, 0)
    return out


def _component_to_dict(model):
    topo = model.topology
    ss = model.state_space
    return {
        "cell_size": model.cell_size,
        "template_shape": list(model.template_shape),
        "topology": {
            "parent": list(topo.parent),
            "part_of": list(topo.part_of),
            "part_names": list(topo.part_names) if topo.part_names else None,
            "landmark_mirror": list(topo.landmark_mirror)
            if topo.landmark_mirror
            else None,
        },
        "state_space": {
            "viewpoints": ss.n_viewpoints,
            "shapes": ss.n_shapes,
            "occlusion_patterns": ss.n_occlusions,
            "patterns": [
                np.asarray(pat, dtype=int).tolist() for pat in ss.patterns
            ],
        },
        "params": {
            "templates": _encode_block(model.params.templates),
            "lm_springs": _encode_block(model.params.lm_springs),
            "pp_springs": _encode_block(model.params.pp_springs),
            "pp_bias": _encode_bias(model.params.pp_bias),
            "lm_bias": _encode_bias(model.params.lm_bias),
            "root_offset": float(model.params.root_offset),
        },
        "meta": model.meta,
    }


def _component_from_dict(doc, where):
    try:
        topo_doc = doc["topology"]
        ss_doc = doc["state_space"]
        params_doc = doc["params"]
        cell_size = int(doc["cell_size"])
        template_shape = tuple(int(v) for v in doc["template_shape"])
    except KeyError as exc:
        raise ModelFormatError(f"missing key {exc} in {where}") from exc
    topo = Topology(
        parent=tuple(topo_doc["parent"]),
        part_of=tuple(topo_doc["part_of"]),
        part_names=tuple(topo_doc["part_names"]) if topo_doc.get("part_names") else None,
        landmark_mirror=tuple(topo_doc["landmark_mirror"])
        if topo_doc.get("landmark_mirror")
        else None,
    )
    patterns = tuple(
        np.asarray(p, dtype=bool) for p in ss_doc["patterns"]
    )
    ss = StateSpace(
        n_viewpoints=int(ss_doc["viewpoints"]),
        n_shapes=int(ss_doc["shapes"]),
        n_occlusions=int(ss_doc["occlusion_patterns"]),
        patterns=patterns,
    )
    params = ParamVector(
        templates=_decode_block(params_doc["templates"], f"{where}.templates"),
        lm_springs=_decode_block(params_doc["lm_springs"], f"{where}.lm_springs"),
        pp_springs=_decode_block(params_doc["pp_springs"], f"{where}.pp_springs"),
        pp_bias=_decode_bias(params_doc["pp_bias"], f"{where}.pp_bias"),
        lm_bias=_decode_bias(params_doc["lm_bias"], f"{where}.lm_bias"),
        root_offset=float(params_doc["root_offset"]),
    )
    model = ModelSpec(
        topology=topo,
        state_space=ss,
        cell_size=cell_size,
        template_shape=template_shape,
        params=params,
        meta=doc.get("meta", {}),
    )
    _check_dims(model, where)
    return model


def _check_dims(model, where):
    L = model.topology.n_landmarks
    E = max(model.topology.n_parts - 1, 0)
    G = model.state_space.n_states
    O = model.state_space.n_occlusions
    th, tw, d = model.template_shape
    pv = model.params
    checks = [
        ("templates", pv.templates.shape, (L, G, th, tw, d)),
        ("lm_springs", pv.lm_springs.shape, (L, G, 4)),
        ("pp_springs", pv.pp_springs.shape, (E, G, 4)),
        ("pp_bias", pv.pp_bias.shape, (E, G, G, O, O)),
        ("lm_bias", pv.lm_bias.shape, (L, G, O)),
    ]
    for name, got, want in checks:
        if tuple(got) != tuple(want):
            raise ModelFormatError(
                f"dimension mismatch at {where}.{name}: file has {tuple(got)}, "
                f"topology/state space imply {tuple(want)}"
            )
    for part, pat in enumerate(model.state_space.patterns):
        n_k = len(model.topology.landmarks_of(part))
        if pat.shape[2] != n_k:
            raise ModelFormatError(
                f"pattern bitmask of part {part} at {where} has length "
                f"{pat.shape[2]}, part owns {n_k} landmarks"
            )


def save_model(bundle, path):
    """Write a model bundle {'hires': ModelSpec, 'lowres': ModelSpec | None}."""
    if isinstance(bundle, ModelSpec):
        bundle = {"hires": bundle, "lowres": None}
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "components": {
            name: (_component_to_dict(m) if m is not None else None)
            for name, m in bundle.items()
        },
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def load_model(path):
    """Load a model bundle; raises ModelFormatError with a location on damage."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path} is not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path} has format version {doc.get('version')!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    comps = doc.get("components")
    if not isinstance(comps, dict) or "hires" not in comps:
        raise ModelFormatError(f"{path} lacks a 'hires' component")
    bundle = {}
    for name, sub in comps.items():
        bundle[name] = (
            _component_from_dict(sub, f"components.{name}") if sub is not None else None
        )
    return bundle
