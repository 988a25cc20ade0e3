"""Versioned JSON documents, the JSON-lines dataset format and binary checkpoints.

Every document carries ``"schema": 1`` and a ``"type"`` tag. Flat sequence
layout (frames major, float64): left joints (63), left wrist quaternion (4),
right joints (63), right wrist quaternion (4), object translation (3),
object quaternion (4, w first).
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import hoi
from .conditioning import Action, SubTask
from .objects import AffordanceMap, ObjectModel, Primitive

SCHEMA = 1


class SchemaError(ValueError):
    pass


def _check(d, kind):
    if not isinstance(d, dict):
        raise SchemaError(f"expected a {kind} document")
    if d.get("schema") != SCHEMA:
        raise SchemaError(f"{kind}: unsupported schema version {d.get('schema')!r}")
    if d.get("type") != kind:
        raise SchemaError(f"expected type {kind!r}, got {d.get('type')!r}")
    return d


def dumps(doc):
    """Canonical JSON text: sorted keys, no extra whitespace, trailing newline."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_json(path, doc):
    with open(path, "w") as fh:
        fh.write(dumps(doc))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- documents -----------------------------------------------------------------------


def sequence_to_dict(seq):
    return {"schema": SCHEMA, "type": "HoiSequence", "fps": seq.fps, "n_frames": len(seq),
            "frame_dim": hoi.FRAME_DIM, "data": hoi.flatten(seq).tolist(),
            "active": seq.active.astype(int).tolist()}


def sequence_from_dict(d):
    _check(d, "HoiSequence")
    if d.get("frame_dim") != hoi.FRAME_DIM:
        raise SchemaError(f"frame_dim {d.get('frame_dim')} does not match {hoi.FRAME_DIM}")
    x = np.asarray(d["data"], dtype=float)
    if x.size != d["n_frames"] * hoi.FRAME_DIM:
        raise SchemaError("sequence data length does not match n_frames")
    return hoi.unflatten(x, fps=int(d["fps"]), active=np.asarray(d["active"], dtype=bool))


def object_to_dict(obj):
    return {"schema": SCHEMA, "type": "ObjectModel", "name": obj.name, "kind": obj.kind,
            "primitives": [dict(kind=p.kind, size=list(p.size), part=p.part,
                                translation=list(p.translation), quaternion=list(p.quaternion))
                           for p in obj.primitives],
            "points": obj.points.tolist(), "point_parts": obj.point_parts.tolist(),
            "part_catalog": {str(k): v for k, v in obj.part_catalog.items()}}


def object_from_dict(d):
    _check(d, "ObjectModel")
    prims = [Primitive(p["kind"], tuple(p["size"]), p["part"], tuple(p["translation"]),
                       tuple(p["quaternion"])) for p in d["primitives"]]
    return ObjectModel(prims, np.asarray(d["points"]), np.asarray(d["point_parts"]),
                       {int(k): v for k, v in d["part_catalog"].items()}, d["name"], d["kind"])


def affordance_to_dict(aff):
    return {"schema": SCHEMA, "type": "AffordanceMap", "scores": aff.scores.tolist(),
            "left_region": aff.left_region.tolist(), "right_region": aff.right_region.tolist()}


def affordance_from_dict(d):
    _check(d, "AffordanceMap")
    return AffordanceMap(np.asarray(d["scores"]), np.asarray(d["left_region"], dtype=int),
                         np.asarray(d["right_region"], dtype=int))


def subtask_to_dict(s):
    return {"schema": SCHEMA, "type": "SubTask", "action": s.action.name, "target_part": s.target_part,
            "hands": s.hands, "embedding_id": s.embedding_id, "duration_frames": s.duration_frames}


def subtask_from_dict(d):
    _check(d, "SubTask")
    s = SubTask(Action[d["action"]], d["target_part"], d["hands"], d.get("duration_frames", 150))
    if "embedding_id" in d and d["embedding_id"] != s.embedding_id:
        raise SchemaError("embedding_id does not match (action, hands)")
    return s


def plan_to_dict(plan):
    return {"schema": SCHEMA, "type": "Plan", "source_instruction": plan.source_instruction,
            "subtasks": [subtask_to_dict(s) for s in plan.subtasks],
            "aff_markers": [affordance_to_dict(a) for a in plan.aff_markers]}


def plan_from_dict(d, obj=None):
    """Plan document; ``aff_markers`` may be omitted when ``obj`` is given (grounded here)."""
    from .planner import Plan, ground_affordance

    _check(d, "Plan")
    subs = tuple(subtask_from_dict(s) for s in d["subtasks"])
    if d.get("aff_markers"):
        markers = tuple(affordance_from_dict(a) for a in d["aff_markers"])
    elif obj is not None:
        markers = tuple(ground_affordance(obj, s) for s in subs)
    else:
        raise SchemaError("plan has no affordance markers and no object to ground them")
    return Plan(subs, d.get("source_instruction", ""), markers)


# -- datasets --------------------------------------------------------------------


def objects_sidecar_path(path):
    path = str(path)
    stem = path[:-6] if path.endswith(".jsonl") else path
    return stem + ".objects.json"


def write_dataset(path, dataset, header):
    """JSON-lines file (header line, then one record per line) plus an objects sidecar."""
    from .synth import Dataset  # noqa: F401  (type reference only)

    with open(path, "w") as fh:
        fh.write(dumps({"schema": SCHEMA, "type": "HoiDataset", "n_records": len(dataset), **header}))
        for r in dataset.records:
            fh.write(dumps({"sequence": sequence_to_dict(r.sequence), "object_id": r.object_id,
                            "plan": plan_to_dict(r.plan),
                            "pose0": [list(map(float, r.pose0[0])), list(map(float, r.pose0[1]))]}))
    write_json(objects_sidecar_path(path), {"schema": SCHEMA, "type": "ObjectSet", **header,
                                            "objects": [object_to_dict(o) for o in dataset.objects]})


def read_dataset(path):
    from .synth import Dataset, Record

    side = read_json(objects_sidecar_path(path))
    _check(side, "ObjectSet")
    objects = [object_from_dict(o) for o in side["objects"]]
    records = []
    with open(path) as fh:
        header = _check(json.loads(fh.readline()), "HoiDataset")
        for line in fh:
            r = json.loads(line)
            pose = (np.asarray(r["pose0"][0]), np.asarray(r["pose0"][1]))
            records.append(Record(sequence_from_dict(r["sequence"]), int(r["object_id"]),
                                  plan_from_dict(r["plan"]), pose))
    if len(records) != header["n_records"]:
        raise SchemaError("dataset file is truncated")
    return Dataset(records, objects, header.get("config", {})), header


# -- checkpoints -----------------------------------------------------------------


MAGIC = b"HOIFORGE"


def write_checkpoint(path, header, arrays):
    """``MAGIC | u32 header length | JSON header | float64 arrays`` (little endian).

    The header lists array names and sizes in storage order, so no
    timestamps or zip metadata enter the file.
    """
    names = list(arrays)
    header = dict(header, schema=SCHEMA, type="Checkpoint",
                  arrays=[[n, int(np.asarray(arrays[n]).size)] for n in names])
    blob = dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(blob)) + blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise SchemaError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = _check(json.loads(raw[start:start + n]), "Checkpoint")
    off = start + n
    if off + 8 * sum(size for _, size in header["arrays"]) != len(raw):
        raise SchemaError("checkpoint size does not match its header")
    arrays = {}
    for name, size in header["arrays"]:
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(float)
        off += 8 * size
    return header, arrays
