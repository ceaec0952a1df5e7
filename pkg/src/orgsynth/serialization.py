"""JSON plumbing shared by the on-disk formats."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import OrientedBoundingBox, Pose

FORMAT_VERSION = "1"


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    """Stable JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_default) + "\n"


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_default).encode()).hexdigest()[:16]


def obb_to_dict(obb: OrientedBoundingBox) -> dict:
    return {
        "center": obb.center.tolist(),
        "half_extents": obb.half_extents.tolist(),
        "axes": obb.axes.reshape(-1).tolist(),
        "front": obb.front.tolist(),
        "up_normal": obb.up_normal.tolist(),
    }


def obb_from_dict(d: dict) -> OrientedBoundingBox:
    up = d.get("up_normal", [0.0, 0.0, 1.0])
    return OrientedBoundingBox(d["center"], d["half_extents"], np.reshape(d["axes"], (3, 3)),
                               d["front"], up)


def pose_to_dict(p: Pose) -> dict:
    return {"x": p.x, "y": p.y, "z": p.z, "theta": p.theta, "phi": p.phi}


def pose_from_dict(d: dict) -> Pose:
    return Pose(d["x"], d["y"], d["z"], d["theta"], d["phi"])
