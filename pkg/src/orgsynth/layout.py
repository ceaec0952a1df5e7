"""Mutable-by-copy scene layout: a fixed background plus posed dynamic instances."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .decompose import LabeledInstance
from .geometry import OrientedBoundingBox, PlaneModel, Pose, apply_pose_obb


@dataclass(eq=False)
class LayoutState:
    """Background instances never move; each dynamic instance carries a 5-DOF pose.

    ``binding`` maps target-graph node ids to indices into ``dynamics``.
    Posed boxes are cached per index and invalidated by :meth:`with_pose`.
    """

    floor: LabeledInstance | None
    background: list[LabeledInstance]
    dynamics: list[tuple[LabeledInstance, Pose]]
    binding: dict[int, int] = field(default_factory=dict)
    floor_plane: PlaneModel | None = None
    _obbs: list = field(default=None, repr=False)

    def __post_init__(self):
        if self._obbs is None:
            self._obbs = [None] * len(self.dynamics)
        for _, pose in self.dynamics:
            if not np.all(np.isfinite(pose.as_array())):
                raise ValueError("poses must be finite")

    def __len__(self) -> int:
        return len(self.dynamics)

    def obb(self, i: int) -> OrientedBoundingBox:
        if self._obbs[i] is None:
            inst, pose = self.dynamics[i]
            self._obbs[i] = apply_pose_obb(inst.obb, pose)
        return self._obbs[i]

    def obbs(self) -> list[OrientedBoundingBox]:
        return [self.obb(i) for i in range(len(self.dynamics))]

    def pose(self, i: int) -> Pose:
        return self.dynamics[i][1]

    def poses(self) -> np.ndarray:
        return np.array([p.as_array() for _, p in self.dynamics]).reshape(-1, 5)

    def with_pose(self, i: int, pose: Pose) -> "LayoutState":
        if not np.all(np.isfinite(pose.as_array())):
            raise ValueError("poses must be finite")
        out = copy.copy(self)  # the other poses were validated already
        out.dynamics = list(self.dynamics)
        out.dynamics[i] = (out.dynamics[i][0], pose)
        out._obbs = list(self._obbs)
        out._obbs[i] = None
        return out

    def node_of(self) -> dict[int, int]:
        """dynamics index -> node id (inverse binding)."""
        return {v: k for k, v in self.binding.items()}

    def walls(self) -> list[OrientedBoundingBox]:
        return [b.obb for b in self.background]
