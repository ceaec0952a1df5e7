"""Point-cloud and oriented-box kernels.

Boxes are stored as a center, positive half extents and three orthonormal
row axes (``axes[0]`` is the principal direction).  Every pairwise query
is exact for convex boxes; Monte Carlo and rasterisation only appear in
the tests as oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

WORLD_UP = np.array([0.0, 0.0, 1.0])
MIN_HALF_EXTENT = 0.01
_EPS = 1e-12


class GeometryError(ValueError):
    pass


class EmptyCloud(GeometryError):
    pass


class DegenerateCloud(GeometryError):
    pass


class TooFewPoints(GeometryError):
    pass


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point coordinates must be finite")
        n = len(self.points)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != n:
                raise GeometryError("colors length mismatch")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise GeometryError("normals length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.points[index],
            None if self.colors is None else self.colors[index],
            None if self.normals is None else self.normals[index],
        )

    @classmethod
    def concat(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        colors = normals = None
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return cls(pts, colors, normals)


@dataclass(eq=False)
class OrientedBoundingBox:
    center: np.ndarray
    half_extents: np.ndarray
    axes: np.ndarray
    front: np.ndarray
    up_normal: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        self.front = np.asarray(self.front, dtype=np.float64).reshape(3)
        self.up_normal = np.asarray(self.up_normal, dtype=np.float64).reshape(3)
        if np.any(self.half_extents <= 0):
            raise GeometryError("half extents must be strictly positive")
        # boxes are values: freeze the arrays so derived quantities can be cached
        for arr in (self.center, self.half_extents, self.axes, self.front, self.up_normal):
            arr.setflags(write=False)
        self._corners = None
        self._footprint = None
        self._flat = None
        self._fp_stats = None

    @classmethod
    def from_extents(cls, center, size, yaw: float = 0.0, front=None, up_normal=None):
        """Gravity-aligned box from full side lengths and a yaw angle.

        ``size`` is (length along the yawed x axis, along the yawed y axis,
        height).  ``front`` defaults to the yawed x axis.
        """
        c, s = math.cos(yaw), math.sin(yaw)
        axes = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        if front is None:
            front = axes[0]
        if up_normal is None:
            up_normal = WORLD_UP
        return cls(center, np.asarray(size, dtype=np.float64) / 2.0, axes, front, up_normal)

    @property
    def principal_axis(self) -> np.ndarray:
        return self.axes[0]

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    @property
    def radius(self) -> float:
        return self.flat()[3]

    def flat(self) -> tuple:
        """(center, half extents, axes rows, radius) as plain floats for scalar kernels."""
        if self._flat is None:
            h = tuple(float(v) for v in self.half_extents)
            self._flat = (
                tuple(float(v) for v in self.center),
                h,
                tuple(tuple(float(v) for v in row) for row in self.axes),
                math.sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2]),
            )
        return self._flat

    def corners(self) -> np.ndarray:
        """(8, 3) corners; bit k of the index selects the sign along axis k."""
        if self._corners is None:
            c = self.center + (_CORNER_SIGNS * self.half_extents) @ self.axes
            c.setflags(write=False)
            self._corners = c
        return self._corners

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.axes.T

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        local = np.abs(self.to_local(points))
        return np.all(local <= self.half_extents + tol, axis=-1)

    def faces(self) -> list[np.ndarray]:
        c = self.corners()
        return [c[idx] for idx in _FACE_INDEX]

    def footprint(self) -> np.ndarray:
        if self._footprint is None:
            f = convex_hull_2d(self.corners()[:, :2])
            f.setflags(write=False)
            self._footprint = f
        return self._footprint

    @property
    def footprint_area(self) -> float:
        return self._footprint_stats()[0]

    def _footprint_stats(self) -> tuple[float, float]:
        """Footprint area and the largest horizontal centre-to-vertex distance."""
        if self._fp_stats is None:
            f = self.footprint()
            r = float(np.sqrt(((f - self.center[:2]) ** 2).sum(axis=1).max())) if len(f) else 0.0
            self._fp_stats = (polygon_area(f), r)
        return self._fp_stats

    def z_range(self) -> tuple[float, float]:
        z = self.corners()[:, 2]
        return float(z.min()), float(z.max())

    def copy(self) -> "OrientedBoundingBox":
        return OrientedBoundingBox(
            self.center.copy(), self.half_extents.copy(), self.axes.copy(),
            self.front.copy(), self.up_normal.copy(),
        )

    def allclose(self, other: "OrientedBoundingBox", atol: float = 1e-9) -> bool:
        return all(
            np.allclose(getattr(self, f), getattr(other, f), atol=atol)
            for f in ("center", "half_extents", "axes", "front", "up_normal")
        )


_CORNER_SIGNS = np.array(
    [[1.0 if (i >> k) & 1 else -1.0 for k in range(3)] for i in range(8)]
)


def _build_face_index():
    faces = []
    for k in range(3):
        u, v = [a for a in range(3) if a != k]
        for bit in (0, 1):
            loop = []
            for su, sv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                loop.append((bit << k) | (su << u) | (sv << v))
            faces.append(loop)
    return np.array(faces)


_FACE_INDEX = _build_face_index()
_EDGE_INDEX = np.array(
    [(i, i | (1 << k)) for i in range(8) for k in range(3) if not (i >> k) & 1]
)


def _wrap_angle(a: float) -> float:
    a = math.remainder(float(a), 2.0 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass(frozen=True)
class Pose:
    """Absolute center position plus yaw/tilt offsets from the source orientation."""

    x: float
    y: float
    z: float
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_angle(self.theta))
        object.__setattr__(self, "phi", _wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta, self.phi])

    @classmethod
    def from_array(cls, v) -> "Pose":
        return cls(*(float(t) for t in v))


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_count: int

    def distance(self, points) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset

    def height_at(self, x: float, y: float) -> float:
        n = self.normal
        if abs(n[2]) < 1e-9:
            raise GeometryError("plane is vertical")
        return float((self.offset - n[0] * x - n[1] * y) / n[2])


class SpatialIndex:
    """Immutable nearest-neighbour index over points keyed by integer ids."""

    def __init__(self, points, ids=None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyCloud("spatial index needs at least one point")
        self._tree = cKDTree(pts)
        self.ids = np.arange(len(pts)) if ids is None else np.asarray(ids)

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, query, k: int):
        return knn(self, query, k)


# ---------------------------------------------------------------------------
# 2D polygon helpers
# ---------------------------------------------------------------------------


def convex_hull_2d(points) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.round(np.asarray(points, dtype=np.float64), 12))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly) -> float:
    poly = np.asarray(poly)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


# ---------------------------------------------------------------------------
# convex polytope clipping
# ---------------------------------------------------------------------------


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product; much cheaper than np.cross for small arrays."""
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def clip_polytope(faces: list[np.ndarray], normal, offset: float) -> list[np.ndarray]:
    """Keep the part of a convex polytope (list of planar faces) with n.x <= offset."""
    normal = np.asarray(normal, dtype=np.float64)
    if not faces:
        return faces
    scale = max(1.0, max(float(np.abs(f).max()) for f in faces))
    tol = 1e-12 * scale
    dists = [f @ normal - offset for f in faces]
    if all(d.max() <= tol for d in dists):
        return faces
    if all(d.min() >= -tol for d in dists):
        return []
    new_faces, caps = [], []
    for poly, d in zip(faces, dists):
        q = np.roll(poly, -1, axis=0)
        dq = np.roll(d, -1)
        inside = d <= tol
        on = inside & (d >= -tol)
        crossing = ((d < -tol) & (dq > tol)) | ((d > tol) & (dq < -tol))
        if not crossing.any():
            if inside.all():
                new_faces.append(poly)
                if on.any():
                    caps.append(poly[on])
                continue
            out = poly[inside]
            if on.any():
                caps.append(poly[on])
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(crossing, d / np.where(crossing, d - dq, 1.0), 0.0)
            x = poly + t[:, None] * (q - poly)
            # vertex i (if kept) then the crossing point on edge (i, i+1)
            both = np.stack([poly, x], axis=1).reshape(-1, 3)
            keep = np.stack([inside, crossing], axis=1).reshape(-1)
            out = both[keep]
            cap_mask = np.stack([on, crossing], axis=1).reshape(-1)
            caps.append(both[cap_mask])
        if len(out) >= 3:
            new_faces.append(out)
    if caps:
        cap = np.concatenate(caps)
        if len(cap) >= 3:
            cap = _unique_rows(cap, tol * 10)
            if len(cap) >= 3:
                new_faces.append(_order_coplanar(cap, normal))
    return new_faces


def _unique_rows(pts: np.ndarray, tol: float) -> np.ndarray:
    if len(pts) < 2:
        return pts
    diff = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=2) <= tol
    first = np.argmax(diff, axis=1)  # index of the first row each row duplicates
    return pts[first == np.arange(len(pts))]


def _order_coplanar(pts: np.ndarray, normal: np.ndarray) -> np.ndarray:
    n = normal / np.linalg.norm(normal)
    # any unit vector orthogonal to n, then v = n x u
    if abs(n[0]) < 0.9:
        u = np.array([0.0, n[2], -n[1]])
    else:
        u = np.array([-n[2], 0.0, n[0]])
    u /= np.linalg.norm(u)
    v = np.array([n[1] * u[2] - n[2] * u[1], n[2] * u[0] - n[0] * u[2], n[0] * u[1] - n[1] * u[0]])
    rel = pts - pts.mean(axis=0)
    ang = np.arctan2(rel @ v, rel @ u)
    return pts[np.argsort(ang)]


def polytope_volume(faces: list[np.ndarray]) -> float:
    if len(faces) < 4:
        return 0.0
    ref = np.concatenate(faces).mean(axis=0)
    vol = 0.0
    for f in faces:
        a = 0.5 * _cross_rows(f, np.roll(f, -1, axis=0)).sum(axis=0)
        vol += abs(float(a @ (f[0] - ref))) / 3.0
    return vol


def _box_planes(box: OrientedBoundingBox):
    normals = np.concatenate([box.axes, -box.axes])
    offsets = np.concatenate([box.axes @ box.center + box.half_extents,
                              -(box.axes @ box.center) + box.half_extents])
    return normals, offsets


# ---------------------------------------------------------------------------
# OBB construction
# ---------------------------------------------------------------------------


def _horizontal_front(axes: np.ndarray) -> np.ndarray:
    # first axis (by descending variance) that is at most 60 degrees from horizontal
    for a in axes:
        h = np.array([a[0], a[1], 0.0])
        n = np.linalg.norm(h)
        if n >= 0.5:
            f = h / n
            break
    else:
        f = np.array([1.0, 0.0, 0.0])
    if f[0] < -1e-12 or (abs(f[0]) <= 1e-12 and f[1] < 0):
        f = -f
    return f


def compute_obb(cloud: PointCloud | np.ndarray) -> OrientedBoundingBox:
    """PCA box enclosing the cloud.

    Axes are covariance eigenvectors by descending eigenvalue (made
    right-handed).  A rank-2 cloud keeps the cross product of the two found
    axes as its third axis; every half extent is floored at 1 cm.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("cannot fit a box to an empty cloud")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / len(pts)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    top = max(float(w[0]), 0.0)
    rank = int(np.sum(w > 1e-12 * top)) if top > 0 else 0
    if rank < 2:
        raise DegenerateCloud(f"covariance rank {rank} < 2")
    axes = v.T.copy()
    axes[2] = np.cross(axes[0], axes[1])
    axes[2] /= np.linalg.norm(axes[2])
    local = centered @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    center = mean + ((lo + hi) / 2.0) @ axes
    half = np.maximum((hi - lo) / 2.0, MIN_HALF_EXTENT)
    up = axes[int(np.argmax(np.abs(axes[:, 2])))]
    if up[2] < 0:
        up = -up
    return OrientedBoundingBox(center, half, axes, _horizontal_front(axes), up.copy())


# ---------------------------------------------------------------------------
# pairwise queries
# ---------------------------------------------------------------------------


def _spheres_apart(a: OrientedBoundingBox, b: OrientedBoundingBox, margin: float = 0.0) -> bool:
    ca, _, _, ra = a.flat()
    cb, _, _, rb = b.flat()
    dx, dy, dz = ca[0] - cb[0], ca[1] - cb[1], ca[2] - cb[2]
    r = ra + rb + margin
    return dx * dx + dy * dy + dz * dz > r * r


def boxes_intersect(a: OrientedBoundingBox, b: OrientedBoundingBox) -> bool:
    """Separating-axis test over the 15 candidate axes, in a's frame.

    Touching counts as intersecting.  The small epsilon on |R| keeps
    near-parallel edge pairs from producing spurious separating axes.
    Written on plain floats: for 3x3 work numpy call overhead dominates.
    """
    ca, ha, A, rad_a = a.flat()
    cb, hb, B, rad_b = b.flat()
    d0, d1, d2 = cb[0] - ca[0], cb[1] - ca[1], cb[2] - ca[2]
    r = rad_a + rad_b
    if d0 * d0 + d1 * d1 + d2 * d2 > r * r:
        return False
    R = [[Ai[0] * Bj[0] + Ai[1] * Bj[1] + Ai[2] * Bj[2] for Bj in B] for Ai in A]
    AR = [[abs(v) + 1e-12 for v in row] for row in R]
    t = [Ai[0] * d0 + Ai[1] * d1 + Ai[2] * d2 for Ai in A]
    for i in range(3):
        if abs(t[i]) > ha[i] + hb[0] * AR[i][0] + hb[1] * AR[i][1] + hb[2] * AR[i][2]:
            return False
    for j in range(3):
        proj = t[0] * R[0][j] + t[1] * R[1][j] + t[2] * R[2][j]
        if abs(proj) > hb[j] + ha[0] * AR[0][j] + ha[1] * AR[1][j] + ha[2] * AR[2][j]:
            return False
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            d = abs(t[i2] * R[i1][j] - t[i1] * R[i2][j])
            if d > (ha[i1] * AR[i2][j] + ha[i2] * AR[i1][j]
                    + hb[j1] * AR[i][j2] + hb[j2] * AR[i][j1]):
                return False
    return True


def overlap_xy(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """Footprint intersection area over the smaller footprint area."""
    area_a, ra = a._footprint_stats()
    area_b, rb = b._footprint_stats()
    ca, cb = a.flat()[0], b.flat()[0]
    if math.hypot(ca[0] - cb[0], ca[1] - cb[1]) > ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(a.footprint(), b.footprint()))
    return float(min(1.0, max(0.0, inter / min(area_a, area_b))))


def delta_z(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """Gap between a's base and b's top.

    Zero when a's base sits inside b's vertical span (interpenetration);
    the absolute gap when a's base lies below b's base.
    """
    a_lo = float(a.corners()[:, 2].min())
    b_lo, b_hi = b.z_range()
    gap = a_lo - b_hi
    if gap >= 0.0:
        return gap
    if a_lo >= b_lo:
        return 0.0
    return -gap


def _edge_plane_points(corners: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Crossings of the 12 box edges with each plane n.x = d (all 12 x k candidates)."""
    p0 = corners[_EDGE_INDEX[:, 0]]
    p1 = corners[_EDGE_INDEX[:, 1]]
    s0 = p0 @ normals.T - offsets          # (12, k)
    s1 = p1 @ normals.T - offsets
    ok = (s0 * s1 <= 0) & (s0 != s1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, s0 / np.where(ok, s0 - s1, 1.0), 0.0)
    pts = p0[:, None, :] + t[..., None] * (p1 - p0)[:, None, :]
    return pts[ok]


def _hull_volume(pts: np.ndarray) -> float:
    if len(pts) < 4:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:  # flat or degenerate: zero volume
        return 0.0


def intersection_volume(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """Exact volume of the intersection of two oriented boxes.

    The intersection is convex; its vertices are the corners of each box
    lying inside the other plus every edge/face crossing.  The volume is
    that of their convex hull.
    """
    if not boxes_intersect(a, b):
        return 0.0
    ca, cb = a.corners(), b.corners()
    in_b = b.contains(ca, tol=1e-9)
    if in_b.all():
        return a.volume
    in_a = a.contains(cb, tol=1e-9)
    if in_a.all():
        return b.volume
    nb, db = _box_planes(b)
    na, da = _box_planes(a)
    xa = _edge_plane_points(ca, nb, db)
    xb = _edge_plane_points(cb, na, da)
    cand = np.concatenate([ca[in_b], cb[in_a], xa[b.contains(xa, tol=1e-9)], xb[a.contains(xb, tol=1e-9)]])
    return min(_hull_volume(cand), a.volume, b.volume)


def intersection_volume_clipped(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    """Same quantity by successive half-space clipping (slower; kept as a cross-check)."""
    if not boxes_intersect(a, b):
        return 0.0
    faces = a.faces()
    normals, offsets = _box_planes(b)
    for n, d in zip(normals, offsets):
        faces = clip_polytope(faces, n, d)
        if not faces:
            return 0.0
    return min(polytope_volume(faces), a.volume, b.volume)


def _point_box_distance(points: np.ndarray, box: OrientedBoundingBox) -> np.ndarray:
    local = box.to_local(points)
    excess = np.maximum(np.abs(local) - box.half_extents, 0.0)
    return np.linalg.norm(excess, axis=-1)


def segment_distances(p1, q1, p2, q2) -> np.ndarray:
    """Row-wise closest distance between segments [p1,q1] and [p2,q2]."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d1, r)
    f = np.einsum("ij,ij->i", d2, r)
    denom = a * e - b * b
    safe = np.where(denom > 1e-14 * a * e, denom, 1.0)
    s = np.where(denom > 1e-14 * a * e, np.clip((b * f - c * e) / safe, 0.0, 1.0), 0.0)
    t = (b * s + f) / e
    s = np.where(t < 0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1, np.clip((b - c) / a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    diff = (p1 + d1 * s[:, None]) - (p2 + d2 * t[:, None])
    return np.linalg.norm(diff, axis=1)


def min_distance(a: OrientedBoundingBox, b: OrientedBoundingBox) -> float:
    if boxes_intersect(a, b):
        return 0.0
    ca, cb = a.corners(), b.corners()
    best = min(_point_box_distance(ca, b).min(), _point_box_distance(cb, a).min())
    ea, eb = _EDGE_INDEX, _EDGE_INDEX
    ia = np.repeat(np.arange(12), 12)
    ib = np.tile(np.arange(12), 12)
    seg = segment_distances(ca[ea[ia, 0]], ca[ea[ia, 1]], cb[eb[ib, 0]], cb[eb[ib, 1]])
    return float(min(best, seg.min()))


def left_direction(b: OrientedBoundingBox) -> np.ndarray:
    """Unit vector world_up x front(b); falls back to the principal axis for a vertical front."""
    f = b.front
    d = np.array([-f[1], f[0], 0.0])  # world_up x front
    n = math.hypot(d[0], d[1])
    if n < 1e-9:
        p = b.principal_axis
        d = np.array([-p[1], p[0], 0.0])
        n = math.hypot(d[0], d[1])
        if n < 1e-9:
            d, n = np.array([0.0, 1.0, 0.0]), 1.0
    return d / n


def half_space_fraction(a: OrientedBoundingBox, b: OrientedBoundingBox, side: str) -> float:
    """Fraction of a's volume lying in b's left or right half-space."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    lft = left_direction(b)
    sgn = lft if side == "left" else -lft
    # signed extent of a along sgn, from scalars before touching any arrays
    c_a, h, A, _ = a.flat()
    c_b = b.flat()[0]
    g = (float(sgn[0]), float(sgn[1]), float(sgn[2]))
    mid = sum((c_a[k] - c_b[k]) * g[k] for k in range(3))
    reach = sum(h[k] * abs(A[k][0] * g[0] + A[k][1] * g[1] + A[k][2] * g[2]) for k in range(3))
    if mid - reach >= 0:
        return 1.0
    if mid + reach <= 0:
        return 0.0
    s = (a.corners() - b.center) @ sgn
    # part of a with sgn.(x - c_b) >= 0: kept corners plus edge crossings
    ca = a.corners()
    d = float(sgn @ b.center)
    x = _edge_plane_points(ca, sgn[None, :], np.array([d]))
    vol = _hull_volume(np.concatenate([ca[s >= 0], x]))
    return float(min(1.0, max(0.0, vol / a.volume)))


# ---------------------------------------------------------------------------
# point-set operations
# ---------------------------------------------------------------------------


def ransac_plane(cloud: PointCloud | np.ndarray, iterations: int, inlier_tol: float,
                 rng_seed: int) -> PlaneModel:
    """Plane with the largest inlier count over ``iterations`` random triples.

    The winner is refit by least squares on its inliers and the refit is kept
    when it does not lose inliers.  The normal is oriented to z >= 0.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 3:
        raise TooFewPoints("RANSAC needs at least 3 points")
    rng = np.random.default_rng(rng_seed)
    best_n, best_d, best_count = None, 0.0, -1
    batch = 64
    done = 0
    while done < iterations:
        m = min(batch, iterations - done)
        done += m
        tri = np.array([rng.choice(len(pts), 3, replace=False) for _ in range(m)])
        p0, p1, p2 = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
        nrm = np.cross(p1 - p0, p2 - p0)
        ln = np.linalg.norm(nrm, axis=1)
        ok = ln > 1e-12
        if not np.any(ok):
            continue
        nrm = nrm[ok] / ln[ok, None]
        off = np.einsum("ij,ij->i", nrm, p0[ok])
        counts = (np.abs(pts @ nrm.T - off) <= inlier_tol).sum(axis=0)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_n, best_d, best_count = nrm[k], float(off[k]), int(counts[k])
    if best_n is None:
        raise TooFewPoints("all sampled triples were collinear")
    inl = np.abs(pts @ best_n - best_d) <= inlier_tol
    if inl.sum() >= 3:
        q = pts[inl]
        c = q.mean(axis=0)
        _, _, vt = np.linalg.svd(q - c, full_matrices=False)
        n2 = vt[-1]
        d2 = float(n2 @ c)
        c2 = int((np.abs(pts @ n2 - d2) <= inlier_tol).sum())
        if c2 >= best_count:
            best_n, best_d, best_count = n2, d2, c2
    if best_n[2] < 0 or (best_n[2] == 0 and (best_n[1] < 0 or (best_n[1] == 0 and best_n[0] < 0))):
        best_n, best_d = -best_n, -best_d
    return PlaneModel(best_n / np.linalg.norm(best_n), best_d, best_count)


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    k = min(int(k), len(index))
    if k <= 0:
        return []
    dist, idx = index._tree.query(np.asarray(query, dtype=np.float64).reshape(3), k=k)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    return [(int(index.ids[i]), float(d)) for d, i in zip(dist, idx)]


def estimate_normals(points: np.ndarray, k: int = 16, toward=None) -> np.ndarray:
    """Local-PCA normals over k neighbours, oriented toward ``toward`` (default: centroid)."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    if k < 3:
        raise TooFewPoints("normal estimation needs at least 3 points")
    _, nb = cKDTree(pts).query(pts, k=k)
    nbrs = pts[nb]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    target = pts.mean(axis=0) if toward is None else np.asarray(toward, dtype=np.float64)
    flip = np.einsum("ij,ij->i", normals, target - pts) < 0
    normals[flip] *= -1
    return normals


# ---------------------------------------------------------------------------
# rigid motion
# ---------------------------------------------------------------------------


def axis_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def pose_rotation(obb: OrientedBoundingBox, pose: Pose) -> np.ndarray:
    """Tilt by phi about the box front, then yaw by theta about world up."""
    R = np.eye(3)
    if pose.phi != 0.0:
        R = axis_rotation(obb.front, pose.phi)
    if pose.theta != 0.0:
        R = axis_rotation(WORLD_UP, pose.theta) @ R
    return R


def apply_pose_obb(obb: OrientedBoundingBox, pose: Pose) -> OrientedBoundingBox:
    R = pose_rotation(obb, pose)
    return OrientedBoundingBox(
        np.array([pose.x, pose.y, pose.z]), obb.half_extents.copy(),
        obb.axes @ R.T, R @ obb.front, R @ obb.up_normal,
    )


def apply_pose(cloud: PointCloud, obb: OrientedBoundingBox,
               pose: Pose) -> tuple[PointCloud, OrientedBoundingBox]:
    R = pose_rotation(obb, pose)
    t = np.array([pose.x, pose.y, pose.z])
    pts = (cloud.points - obb.center) @ R.T + t
    normals = None if cloud.normals is None else cloud.normals @ R.T
    colors = None if cloud.colors is None else cloud.colors.copy()
    return PointCloud(pts, colors, normals), apply_pose_obb(obb, pose)
