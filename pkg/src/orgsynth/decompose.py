"""Scene decomposition into floor / background / foreground repositories.

Also holds the boundary completion used after furniture removal: a fake
boundary search around ground-truth walls and floors, a voxel Poisson
solve, and Gaussian jitter of the regular output.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    DegenerateCloud,
    OrientedBoundingBox,
    PointCloud,
    compute_obb,
    estimate_normals,
)
from .plyio import LabeledScene, PlyFormatError, read_ply, write_ply
from .serialization import atomic_write_json, obb_from_dict, obb_to_dict

log = logging.getLogger(__name__)

REPO_FORMAT_VERSION = "1"
INDEX_NAME = "index.json"


class DecomposeError(Exception):
    pass


class UnknownCategory(DecomposeError):
    def __init__(self, category_id):
        super().__init__(f"category id {category_id} is not in the taxonomy")
        self.category_id = category_id


class EmptyBoundary(DecomposeError):
    pass


class SolverDiverged(DecomposeError):
    pass


class FormatError(DecomposeError):
    pass


class Role(str, Enum):
    FLOOR = "Floor"
    BACKGROUND = "Background"
    FOREGROUND = "Foreground"


@dataclass
class CategoryTaxonomy:
    dataset_name: str
    roles: dict[int, Role]
    names: dict[int, str] = field(default_factory=dict)

    def role(self, category_id: int) -> Role:
        try:
            return self.roles[int(category_id)]
        except KeyError:
            raise UnknownCategory(int(category_id)) from None

    def name(self, category_id: int) -> str:
        return self.names.get(int(category_id), str(category_id))

    def category_id(self, name: str) -> int:
        for k, v in self.names.items():
            if v == name:
                return k
        raise KeyError(name)

    def ids_with_role(self, role: Role) -> list[int]:
        return sorted(k for k, r in self.roles.items() if r == role)

    @classmethod
    def from_manifest(cls, manifest: dict) -> "CategoryTaxonomy":
        roles, names = {}, {}
        for entry in manifest["categories"]:
            cid = int(entry["id"])
            roles[cid] = Role(entry["role"])
            names[cid] = entry.get("name", str(cid))
        return cls(manifest.get("dataset", ""), roles, names)

    @classmethod
    def load(cls, path) -> "CategoryTaxonomy":
        with open(path) as fh:
            return cls.from_manifest(json.load(fh))

    def to_manifest(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "categories": [
                {"id": k, "name": self.name(k), "role": self.roles[k].value}
                for k in sorted(self.roles)
            ],
        }


@dataclass(eq=False)
class LabeledInstance:
    instance_id: int
    category_id: int
    cloud: PointCloud
    obb: OrientedBoundingBox
    source_scene: str = ""

    @classmethod
    def from_box(cls, instance_id, category_id, obb, source_scene="", n_points=200, seed=0):
        """Instance whose cloud is sampled on the surface of ``obb``."""
        return cls(instance_id, category_id, sample_box_surface(obb, n_points, seed), obb, source_scene)


@dataclass(eq=False)
class SceneRepository:
    floors: list[LabeledInstance] = field(default_factory=list)
    backgrounds: list[LabeledInstance] = field(default_factory=list)
    foregrounds: list[LabeledInstance] = field(default_factory=list)

    def all_instances(self):
        for role, items in ((Role.FLOOR, self.floors), (Role.BACKGROUND, self.backgrounds),
                            (Role.FOREGROUND, self.foregrounds)):
            for inst in items:
                yield role, inst

    def __len__(self) -> int:
        return len(self.floors) + len(self.backgrounds) + len(self.foregrounds)

    def scenes(self) -> list[str]:
        return sorted({inst.source_scene for _, inst in self.all_instances()})

    def split_by_scene(self) -> list["SceneRepository"]:
        out = {name: SceneRepository() for name in self.scenes()}
        for role, inst in self.all_instances():
            _role_list(out[inst.source_scene], role).append(inst)
        return [out[k] for k in sorted(out)]

    def merge(self, other: "SceneRepository") -> "SceneRepository":
        return SceneRepository(self.floors + other.floors, self.backgrounds + other.backgrounds,
                               self.foregrounds + other.foregrounds)


def _role_list(repo: SceneRepository, role: Role) -> list:
    return {Role.FLOOR: repo.floors, Role.BACKGROUND: repo.backgrounds,
            Role.FOREGROUND: repo.foregrounds}[role]


@dataclass
class BoundaryCompletionConfig:
    mu: float = 0.05
    theta_max: float = math.radians(20.0)
    voxel_size: float = 0.05
    cg_tolerance: float = 1e-6
    cg_max_iters: int = 2000
    sigma: float = 0.005
    # grid padding beyond the data, as a fraction of the largest extent
    padding_fraction: float = 0.25

    def __post_init__(self):
        for name in ("mu", "theta_max", "voxel_size", "cg_tolerance", "cg_max_iters", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.theta_max < math.pi / 2:
            raise ValueError("theta_max must be below pi/2")


def sample_box_surface(obb: OrientedBoundingBox, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the six faces of a box, with outward normals."""
    rng = np.random.default_rng(seed)
    h = obb.half_extents
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    u[np.arange(n), axis] = sign * h[axis]
    local_n = np.zeros((n, 3))
    local_n[np.arange(n), axis] = sign
    return PointCloud(obb.center + u @ obb.axes, None, local_n @ obb.axes)


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


def _instance_obb(cloud: PointCloud) -> OrientedBoundingBox:
    try:
        return compute_obb(cloud)
    except DegenerateCloud:
        # one or two distinct points: a 2 cm cube around them
        c = (cloud.points.min(axis=0) + cloud.points.max(axis=0)) / 2.0
        half = np.maximum((cloud.points.max(axis=0) - cloud.points.min(axis=0)) / 2.0, 0.01)
        return OrientedBoundingBox(c, half, np.eye(3), [1.0, 0.0, 0.0], [0.0, 0.0, 1.0])


def partition_scene(scene: LabeledScene, taxonomy: CategoryTaxonomy) -> SceneRepository:
    """Group points by (category, instance) and file each group under its role."""
    unknown = set(np.unique(scene.labels).tolist()) - set(taxonomy.roles)
    if unknown:
        raise UnknownCategory(min(unknown))
    repo = SceneRepository()
    keys = np.stack([scene.labels, scene.instances], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    for g, (cat, inst) in enumerate(uniq):
        idx = order[bounds[g]:bounds[g + 1]]
        cloud = scene.cloud.subset(idx)
        item = LabeledInstance(int(inst), int(cat), cloud, _instance_obb(cloud), scene.name)
        _role_list(repo, taxonomy.role(cat)).append(item)
    return repo


# ---------------------------------------------------------------------------
# boundary completion
# ---------------------------------------------------------------------------


def find_fake_boundary(raw: PointCloud, gt_boundary: PointCloud,
                       cfg: BoundaryCompletionConfig) -> PointCloud:
    """Raw points within ``mu`` of the GT boundary whose normal agrees with the nearest GT normal."""
    if len(gt_boundary) == 0:
        raise EmptyBoundary("ground-truth boundary is empty")
    if raw.normals is None or gt_boundary.normals is None:
        raise ValueError("both clouds need normals")
    if len(raw) == 0:
        return raw.subset(np.zeros(0, dtype=int))
    dist, nn = cKDTree(gt_boundary.points).query(raw.points, k=1)
    n_raw = raw.normals / np.linalg.norm(raw.normals, axis=1, keepdims=True)
    n_gt = gt_boundary.normals[nn]
    n_gt = n_gt / np.linalg.norm(n_gt, axis=1, keepdims=True)
    cos = np.clip(np.einsum("ij,ij->i", n_raw, n_gt), -1.0, 1.0)
    keep = (dist < cfg.mu) & (np.arccos(cos) < cfg.theta_max)
    return raw.subset(np.flatnonzero(keep))


def _laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """7-point Laplacian of the interior unknowns with zero Dirichlet padding."""
    p = np.pad(u, 1)
    return (p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1] + p[1:-1, 2:, 1:-1] + p[1:-1, :-2, 1:-1]
            + p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2] - 6.0 * u) / (h * h)


def conjugate_residual(apply_A, b: np.ndarray, tol: float, max_iters: int):
    """Conjugate-residual iteration for a symmetric positive definite operator.

    Same Krylov space as CG but each iterate minimises the residual 2-norm,
    so the recorded residual history never increases.  Returns
    ``(x, residual_norms)`` where ``residual_norms[0] = ||b||``.
    """
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    history = [bnorm]
    if bnorm == 0.0:
        return x, history
    Ar = apply_A(r)
    p, Ap = r.copy(), Ar.copy()
    rAr = float(np.vdot(r, Ar))
    for _ in range(max_iters):
        ApAp = float(np.vdot(Ap, Ap))
        if ApAp == 0.0:
            break
        alpha = rAr / ApAp
        x += alpha * p
        r -= alpha * Ap
        history.append(float(np.linalg.norm(r)))
        if history[-1] <= tol * bnorm:
            break
        Ar = apply_A(r)
        rAr_new = float(np.vdot(r, Ar))
        beta = rAr_new / rAr
        rAr = rAr_new
        p = r + beta * p
        Ap = Ar + beta * Ap
    return x, history


@dataclass(eq=False)
class PoissonResult:
    cloud: PointCloud
    field: np.ndarray
    origin: np.ndarray
    voxel_size: float
    iso_value: float
    residuals: list[float]


def _splat_sources(pts, nrm, origin, h, shape) -> np.ndarray:
    """Accumulate w(r) * (n.r / d) over the cells within two voxels of each point.

    w is the separable linear hat of half-width 2h, whose first moment
    vanishes, so each point deposits a dipole rather than a net charge.
    """
    rho = np.zeros(shape)
    base = np.floor((pts - origin) / h - 0.5).astype(np.int64)
    lim = np.array(shape)
    for off in np.ndindex(4, 4, 4):
        idx = base + np.array(off) - 1
        ok = np.all((idx >= 0) & (idx < lim), axis=1)
        r = pts[ok] - (origin + (idx[ok] + 0.5) * h)
        w = np.prod(np.clip(1.0 - np.abs(r) / (2.0 * h), 0.0, None), axis=1)
        d = np.maximum(np.linalg.norm(r, axis=1), h / 2.0)
        v = w * np.einsum("ij,ij->i", nrm[ok], r) / d
        np.add.at(rho, tuple(idx[ok].T), v)
    return rho


def _trilinear(fld, origin, h, pts) -> np.ndarray:
    g = (pts - origin) / h - 0.5
    base = np.clip(np.floor(g).astype(np.int64), 0, np.array(fld.shape) - 2)
    t = np.clip(g - base, 0.0, 1.0)
    out = np.zeros(len(pts))
    for off in np.ndindex(2, 2, 2):
        w = np.prod(np.where(np.array(off) == 1, t, 1.0 - t), axis=1)
        out += w * fld[tuple((base + np.array(off)).T)]
    return out


def poisson_complete(coarse: PointCloud, cfg: BoundaryCompletionConfig,
                     full_output: bool = False):
    """Hole-filled surface samples from an oriented coarse boundary.

    The source term is splatted on a voxel grid, the 7-point Poisson system
    is solved with f = voxel_size on the outer shell, and the centres of
    cells adjacent to the iso-surface of f (iso value = mean of f at the
    input samples) are emitted with normals from the discrete gradient.
    Emission is limited to the input bounding box dilated by two voxels.
    """
    if len(coarse) == 0:
        raise ValueError("coarse boundary is empty")
    if coarse.normals is None:
        raise ValueError("coarse boundary needs normals")
    h = cfg.voxel_size
    pts = coarse.points
    nrm = coarse.normals / np.linalg.norm(coarse.normals, axis=1, keepdims=True)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    pad = max(2, int(math.ceil(cfg.padding_fraction * float(extent.max()) / h)))
    shape = tuple(int(k) for k in np.ceil(extent / h).astype(int) + 1 + 2 * pad)
    origin = (lo + hi) / 2.0 - np.array(shape) * h / 2.0

    rho = _splat_sources(pts, nrm, origin, h, shape)
    inner = rho[1:-1, 1:-1, 1:-1]
    shell = h
    # move the constant shell value to the right-hand side: A u = -(rho - L shell)
    boundary = np.zeros_like(inner)
    for axis in range(3):
        sl = [slice(None)] * 3
        sl[axis] = 0
        boundary[tuple(sl)] += shell
        sl[axis] = -1
        boundary[tuple(sl)] += shell
    b = -(inner - boundary / (h * h))
    u, residuals = _solve(b, h, cfg)
    fld = np.full(shape, shell)
    fld[1:-1, 1:-1, 1:-1] = u
    bnorm = residuals[0]
    if bnorm > 0 and residuals[-1] > 10.0 * cfg.cg_tolerance * bnorm:
        raise SolverDiverged(f"relative residual {residuals[-1] / bnorm:.3e} after {len(residuals) - 1} iterations")

    iso = float(np.mean(_trilinear(fld, origin, h, pts)))
    g = fld - iso
    centers_lo = lo - 2.0 * h
    centers_hi = hi + 2.0 * h
    emit = np.zeros(shape, dtype=bool)
    for axis in range(3):
        a = [slice(1, -1)] * 3
        b_ = [slice(1, -1)] * 3
        a[axis] = slice(1, -2)
        b_[axis] = slice(2, -1)
        ga, gb = g[tuple(a)], g[tuple(b_)]
        cross = (ga <= 0) != (gb <= 0)
        pick_a = cross & (np.abs(ga) <= np.abs(gb))
        pick_b = cross & ~pick_a
        emit[tuple(a)] |= pick_a
        emit[tuple(b_)] |= pick_b
    idx = np.argwhere(emit)
    centers = origin + (idx + 0.5) * h
    inside = np.all((centers >= centers_lo - 1e-9) & (centers <= centers_hi + 1e-9), axis=1)
    idx, centers = idx[inside], centers[inside]
    grad = np.stack(np.gradient(fld, h), axis=-1)[tuple(idx.T)]
    gn = np.linalg.norm(grad, axis=1, keepdims=True)
    normals = np.where(gn > 0, grad / np.where(gn > 0, gn, 1.0), np.array([0.0, 0.0, 1.0]))
    out = PointCloud(centers, None, normals)
    if full_output:
        return PoissonResult(out, fld, origin, h, iso, residuals)
    return out


def _solve(b: np.ndarray, h: float, cfg: BoundaryCompletionConfig):
    shape = b.shape

    def apply_A(v):
        return -_laplacian(v.reshape(shape), h).ravel()

    x, history = conjugate_residual(apply_A, b.ravel(), cfg.cg_tolerance, cfg.cg_max_iters)
    return x.reshape(shape), history


def perturb(cloud: PointCloud, sigma: float, rng_seed: int) -> PointCloud:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return PointCloud(cloud.points.copy(), None if cloud.colors is None else cloud.colors.copy(),
                          None if cloud.normals is None else cloud.normals.copy())
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, sigma, size=cloud.points.shape)
    return PointCloud(cloud.points + noise, None if cloud.colors is None else cloud.colors.copy(),
                      None if cloud.normals is None else cloud.normals.copy())


def complete_boundaries(scene_repo: SceneRepository, raw: PointCloud,
                        cfg: BoundaryCompletionConfig, rng_seed: int = 0) -> int:
    """Fill occluded floor/background surfaces of one scene in place.

    The fake boundary around the ground-truth floor and background points is
    completed by :func:`poisson_complete`; only new samples that are more than
    one voxel from the coarse boundary and whose normal agrees with it (angle
    below ``theta_max``) are kept, jittered, and handed to the nearest
    floor/background instance.  Returns the number of points added.
    """
    boundary = scene_repo.floors + scene_repo.backgrounds
    if not boundary:
        return 0
    gt = PointCloud.concat([inst.cloud for inst in boundary])
    owner = np.concatenate([np.full(len(inst.cloud), k) for k, inst in enumerate(boundary)])
    centroid = raw.points.mean(axis=0)
    if gt.normals is None:
        gt = PointCloud(gt.points, gt.colors, estimate_normals(gt.points, 16, centroid))
    if raw.normals is None:
        raw = PointCloud(raw.points, raw.colors, estimate_normals(raw.points, 16, centroid))
    coarse = find_fake_boundary(raw, gt, cfg)
    if len(coarse) < 3:
        return 0
    filled = poisson_complete(coarse, cfg)
    if len(filled) == 0:
        return 0
    dist, nn = cKDTree(coarse.points).query(filled.points)
    agree = np.einsum("ij,ij->i", filled.normals, coarse.normals[nn] /
                      np.linalg.norm(coarse.normals[nn], axis=1, keepdims=True))
    keep = (dist > cfg.voxel_size) & (agree > math.cos(cfg.theta_max))
    if not np.any(keep):
        return 0
    new = perturb(filled.subset(np.flatnonzero(keep)), cfg.sigma, rng_seed)
    _, gt_nn = cKDTree(gt.points).query(new.points)
    target = owner[gt_nn]
    for k, inst in enumerate(boundary):
        sel = np.flatnonzero(target == k)
        if len(sel) == 0:
            continue
        add = new.subset(sel)
        if inst.cloud.colors is not None:
            add = PointCloud(add.points, np.repeat(inst.cloud.colors.mean(axis=0, keepdims=True)
                                                   .astype(np.uint8), len(sel), axis=0), add.normals)
        if inst.cloud.normals is None:
            add = PointCloud(add.points, add.colors, None)
        inst.cloud = PointCloud.concat([inst.cloud, add])
        inst.obb = _instance_obb(inst.cloud)
    return int(keep.sum())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_repository(repo: SceneRepository, path) -> None:
    """Write per-instance PLY files and an ``index.json`` under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (role, inst) in enumerate(repo.all_instances()):
        fname = f"inst_{k:06d}.ply"
        labels = np.full(len(inst.cloud), inst.category_id)
        ids = np.full(len(inst.cloud), inst.instance_id)
        write_ply(root / fname, LabeledScene(inst.cloud, labels, ids, inst.source_scene),
                  binary=True, coord_dtype="f8")
        entries.append({
            "id": k,
            "instance_id": int(inst.instance_id),
            "category": int(inst.category_id),
            "role": role.value,
            "source_scene": inst.source_scene,
            "file": fname,
            "n_points": len(inst.cloud),
            "obb": obb_to_dict(inst.obb),
        })
    atomic_write_json(root / INDEX_NAME, {"version": REPO_FORMAT_VERSION, "instances": entries})


def load_repository(path) -> SceneRepository:
    root = Path(path)
    try:
        text = (root / INDEX_NAME).read_text()
    except OSError as exc:
        raise OSError(f"cannot read repository index in {root}: {exc}") from exc
    try:
        index = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root / INDEX_NAME}: {exc}") from exc
    if not isinstance(index, dict) or index.get("version") != REPO_FORMAT_VERSION:
        raise FormatError(f"{root / INDEX_NAME}: unsupported format version "
                          f"{index.get('version') if isinstance(index, dict) else None!r}")
    repo = SceneRepository()
    try:
        for e in index["instances"]:
            try:
                scene = read_ply(root / e["file"])
            except PlyFormatError as exc:
                raise FormatError(str(exc)) from exc
            if len(scene.cloud) != e["n_points"]:
                raise FormatError(f"{e['file']}: expected {e['n_points']} points, found {len(scene.cloud)}")
            inst = LabeledInstance(int(e["instance_id"]), int(e["category"]), scene.cloud,
                                   obb_from_dict(e["obb"]), e["source_scene"])
            _role_list(repo, Role(e["role"])).append(inst)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{root / INDEX_NAME}: malformed entry ({exc})") from exc
    return repo
