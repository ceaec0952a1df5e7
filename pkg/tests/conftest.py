import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from orgsynth.decompose import LabeledInstance, SceneRepository, partition_scene
from orgsynth.fixtures import CHAIR, FLOOR, INDOOR_TAXONOMY, LAMP, PICTURE, SIZES, SOFA, TABLE, WALL, make_corpus
from orgsynth.geometry import OrientedBoundingBox, PointCloud
from orgsynth.relations import ThresholdConfig, collect_stats

Q = math.pi / 4


def box(center, size, yaw=0.0, front=None, up=None):
    return OrientedBoundingBox.from_extents(center, size, yaw, front=front, up_normal=up)


def furniture(cat, x, y, yaw, base=0.0, front=None):
    l, w, h = SIZES[cat]
    return box([x, y, base + h / 2], [l, w, h], yaw, front=front)


def random_box(rng, spread=1.0, size=(0.2, 1.2), tilt=True):
    """Random oriented box; with ``tilt`` the rotation is uniform on SO(3)."""
    if tilt:
        R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix().T
    else:
        t = rng.uniform(-math.pi, math.pi)
        R = np.array([[math.cos(t), math.sin(t), 0], [-math.sin(t), math.cos(t), 0], [0, 0, 1.0]])
    front = np.array([R[0, 0], R[0, 1], 0.0])
    front = front / np.linalg.norm(front) if np.linalg.norm(front) > 1e-6 else np.array([1.0, 0, 0])
    half = rng.uniform(*size, size=3) / 2
    return OrientedBoundingBox(rng.uniform(-spread, spread, 3), half, R, front, R[2])


def predicate_pair(rng):
    """Pairs drawn from four regimes so that every predicate fires in a sizeable share."""
    kind = int(rng.integers(4))
    if kind == 0:
        return random_box(rng, 1.2), random_box(rng, 1.2)
    if kind == 1:
        return random_box(rng, 1.2, tilt=False), random_box(rng, 1.2, tilt=False)
    b = random_box(rng, 0.5, size=(0.4, 1.5), tilt=False)
    if kind == 2:
        # a stacked on b, a few centimetres off contact either way
        h = rng.uniform(0.1, 0.6, 3) / 2
        top = b.z_range()[1]
        xy = b.center[:2] + rng.uniform(-0.4, 0.4, 2)
        z = top + h[2] + rng.uniform(-0.03, 0.1)
        yaw = rng.uniform(-math.pi, math.pi)
        return box([xy[0], xy[1], z], 2 * h, yaw, front=[math.cos(yaw), math.sin(yaw), 0]), b
    # nearly parallel neighbours
    yaw_b = math.atan2(b.axes[0, 1], b.axes[0, 0])
    yaw = yaw_b + rng.normal(0, 0.4)
    c = b.center + np.r_[rng.uniform(-1.5, 1.5, 2), rng.uniform(-0.2, 0.2)]
    return box(c, rng.uniform(0.2, 1.2, 3), yaw, front=[math.cos(yaw), math.sin(yaw), 0]), b


def instance(k, cat, obb, scene="s"):
    return LabeledInstance.from_box(k, cat, obb, scene, n_points=120, seed=k)


def scene_repo(name, floor, walls, objects):
    """SceneRepository from boxes; objects is [(category, obb)]."""
    repo = SceneRepository()
    k = 0
    if floor is not None:
        repo.floors.append(instance(k, FLOOR, floor, name))
        k += 1
    for w in walls:
        repo.backgrounds.append(instance(k, WALL, w, name))
        k += 1
    for cat, obb in objects:
        repo.foregrounds.append(instance(k, cat, obb, name))
        k += 1
    return repo


# ---------------------------------------------------------------------------
# hand-labeled statistics corpus
#
# Floor: 20 x 20 m slab with its top at z = 0.  Wall: 20 m long along x at
# y = 5, front toward -y, so its left direction is +x.  Every object below is
# centred on x = 0, which splits it in half about the wall's dividing plane.
# Yaws of +-45 deg keep principal axes away from the floor/wall x axis
# (|cos| = 0.707 < 0.9).
# ---------------------------------------------------------------------------

HAND_FLOOR = box([0, 0, -0.01], [20, 20, 0.02])
HAND_WALL = box([0, 5, 1.3], [20, 0.2, 2.6], front=[0, -1, 0])


def hand_templates():
    chair_alone = [(CHAIR, furniture(CHAIR, 0, 0, Q))]
    table_lamp = [(TABLE, furniture(TABLE, 0, 0, Q)), (LAMP, furniture(LAMP, 0, 0, -Q, base=0.75))]
    chair_table = [(TABLE, furniture(TABLE, 0, 0, Q)), (CHAIR, furniture(CHAIR, 0, -1.2, -Q, front=[0, 1, 0]))]
    sofa_wall = [(SOFA, furniture(SOFA, 0, 4.45, 0.0))]
    return [chair_alone] * 3 + [table_lamp] * 3 + [chair_table] * 2 + [sofa_wall] * 2


def hand_corpus():
    return [scene_repo(f"hand_{k}", HAND_FLOOR, [HAND_WALL], objs) for k, objs in enumerate(hand_templates())]


# (subject, object) -> {relation label: count}, counted by hand from the templates:
#   chair alone      : chair->floor SupportedBy, chair->wall None (faces 45 deg off, 4.6 m away)
#   table + lamp     : lamp->table SupportedBy, table->lamp OrientedWith (full overlap, same up, lamp above),
#                      lamp->floor OrientedWith (0.75 m above), lamp->wall None, table->floor SupportedBy,
#                      table->wall None
#   chair at table   : chair->table Faces, table->chair Nearby (0.16 m gap), chair->floor SupportedBy,
#                      chair->wall Faces (front +y, cos 0.99), table->floor SupportedBy, table->wall None
#   sofa on wall     : sofa->floor SupportedBy, sofa->wall AttachedTo (axes aligned, footprints only touch)
HAND_COUNTS = {
    (CHAIR, FLOOR): {"SupportedBy": 5},
    (CHAIR, WALL): {"None": 3, "Faces": 2},
    (TABLE, FLOOR): {"SupportedBy": 5},
    (TABLE, WALL): {"None": 5},
    (TABLE, LAMP): {"OrientedWith": 3},
    (LAMP, TABLE): {"SupportedBy": 3},
    (LAMP, FLOOR): {"OrientedWith": 3},
    (LAMP, WALL): {"None": 3},
    (CHAIR, TABLE): {"Faces": 2},
    (TABLE, CHAIR): {"Nearby": 2},
    (SOFA, FLOOR): {"SupportedBy": 2},
    (SOFA, WALL): {"AttachedTo": 2},
}
HAND_MEANS = {CHAIR: 0.5, TABLE: 0.5, LAMP: 0.3, SOFA: 0.2}


def asymmetry_pair():
    """a faces b from 3 m; b is yawed 45 deg, its front points away from a."""
    a = furniture(CHAIR, 0, 0, 0.0)
    b = furniture(CHAIR, 3, 0, Q, front=[1, 0, 0])
    return a, b


def isolated_scene():
    """Floor, a chair on it and a picture floating outside the floor slab.

    The picture sits on the floor's front axis (x), beyond its footprint, yawed
    -45 deg with its front pointing away from the chair, so every predicate
    against floor and chair fails.  The chair faces the picture.
    """
    chair = furniture(CHAIR, 0, 0, Q, front=[1, 0, 0])
    pic = box([15, 0, 0.5], SIZES[PICTURE], -Q, front=[math.sqrt(0.5), math.sqrt(0.5), 0])
    return scene_repo("iso", HAND_FLOOR, [], [(CHAIR, chair), (PICTURE, pic)])


# ---------------------------------------------------------------------------
# procedural corpus shared by optimizer and CLI tests
# ---------------------------------------------------------------------------


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """{criterion: [(ok, detail)]}; tests append their sub-checks here."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, parts in results.items():
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: " + "; ".join(d for _, d in parts))


@pytest.fixture(scope="session")
def proc_repos():
    return [partition_scene(s, INDOOR_TAXONOMY) for s in make_corpus(10, seed=0)]


@pytest.fixture(scope="session")
def proc_stats(proc_repos):
    return collect_stats(proc_repos, ThresholdConfig())


@pytest.fixture(scope="session")
def proc_repo(proc_repos):
    repo = proc_repos[0]
    for r in proc_repos[1:]:
        repo = repo.merge(r)
    return repo


# 14 furniture categories (ids 2..15) whose per-scene means add up to 13.10,
# the published average number of furniture instances per ScanNet scene.
# Category 7 (picture) carries 0.60.
SCANNET_MEANS = dict(zip(range(2, 16), [4.50, 1.60, 1.30, 1.10, 0.90, 0.60, 0.70, 0.50,
                                         0.45, 0.40, 0.35, 0.30, 0.20, 0.20]))


def make_layout(objects, floor=HAND_FLOOR, walls=(), bind=True):
    """LayoutState whose dynamic instances sit at their source boxes (zero offsets).

    ``objects`` is [(category, obb)]; node ids 2, 3, ... are bound in order.
    """
    from orgsynth.geometry import Pose
    from orgsynth.layout import LayoutState

    k = 0
    fl = None
    if floor is not None:
        fl = instance(k, FLOOR, floor)
        k += 1
    bg = []
    for w in walls:
        bg.append(instance(k, WALL, w))
        k += 1
    dyn = []
    for cat, obb in objects:
        dyn.append((instance(k, cat, obb), Pose(*obb.center)))
        k += 1
    binding = {2 + i: i for i in range(len(dyn))} if bind else {}
    return LayoutState(fl, bg, dyn, binding)


# ---------------------------------------------------------------------------
# two-object optimizer fixtures and their grid-search oracle
# ---------------------------------------------------------------------------

TWO_OBJECT_FLOOR = box([0, 0, -0.01], [5, 5, 0.02])
TWO_OBJECT_RELATIONS = ("SupportedBy", "AttachedTo", "Faces", "OrientedWith", "LeftOf", "RightOf", "Nearby")


def two_object_case(seed, relation=None):
    """Fixed table-like box b at the origin and a movable box a with one target edge a -> b.

    Returns (layout, target graph, relation label).  a starts on the floor
    within 2 m of b at a random yaw; for SupportedBy it is a small lamp-sized box.
    """
    from orgsynth.org import ObjectRelationshipGraph, OrgEdge, OrgNode
    from orgsynth.relations import RelationType

    rng = np.random.default_rng(seed)
    rel = relation or TWO_OBJECT_RELATIONS[seed % len(TWO_OBJECT_RELATIONS)]
    yb = rng.uniform(-math.pi, math.pi)
    sb = rng.uniform([0.8, 0.6, 0.6], [1.6, 1.0, 0.8])
    b = box([0, 0, sb[2] / 2], sb, yb, front=[math.cos(yb), math.sin(yb), 0])
    sa = rng.uniform(0.2, 0.4, 3) if rel == "SupportedBy" else rng.uniform([0.4, 0.4, 0.5], [0.7, 0.6, 1.0])
    ya = rng.uniform(-math.pi, math.pi)
    xy = rng.uniform(-2, 2, 2)
    a = box([xy[0], xy[1], sa[2] / 2], sa, ya, front=[math.cos(ya), math.sin(ya), 0])
    layout = make_layout([(CHAIR, a), (TABLE, b)], floor=TWO_OBJECT_FLOOR)
    nodes = [OrgNode(0, FLOOR, None, "floor"), OrgNode(1, WALL, None, "wall"), OrgNode(2, CHAIR), OrgNode(3, TABLE)]
    tgt = ObjectRelationshipGraph(nodes, [OrgEdge(2, 3, RelationType.from_label(rel))])
    return layout, tgt, rel


def grid_search_a(layout, tgt, weights, cfg, step=0.05):
    """Exhaustive 5 cm grid over the floor for object 0's (x, y), with its yaw and object 1 fixed.

    Object 0 rests on the floor; for a SupportedBy target it may also rest on
    b's top at the epsilon gap.  Returns (best total, best (x, y), cells)
    where cells is [(x, y, total)] at the best height per cell.
    """
    from orgsynth.geometry import Pose
    from orgsynth.losses import local_loss, support_assignments

    layout.obbs()  # fill the box cache so the fixed object is not rebuilt per cell
    inst, pose = layout.dynamics[0]
    b = layout.obb(1)
    sup = support_assignments(layout, tgt)
    h0 = inst.obb.half_extents[2]
    zs = [h0]
    if any(e.relation.label == "SupportedBy" for e in tgt.real_edges):
        zs.append(b.z_range()[1] + cfg.epsilon + h0)
    fx = layout.floor.obb.half_extents[0]
    fy = layout.floor.obb.half_extents[1]
    xs = np.arange(-fx, fx + 1e-9, step)
    ys = np.arange(-fy, fy + 1e-9, step)
    # b is upright on the floor and there are no walls: every remaining term involves a
    cells = []
    for x in xs:
        for y in ys:
            best = min(local_loss(layout.with_pose(0, Pose(x, y, z, pose.theta, 0.0)), 0, tgt, weights, cfg, sup)
                       for z in zs)
            cells.append((float(x), float(y), best))
    k = int(np.argmin([c[2] for c in cells]))
    return cells[k][2], cells[k][:2], cells


# ---------------------------------------------------------------------------
# planar point fixtures for surface completion
# ---------------------------------------------------------------------------


def grid_plane(half=1.0, step=0.02, z=0.0):
    g = np.arange(-half + step / 2, half, step)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.c_[X.ravel(), Y.ravel(), np.full(X.size, z)]


def up_cloud(pts):
    return PointCloud(pts, None, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))


def hole_cells(out, half, h, center=(0.0, 0.0), z=0.0):
    """Fraction of h-sized cells in the square hole that contain an output sample near height z."""
    cells = np.arange(-half + h / 2, half, h)
    hits = [np.any((np.abs(out[:, 0] - center[0] - cx) <= h / 2) & (np.abs(out[:, 1] - center[1] - cy) <= h / 2)
                   & (np.abs(out[:, 2] - z) <= h)) for cx in cells for cy in cells]
    return float(np.mean(hits))
