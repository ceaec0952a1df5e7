"""Independent reference implementations used to check the library.

Nothing here calls the package's geometry kernels: volumes and areas are
estimated by sampling, distances by a generic constrained minimizer, and
matchings by enumeration.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import ConvexHull
from scipy.stats import qmc

from orgsynth.relations import RelationType

SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)


# ---------------------------------------------------------------------------
# boxes as plain arrays
# ---------------------------------------------------------------------------


def corners(box) -> np.ndarray:
    return np.asarray(box.center) + (SIGNS * np.asarray(box.half_extents)) @ np.asarray(box.axes)


def inside(box, pts, tol=0.0) -> np.ndarray:
    local = (pts - np.asarray(box.center)) @ np.asarray(box.axes).T
    return np.all(np.abs(local) <= np.asarray(box.half_extents) + tol, axis=1)


def _sobol(n, dim, seed):
    m = int(math.ceil(math.log2(max(n, 2))))
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)


def sample_in_box_region(box, lo, hi, n, seed):
    """Uniform points of ``box`` restricted to the local-frame slab [lo, hi]."""
    u = _sobol(n, 3, seed)
    local = lo + u * (hi - lo)
    return np.asarray(box.center) + local @ np.asarray(box.axes), float(np.prod(hi - lo))


def _region(a, b):
    """Part of a's box that can meet b: b's corner bounds in a's frame, clipped to a."""
    ha = np.asarray(a.half_extents)
    cb_local = (corners(b) - np.asarray(a.center)) @ np.asarray(a.axes).T
    lo = np.maximum(-ha, cb_local.min(axis=0))
    hi = np.minimum(ha, cb_local.max(axis=0))
    return lo, hi


def mc_intersection_volume(a, b, n=1 << 20, seed=0) -> float:
    """Quasi-Monte Carlo volume of a and b, sampled in the smaller of the two candidate regions."""
    options = []
    for p, q in ((a, b), (b, a)):
        lo, hi = _region(p, q)
        if np.any(hi <= lo):
            return 0.0
        options.append((float(np.prod(hi - lo)), p, q, lo, hi))
    _, p, q, lo, hi = min(options, key=lambda o: o[0])
    pts, vol = sample_in_box_region(p, lo, hi, n, seed)
    return vol * float(inside(q, pts).mean())


def left_dir(front) -> np.ndarray:
    d = np.array([-front[1], front[0], 0.0])
    return d / np.linalg.norm(d)


def mc_half_space_fraction(a, b, side, n=1 << 17, seed=0) -> float:
    ha = np.asarray(a.half_extents)
    pts, _ = sample_in_box_region(a, -ha, ha, n, seed)
    d = left_dir(np.asarray(b.front))
    if side == "right":
        d = -d
    return float(((pts - np.asarray(b.center)) @ d >= 0).mean())


def footprint_polygon(box) -> np.ndarray:
    xy = corners(box)[:, :2]
    hull = ConvexHull(xy)
    return xy[hull.vertices]


def _in_convex(poly, pts) -> np.ndarray:
    """Point-in-convex-polygon via hull equations (CCW from qhull)."""
    hull = ConvexHull(poly)
    eq = hull.equations  # a x + b y + c <= 0 inside
    return np.all(pts @ eq[:, :2].T + eq[:, 2] <= 1e-12, axis=1)


def raster_area(poly, px) -> float:
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    xs = np.arange(lo[0] + px / 2, hi[0], px)
    ys = np.arange(lo[1] + px / 2, hi[1], px)
    total = 0
    for chunk in np.array_split(xs, max(1, len(xs) // 256)):
        gx, gy = np.meshgrid(chunk, ys, indexing="ij")
        total += int(_in_convex(poly, np.stack([gx.ravel(), gy.ravel()], axis=1)).sum())
    return total * px * px


def raster_overlap_xy(a, b, px=1e-3) -> float:
    pa, pb = footprint_polygon(a), footprint_polygon(b)
    lo = np.maximum(pa.min(axis=0), pb.min(axis=0))
    hi = np.minimum(pa.max(axis=0), pb.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    xs = np.arange(lo[0] + px / 2, hi[0], px)
    ys = np.arange(lo[1] + px / 2, hi[1], px)
    inter = 0
    for chunk in np.array_split(xs, max(1, len(xs) // 256)):
        gx, gy = np.meshgrid(chunk, ys, indexing="ij")
        p = np.stack([gx.ravel(), gy.ravel()], axis=1)
        inter += int((_in_convex(pa, p) & _in_convex(pb, p)).sum())
    inter *= px * px
    return min(1.0, inter / min(raster_area(pa, px), raster_area(pb, px)))


def hull_area_xy(box) -> float:
    return float(ConvexHull(corners(box)[:, :2]).volume)


def box_distance(a, b) -> float:
    """Minimum distance between two boxes as a bound-constrained problem in local coordinates."""
    ca, cb = np.asarray(a.center), np.asarray(b.center)
    Aa, Ab = np.asarray(a.axes), np.asarray(b.axes)
    ha, hb = np.asarray(a.half_extents), np.asarray(b.half_extents)

    def f(z):
        d = (ca + z[:3] @ Aa) - (cb + z[3:] @ Ab)
        return float(d @ d)

    def g(z):
        d = (ca + z[:3] @ Aa) - (cb + z[3:] @ Ab)
        return np.concatenate([2 * Aa @ d, -2 * Ab @ d])

    bounds = [(-h, h) for h in ha] + [(-h, h) for h in hb]
    best = math.inf
    for z0 in (np.zeros(6), np.concatenate([0.5 * ha, -0.5 * hb]), np.concatenate([-0.5 * ha, 0.5 * hb])):
        res = minimize(f, z0, jac=g, bounds=bounds, method="L-BFGS-B",
                       options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 1000})
        best = min(best, res.fun)
    return math.sqrt(max(best, 0.0))


def delta_z(a, b) -> float:
    a_lo = corners(a)[:, 2].min()
    b_lo, b_hi = corners(b)[:, 2].min(), corners(b)[:, 2].max()
    gap = a_lo - b_hi
    if gap >= 0:
        return float(gap)
    return 0.0 if a_lo >= b_lo else float(-gap)


def cos(u, v) -> float:
    u, v = np.asarray(u, float), np.asarray(v, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else float("nan")


# ---------------------------------------------------------------------------
# predicate table, re-derived with sampled geometry
# ---------------------------------------------------------------------------


PRIORITY_LABELS = ("SupportedBy", "AttachedTo", "Faces", "OrientedWith", "LeftOf", "RightOf", "Nearby")


def predicate_quantities(a, b, seed=0, n=1 << 17) -> dict:
    va, vb = float(np.prod(2 * np.asarray(a.half_extents))), float(np.prod(2 * np.asarray(b.half_extents)))
    inter = mc_intersection_volume(a, b, n, seed)
    # sampled overlap: footprint intersection over the smaller footprint, by Monte Carlo in 2D
    pa, pb = footprint_polygon(a), footprint_polygon(b)
    lo = np.maximum(pa.min(axis=0), pb.min(axis=0))
    hi = np.minimum(pa.max(axis=0), pb.max(axis=0))
    if np.any(hi <= lo):
        overlap = 0.0
    else:
        u = lo + _sobol(n, 2, seed + 1) * (hi - lo)
        inter_area = float((_in_convex(pa, u) & _in_convex(pb, u)).mean()) * float(np.prod(hi - lo))
        overlap = min(1.0, inter_area / min(ConvexHull(pa).volume, ConvexHull(pb).volume))
    return {
        "overlap": overlap,
        "dz": delta_z(a, b),
        "vol_ratio": inter / min(va, vb),
        "align": abs(cos(np.asarray(a.axes)[0], np.asarray(b.axes)[0])),
        "left": mc_half_space_fraction(a, b, "left", n, seed + 2),
        "right": mc_half_space_fraction(a, b, "right", n, seed + 3),
        "dist": box_distance(a, b),
        "face": cos(a.front, np.asarray(b.center) - np.asarray(a.center)),
        "up_cos": cos(a.up_normal, b.up_normal),
    }


def predicate_set(q: dict, cfg) -> set[str]:
    out = set()
    if q["overlap"] > cfg.tau and q["dz"] <= cfg.epsilon:
        out.add("SupportedBy")
    if q["align"] > cfg.tau_dir or q["vol_ratio"] > cfg.tau_att:
        out.add("AttachedTo")
    if q["left"] > cfg.tau_left:
        out.add("LeftOf")
    if q["right"] > cfg.tau_right:
        out.add("RightOf")
    if q["dist"] <= cfg.t_near:
        out.add("Nearby")
    if q["face"] > cfg.tau_face:
        out.add("Faces")
    if q["overlap"] > cfg.tau and q["up_cos"] > cfg.epsilon_pp:
        out.add("OrientedWith")
    return out


def borderline(q: dict, cfg, rel_tol=0.02, abs_tol=1e-6) -> set[str]:
    """Predicates whose sampled quantity sits within the sampling tolerance of its threshold."""
    def near(v, t, sampled):
        tol = max(rel_tol * abs(t), abs_tol) if sampled else abs_tol
        return abs(v - t) <= tol

    out = set()
    if near(q["overlap"], cfg.tau, True) or near(q["dz"], cfg.epsilon, False):
        out |= {"SupportedBy", "OrientedWith"}
    if near(q["vol_ratio"], cfg.tau_att, True) or near(q["align"], cfg.tau_dir, False):
        out.add("AttachedTo")
    if near(q["left"], cfg.tau_left, True):
        out.add("LeftOf")
    if near(q["right"], cfg.tau_right, True):
        out.add("RightOf")
    if near(q["dist"], cfg.t_near, False):
        out.add("Nearby")
    if near(q["face"], cfg.tau_face, False):
        out.add("Faces")
    if near(q["up_cos"], cfg.epsilon_pp, False):
        out.add("OrientedWith")
    return out


# ---------------------------------------------------------------------------
# search, matching, spectra
# ---------------------------------------------------------------------------


def brute_knn(points, query, k):
    d = np.linalg.norm(np.asarray(points) - np.asarray(query), axis=1)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def spectral_radius_power(M, iters=5000, seed=0) -> float:
    """Largest |eigenvalue| of a symmetric matrix via power iteration on M^2."""
    rng = np.random.default_rng(seed)
    M2 = M @ M
    v = rng.standard_normal(M.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = M2 @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        lam_new = float(v @ M2 @ v)
        if abs(lam_new - lam) < 1e-15 * max(1.0, lam_new):
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(max(lam, 0.0))


def all_max_matchings(tokens_t, tokens_c):
    """Every category-respecting matching of maximum cardinality, as lists of (ti, ci) index pairs."""
    cats = sorted(set(tokens_t) & set(tokens_c))
    per_cat = []
    for c in cats:
        it = [k for k, t in enumerate(tokens_t) if t == c]
        ic = [k for k, t in enumerate(tokens_c) if t == c]
        opts = []
        if len(it) <= len(ic):
            for perm in itertools.permutations(ic, len(it)):
                opts.append(list(zip(it, perm)))
        else:
            for perm in itertools.permutations(it, len(ic)):
                opts.append(list(zip(perm, ic)))
        per_cat.append(opts)
    for combo in itertools.product(*per_cat):
        yield [p for part in combo for p in part]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def relation_loss_formula(r, a, b, q, w, cfg):
    """Relation loss written out from its definition, fed by ``predicate_quantities``."""
    R = RelationType
    if r is R.SUPPORTED_BY:
        d_ce = float(np.hypot(*(np.asarray(a.center)[:2] - np.asarray(b.center)[:2])))
        scale = math.sqrt(min(hull_area_xy(a), hull_area_xy(b)))
        return w.lambda1 * max(0.0, d_ce / scale - cfg.tau) + w.lambda2 * abs(q["dz"] - cfg.epsilon)
    if r is R.ATTACHED_TO:
        return w.mu_attach * (1 - max(q["vol_ratio"], q["align"])) ** 2
    if r is R.LEFT_OF:
        return w.alpha_left * (1 - q["left"]) ** 2
    if r is R.RIGHT_OF:
        return w.alpha_right * (1 - q["right"]) ** 2
    if r is R.NEARBY:
        return w.nu * max(0.0, q["dist"] - cfg.t_near)
    if r is R.FACES:
        return w.gamma * (1 - q["face"]) ** 2
    return w.rho1 * max(0.0, cfg.tau - q["overlap"]) + w.rho2 * max(0.0, cfg.epsilon_pp - q["up_cos"])


def topology_candidates(gt, gc, params, w):
    """Topology loss under every minimum-cost exhaustive matching (ties give several values)."""
    from orgsynth.embed import encode_graph

    zt, zc = encode_graph(gt, params), encode_graph(gc, params)
    D = ((zt.vectors[:, None, :] - zc.vectors[None, :, :]) ** 2).sum(-1)
    results = []
    for pairs in all_max_matchings(zt.tokens, zc.tokens):
        sub = sum(D[i, j] for i, j in pairs)
        mt, mc = {i for i, _ in pairs}, {j for _, j in pairs}
        ut = [i for i in range(len(zt.tokens)) if i not in mt]
        uc = [j for j in range(len(zc.tokens)) if j not in mc]
        n = len(pairs) + len(ut) + len(uc)
        pos_t = {gt.nodes[i].node_id: k for k, (i, _) in enumerate(pairs)}
        pos_t.update({gt.nodes[i].node_id: len(pairs) + k for k, i in enumerate(ut)})
        pos_c = {gc.nodes[j].node_id: k for k, (_, j) in enumerate(pairs)}
        pos_c.update({gc.nodes[j].node_id: len(pairs) + len(ut) + k for k, j in enumerate(uc)})
        At, Ac = np.zeros((n, n)), np.zeros((n, n))
        for e in gt.real_edges:
            At[pos_t[e.src], pos_t[e.dst]] = 1
        for e in gc.real_edges:
            Ac[pos_c[e.src], pos_c[e.dst]] = 1
        results.append((sub, w.lambda_ins * len(ut) + w.lambda_del * len(uc) + w.lambda_sub * sub
                        + w.lambda_struct * np.sqrt(((At - Ac) ** 2).sum())))
    best = min(s for s, _ in results)
    return [v for s, v in results if s <= best + 1e-9]


def replay_node_sample(stats, cfg, rng):
    """Re-draw the Gaussian attempts and pick per the JS rule, with scipy's divergence."""
    from scipy.spatial.distance import jensenshannon

    from orgsynth.org import _sampling_plan

    cats, mu, sigma, loc = _sampling_plan(stats, cfg)
    ref = mu / mu.sum()
    best = None
    for attempt in range(cfg.max_resamples + 1):
        x = loc + sigma * rng.standard_normal(len(cats))
        counts = np.floor(np.maximum(0.0, np.where(np.isfinite(x), x, 0.0)) + 0.5)
        js = 1.0 if counts.sum() == 0 else jensenshannon(counts / counts.sum(), ref, base=2) ** 2
        if best is None or js < best[1] - 1e-12:
            best = (counts, js)
        if js <= cfg.js_threshold:
            return counts, js, "threshold"
    return best[0], best[1], "best_of"
