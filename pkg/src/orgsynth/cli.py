"""Command line pipeline: decompose, stats, sample-graph, synthesize, validate.

Exit codes: 0 success, 1 partial failure (too many failed scenes, or
validation mismatches), 2 input or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .decompose import (
    CategoryTaxonomy,
    DecomposeError,
    LabeledInstance,
    SceneRepository,
    complete_boundaries,
    load_repository,
    partition_scene,
    save_repository,
)
from .geometry import GeometryError, PlaneModel, PointCloud
from .layout import LayoutState
from .losses import LossError, total_loss
from .optimize import OptimizeError, synthesize_scene
from .org import (
    FLOOR_NODE,
    WALL_NODE,
    EmptyStats,
    ObjectRelationshipGraph,
    build_target_graph,
    graph_of_layout,
    js_divergence,
)
from .plyio import PlyFormatError, read_ply, write_ply
from .relations import RelationStats, collect_stats, relation_holds
from .serialization import (
    FORMAT_VERSION,
    atomic_write_json,
    obb_from_dict,
    obb_to_dict,
    pose_from_dict,
    pose_to_dict,
)

log = logging.getLogger("orgsynth")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2
MANIFEST_NAME = "manifest.json"
POINT_TOL = 1e-3  # metres; PLY coordinates are float32


class InputError(Exception):
    """Bad input or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _read_json(path) -> dict:
    import json

    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _with_path(path, exc) -> str:
    msg = str(exc)
    return msg if str(path) in msg else f"{path}: {msg}"


def _load_repo(path) -> SceneRepository:
    try:
        return load_repository(path)
    except (OSError, DecomposeError) as exc:
        raise InputError(str(exc)) from exc


def _load_stats(path) -> RelationStats:
    try:
        return RelationStats.from_json(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed statistics ({exc})") from exc


def _taxonomy_for(repo_dir, cfg: PipelineConfig) -> CategoryTaxonomy | None:
    for cand in (Path(repo_dir) / MANIFEST_NAME, cfg.manifest):
        if cand and Path(cand).is_file():
            try:
                return CategoryTaxonomy.from_manifest(_read_json(cand))
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{cand}: malformed manifest ({exc})") from exc
    return None


def parse_boosts(items, taxonomy: CategoryTaxonomy | None) -> dict[int, float]:
    """``name=factor`` or ``id=factor`` pairs to {category id: factor}."""
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise InputError(f"--gt-boost expects category=factor, got {item!r}")
        try:
            factor = float(val)
        except ValueError:
            raise InputError(f"--gt-boost factor {val!r} is not a number") from None
        if not factor > 0:
            raise InputError("--gt-boost factors must be positive")
        if key.lstrip("-").isdigit():
            cat = int(key)
        elif taxonomy is not None:
            try:
                cat = taxonomy.category_id(key)
            except KeyError:
                raise InputError(f"--gt-boost: unknown category name {key!r}") from None
        else:
            raise InputError(f"--gt-boost: no manifest to resolve category name {key!r}")
        out[cat] = factor
    return out


def scene_count_for(n_source_scenes: int, count: int | None, ratio: float | None) -> int:
    if count is not None:
        if count < 0:
            raise InputError("--count must be non-negative")
        return count
    if not ratio > 0:
        raise InputError("augmentation ratio must be positive")
    return int(math.floor(ratio * n_source_scenes + 0.5))


# ---------------------------------------------------------------------------
# decompose / stats / sample-graph
# ---------------------------------------------------------------------------


def cmd_decompose(args, cfg: PipelineConfig) -> int:
    in_dir = Path(args.input)
    manifest = args.manifest or cfg.manifest or (in_dir / MANIFEST_NAME)
    try:
        taxonomy = CategoryTaxonomy.from_manifest(_read_json(manifest))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{manifest}: malformed manifest ({exc})") from exc
    files = sorted(in_dir.glob("*.ply"))
    if not files:
        raise InputError(f"no .ply scenes in {in_dir}")
    repo = SceneRepository()
    per_scene = []
    for k, path in enumerate(files):
        try:
            scene = read_ply(path)
        except (PlyFormatError, OSError) as exc:
            raise InputError(_with_path(path, exc)) from exc
        scene.name = path.stem
        try:
            part = partition_scene(scene, taxonomy)
        except DecomposeError as exc:
            raise InputError(f"{path}: {exc!r}") from exc
        added = 0
        if not args.no_complete:
            try:
                added = complete_boundaries(part, scene.cloud, cfg.completion, cfg.seed + k)
            except (DecomposeError, GeometryError) as exc:
                log.warning("%s: boundary completion skipped (%s)", path.name, exc)
        row = {"scene": path.stem, "floors": len(part.floors), "backgrounds": len(part.backgrounds),
               "foregrounds": len(part.foregrounds), "completed_points": added}
        per_scene.append(row)
        print(f"{path.stem}: floor={row['floors']} background={row['backgrounds']} "
              f"foreground={row['foregrounds']} completed={added}")
        repo = repo.merge(part)
    out = Path(args.out)
    save_repository(repo, out)
    atomic_write_json(out / MANIFEST_NAME, taxonomy.to_manifest())
    atomic_write_json(out / "decompose_log.json", {
        "version": FORMAT_VERSION, "config_hash": cfg.hash(), "completion": not args.no_complete,
        "scenes": per_scene,
    })
    return EXIT_OK


def cmd_stats(args, cfg: PipelineConfig) -> int:
    repo = _load_repo(args.repo)
    stats = collect_stats(repo.split_by_scene(), cfg.thresholds)
    if stats.is_empty():
        raise InputError(repr(EmptyStats("no relation observations in the repository")))
    doc = stats.to_json()
    doc["config_hash"] = cfg.hash()
    atomic_write_json(args.out, doc)
    print(f"{stats.scene_count} scenes, {len(stats.relation_counts)} category pairs -> {args.out}")
    return EXIT_OK


def cmd_sample_graph(args, cfg: PipelineConfig) -> int:
    stats = _load_stats(args.stats)
    if stats.is_empty():
        raise InputError(repr(EmptyStats("statistics contain no pairs")))
    sampling = cfg.sampling
    if args.gt_boost:
        sampling.gt_boost = {**sampling.gt_boost, **parse_boosts(args.gt_boost, _taxonomy_for(
            Path(args.stats).parent, cfg))}
    out = Path(args.out)
    for k in range(args.count):
        g = build_target_graph(stats, sampling, cfg.seed + k)
        doc = g.to_json()
        doc["seed"] = cfg.seed + k
        doc["config_hash"] = cfg.hash()
        atomic_write_json(out / f"graph_{k:05d}.json", doc)
    print(f"{args.count} graphs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------


def sidecar_for(res, name: str, cfg: PipelineConfig, stats: RelationStats) -> dict:
    lay = res.result.final_layout
    plane = lay.floor_plane
    return {
        "version": FORMAT_VERSION,
        "name": name,
        "ply": f"{name}.ply",
        "seed": res.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "floor": None if lay.floor is None else {
            "instance_id": int(lay.floor.instance_id), "category": int(lay.floor.category_id),
            "obb": obb_to_dict(lay.floor.obb),
            "plane": None if plane is None else {"normal": plane.normal.tolist(), "offset": float(plane.offset),
                                                 "inlier_count": int(plane.inlier_count)},
        },
        "background": [{"instance_id": int(b.instance_id), "category": int(b.category_id),
                        "obb": obb_to_dict(b.obb)} for b in lay.background],
        "dynamics": [{"instance_id": int(inst.instance_id), "category": int(inst.category_id),
                      "source_scene": inst.source_scene, "source_obb": obb_to_dict(inst.obb),
                      "pose": pose_to_dict(pose)} for inst, pose in lay.dynamics],
        "binding": {str(k): int(v) for k, v in sorted(lay.binding.items())},
        "target": res.target.to_json(),
        "realized": res.realized.to_json(),
        "loss_trace": [t.as_dict() for t in res.result.loss_trace],
        "final": res.result.final.as_dict(),
        "converged": bool(res.result.converged),
        "stop_reason": res.result.stop_reason,
        "iterations_used": int(res.result.iterations_used),
        "accepted_steps": int(res.result.accepted_steps),
        "dataset_category_mean": {str(k): float(v) for k, v in sorted(stats.category_mean.items())},
    }


_WORKER: dict = {}


def _init_worker(repo_dir, stats_path, cfg_dict):
    _WORKER["repo"] = _load_repo(repo_dir)
    _WORKER["stats"] = _load_stats(stats_path)
    _WORKER["cfg"] = PipelineConfig.from_dict(cfg_dict)


def _synthesize_one(job) -> dict:
    k, seed, out_dir = job
    repo, stats, cfg = _WORKER["repo"], _WORKER["stats"], _WORKER["cfg"]
    name = f"scene_{k:05d}"
    try:
        res = synthesize_scene(stats, repo, cfg.synthesis(), seed, name)
    except (OptimizeError, LossError, GeometryError, ValueError) as exc:
        return {"name": name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    out = Path(out_dir)
    write_ply(out / f"{name}.ply", res.scene)
    atomic_write_json(out / f"{name}.json", sidecar_for(res, name, cfg, stats))
    return {"name": name, "seed": seed, "converged": bool(res.result.converged),
            "stop_reason": res.result.stop_reason, "final": res.result.final.as_dict()}


def cmd_synthesize(args, cfg: PipelineConfig) -> int:
    if args.ratio is not None:
        cfg.augmentation_ratio = args.ratio
    if args.gt_boost:
        cfg.sampling.gt_boost = {**cfg.sampling.gt_boost,
                                 **parse_boosts(args.gt_boost, _taxonomy_for(args.repo, cfg))}
    _init_worker(args.repo, args.stats, cfg.to_dict())
    repo, stats = _WORKER["repo"], _WORKER["stats"]
    if stats.is_empty():
        raise InputError(repr(EmptyStats("statistics contain no pairs")))
    n = scene_count_for(len(repo.scenes()), args.count, None if args.count is not None else cfg.augmentation_ratio)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(k, cfg.seed + k, str(out)) for k in range(n)]
    if args.jobs > 1 and n > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker,
                                 initargs=(args.repo, args.stats, cfg.to_dict())) as pool:
            rows = list(pool.map(_synthesize_one, jobs))
    else:
        rows = [_synthesize_one(j) for j in jobs]
    failed = [r for r in rows if "error" in r]
    for r in failed:
        log.error("%s (seed %s) failed: %s", r["name"], r["seed"], r["error"])
    ok = [r for r in rows if "error" not in r]
    agg = {key: float(np.mean([r["final"][key] for r in ok])) if ok else None
           for key in ("collision", "alignment", "semantic", "topology", "total")}
    atomic_write_json(out / "summary.json", {
        "version": FORMAT_VERSION, "config_hash": cfg.hash(), "base_seed": cfg.seed, "count": n,
        "succeeded": len(ok), "failed": len(failed), "not_converged": sum(not r["converged"] for r in ok),
        "mean_final": agg, "scenes": rows,
    })
    print(f"{len(ok)}/{n} scenes written to {out} ({len(failed)} failed)")
    if n and len(failed) > cfg.max_failure_fraction * n:
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _instance_cloud(scene, ply_id: int) -> PointCloud:
    sel = np.flatnonzero(scene.instances == ply_id)
    if len(sel) == 0:
        raise InputError(f"{scene.name}: instance {ply_id} has no points")
    return scene.cloud.subset(sel)


def layout_from_sidecar(side: dict, scene) -> LayoutState:
    """Rebuild the final layout from a sidecar and its baked PLY (instance ids as written by bake)."""
    ply_id = 0
    floor = None
    plane = None
    if side["floor"] is not None:
        f = side["floor"]
        floor = LabeledInstance(f["instance_id"], f["category"], _instance_cloud(scene, ply_id),
                                obb_from_dict(f["obb"]))
        if f.get("plane"):
            p = f["plane"]
            plane = PlaneModel(np.asarray(p["normal"], dtype=np.float64), p["offset"], p["inlier_count"])
        ply_id += 1
    background = []
    for b in side["background"]:
        background.append(LabeledInstance(b["instance_id"], b["category"], _instance_cloud(scene, ply_id),
                                          obb_from_dict(b["obb"])))
        ply_id += 1
    dynamics = []
    for d in side["dynamics"]:
        inst = LabeledInstance(d["instance_id"], d["category"], _instance_cloud(scene, ply_id),
                               obb_from_dict(d["source_obb"]), d.get("source_scene", ""))
        dynamics.append((inst, pose_from_dict(d["pose"])))
        ply_id += 1
    binding = {int(k): int(v) for k, v in side["binding"].items()}
    return LayoutState(floor, background, dynamics, binding, plane)


def _edge_boxes(layout: LayoutState, node_id: int):
    if node_id in layout.binding:
        return [layout.obb(layout.binding[node_id])]
    if node_id == FLOOR_NODE:
        return [layout.floor.obb] if layout.floor is not None else []
    if node_id == WALL_NODE:
        return layout.walls()
    return []


def validate_scene(side: dict, scene, cfg: PipelineConfig) -> dict:
    layout = layout_from_sidecar(side, scene)
    target = ObjectRelationshipGraph.from_json(side["target"])
    anchors = {n.anchor: n.category_id for n in target.nodes if n.anchor}
    realized = graph_of_layout(layout, cfg.thresholds, anchors.get("floor"), anchors.get("wall"))
    stored = ObjectRelationshipGraph.from_json(side["realized"])
    problems = []
    if not realized.same_as(stored):
        problems.append("realized graph differs from sidecar")
    # dynamic points must sit inside their posed boxes
    n_static = (side["floor"] is not None) + len(side["background"])
    outside = 0
    for k, (inst, _) in enumerate(layout.dynamics):
        box = layout.obb(k)
        local = np.abs(box.to_local(inst.cloud.points)) - box.half_extents
        outside += int(np.sum(np.any(local > POINT_TOL, axis=1)))
    if outside:
        problems.append(f"{outside} dynamic points lie outside their posed boxes")
    losses = total_loss(layout, target, cfg.loss_weights(), cfg.thresholds, cfg.encoder, current=realized)
    stored_total = side["final"]["total"]
    if abs(losses.total - stored_total) > 1e-6 * max(1.0, abs(stored_total)):
        problems.append(f"recomputed total {losses.total:.6g} differs from sidecar {stored_total:.6g}")
    per_rel: dict[str, list[int]] = {}
    sat = 0
    edges = target.real_edges
    for e in edges:
        srcs, dsts = _edge_boxes(layout, e.src), _edge_boxes(layout, e.dst)
        ok = any(relation_holds(e.relation, a, b, cfg.thresholds) for a in srcs for b in dsts)
        sat += ok
        rec = per_rel.setdefault(e.relation.label, [0, 0])
        rec[0] += ok
        rec[1] += 1
    return {
        "name": side["name"],
        "seed": side["seed"],
        "static_instances": n_static,
        "losses": losses.as_dict(),
        "collision_residual": losses.collision,
        "satisfaction_rate": sat / len(edges) if edges else 1.0,
        "edge_counts": per_rel,
        "category_histogram": {str(k): v for k, v in sorted(target.category_histogram().items())},
        "realized_matches": not any("realized" in p for p in problems),
        "problems": problems,
    }


def aggregate_report(rows: list[dict], dataset_mean: dict[int, float] | None) -> dict:
    hist = Counter()
    per_rel: dict[str, list[int]] = {}
    for r in rows:
        for k, v in r["category_histogram"].items():
            hist[int(k)] += v
        for lab, (ok, tot) in r["edge_counts"].items():
            rec = per_rel.setdefault(lab, [0, 0])
            rec[0] += ok
            rec[1] += tot
    js = None
    if dataset_mean and hist:
        cats = sorted(set(hist) | set(dataset_mean))
        p = np.array([hist.get(c, 0) for c in cats], dtype=np.float64)
        q = np.array([dataset_mean.get(c, 0.0) for c in cats], dtype=np.float64)
        if p.sum() > 0 and q.sum() > 0:
            js = js_divergence(p / p.sum(), q / q.sum())
    return {
        "scenes": len(rows),
        "category_histogram": {str(k): v for k, v in sorted(hist.items())},
        "js_divergence": js,
        "edge_realization": {lab: ok / tot for lab, (ok, tot) in sorted(per_rel.items()) if tot},
        "mean_satisfaction": float(np.mean([r["satisfaction_rate"] for r in rows])) if rows else None,
        "collision_free_fraction": float(np.mean([r["collision_residual"] < 1e-4 for r in rows])) if rows else None,
        "flagged": sorted(r["name"] for r in rows if r["problems"]),
    }


def cmd_validate(args, cfg: PipelineConfig) -> int:
    scene_dir = Path(args.scenes)
    if not scene_dir.is_dir():
        raise InputError(f"{scene_dir} is not a directory")
    sidecars = sorted(p for p in scene_dir.glob("*.json") if p.name != "summary.json")
    if not sidecars:
        raise InputError(f"no sidecars in {scene_dir}")
    rows, dataset_mean = [], None
    for path in sidecars:
        side = _read_json(path)
        if side.get("version") != FORMAT_VERSION or "dynamics" not in side:
            raise InputError(f"{path}: not a scene sidecar")
        # thresholds/weights come from the run unless overridden on this command line
        run_cfg = cfg if args.use_cli_config else PipelineConfig.from_dict(side["config"])
        try:
            scene = read_ply(scene_dir / side["ply"])
        except (PlyFormatError, OSError) as exc:
            raise InputError(_with_path(scene_dir / side["ply"], exc)) from exc
        scene.name = side["name"]
        try:
            rows.append(validate_scene(side, scene, run_cfg))
        except (KeyError, TypeError, ValueError, GeometryError) as exc:
            raise InputError(f"{path}: malformed sidecar ({exc})") from exc
        if dataset_mean is None:
            dataset_mean = {int(k): float(v) for k, v in side.get("dataset_category_mean", {}).items()}
    report = {"version": FORMAT_VERSION, "config_hash": cfg.hash(),
              "aggregate": aggregate_report(rows, dataset_mean), "scenes": rows}
    atomic_write_json(args.out, report)
    flagged = report["aggregate"]["flagged"]
    print(f"{len(rows)} scenes validated, {len(flagged)} flagged -> {args.out}")
    for name in flagged:
        row = next(r for r in rows if r["name"] == name)
        print(f"  {name}: " + "; ".join(row["problems"]), file=sys.stderr)
    return EXIT_PARTIAL if flagged else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orgsynth", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="pipeline config JSON")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted config override, e.g. optimizer.max_iters=200 (repeatable)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split labeled PLY scenes into an instance repository")
    p.add_argument("input", help="directory of labeled .ply scenes")
    p.add_argument("--manifest", help="category manifest (default: <input>/manifest.json)")
    p.add_argument("--out", required=True, help="repository directory")
    p.add_argument("--no-complete", action="store_true", help="skip floor/background completion")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("stats", help="relation statistics of a repository")
    p.add_argument("repo")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sample-graph", help="sample target relationship graphs")
    p.add_argument("stats")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, help="base seed (graph k uses seed + k)")
    p.add_argument("--gt-boost", action="append", default=[], metavar="CATEGORY=FACTOR")
    p.set_defaults(func=cmd_sample_graph)

    p = sub.add_parser("synthesize", help="synthesize scenes with sidecars")
    p.add_argument("repo")
    p.add_argument("stats")
    p.add_argument("--out", required=True)
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--count", type=int)
    grp.add_argument("--ratio", type=float, help="scenes as a fraction of the source scene count")
    p.add_argument("--seed", type=int, help="base seed (scene k uses seed + k)")
    p.add_argument("--gt-boost", action="append", default=[], metavar="CATEGORY=FACTOR")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("validate", help="recompute relations and losses of synthesized scenes")
    p.add_argument("scenes", help="directory written by synthesize")
    p.add_argument("--out", required=True)
    p.add_argument("--use-cli-config", action="store_true",
                   help="validate with this command's config instead of each sidecar's")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        return args.func(args, cfg)
    except (InputError, ConfigError) as exc:
        print(f"orgsynth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
