"""Corpus -> repository -> statistics -> synthesized scenes -> validation report, in one go.

Example:
    python3 scripts/run_pipeline.py work --scenes 10 --count 20 --set optimizer.max_iters=200
"""
import argparse
import json
import sys
import time
from pathlib import Path

from orgsynth.cli import main as cli
from orgsynth.fixtures import make_corpus, write_corpus


def step(label, argv):
    t0 = time.perf_counter()
    rc = cli(argv)
    print(f"[{label}] exit {rc} in {time.perf_counter() - t0:.1f} s")
    if rc == 2:
        sys.exit(rc)
    return rc


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("work", help="working directory")
    ap.add_argument("--scenes", type=int, default=10, help="procedural source scenes")
    ap.add_argument("--count", type=int, default=10, help="scenes to synthesize")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--complete", action="store_true", help="run boundary completion (slow: ~30 s per scene)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    work = Path(args.work)
    write_corpus(work / "corpus", make_corpus(args.scenes, seed=args.seed))
    common = [x for o in args.overrides for x in ("--set", o)]
    step("decompose", common + ["decompose", str(work / "corpus"), "--out", str(work / "repo")]
         + ([] if args.complete else ["--no-complete"]))
    step("stats", common + ["stats", str(work / "repo"), "--out", str(work / "stats.json")])
    step("synthesize", common + ["synthesize", str(work / "repo"), str(work / "stats.json"), "--out",
                                 str(work / "synth"), "--count", str(args.count), "--seed", str(args.seed)])
    step("validate", ["validate", str(work / "synth"), "--out", str(work / "report.json")])
    agg = json.loads((work / "report.json").read_text())["aggregate"]
    print(json.dumps({k: agg[k] for k in ("scenes", "js_divergence", "mean_satisfaction",
                                          "collision_free_fraction", "edge_realization", "flagged")}, indent=2))


if __name__ == "__main__":
    main()
