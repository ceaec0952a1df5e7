"""Write a procedural labeled-room corpus (PLY per scene plus manifest.json)."""
import argparse

from orgsynth.fixtures import make_corpus, write_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--density", type=float, default=150.0, help="surface points per square metre")
    args = ap.parse_args()
    manifest = write_corpus(args.out, make_corpus(args.scenes, seed=args.seed, density=args.density))
    print(f"{args.scenes} scenes, manifest {manifest}")


if __name__ == "__main__":
    main()
