"""Command line front end: precompute, run, compare, check."""

import argparse
import logging
import os
import sys


def _add_common(parser, multi_solver=False):
    parser.add_argument("--scene", required=True, help="scene file (TOML)")
    parser.add_argument("--out", default=None, help="output directory")
    if multi_solver:
        parser.add_argument("--solver", action="append", default=None,
                            help="solver tag (repeatable): newton, jgs2_exact, "
                                 "jgs2_cubature, plain_local")
    else:
        parser.add_argument("--solver", default=None,
                            help="solver tag: newton, jgs2_exact, "
                                 "jgs2_cubature, plain_local")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scene's sampling seed")
    parser.add_argument("--no-cache", action="store_true",
                        help="ignore and do not write the precomputation cache")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tetsolve",
        description="Implicit-Euler FEM elastodynamics with globally aware "
                    "per-vertex block solves")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("precompute", help="build bases and Cubature sets"))
    _add_common(sub.add_parser("run", help="time-step a scene"))
    _add_common(sub.add_parser("compare", help="compare solvers against a "
                                               "Newton reference"), multi_solver=True)
    _add_common(sub.add_parser("check", help="run the scene invariant suite"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    # Import after the thread caps so BLAS picks them up.
    from . import harness
    from .mesh import MeshError
    from .scene import SceneError, parse_scene

    try:
        scene = parse_scene(args.scene)
    except (SceneError, MeshError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_USAGE

    out_dir = args.out or (scene.output or f"out/{scene.name}")
    use_cache = not args.no_cache
    try:
        if args.command == "precompute":
            model = harness.build_model(scene)
            runtime = harness.prepare(model, scene, use_cache=use_cache,
                                      seed=args.seed)
            sizes = [len(runtime.cubature_sets[v].elements)
                     for v in runtime.cubature_sets]
            print(f"{scene.name}: {len(runtime.bases)} sub-problem bases, "
                  f"mean cubature size "
                  f"{sum(sizes) / max(len(sizes), 1):.1f}, "
                  f"{'cache hit' if runtime.info.get('cache_hit') else 'trained'}")
            return harness.EXIT_OK
        if args.command == "run":
            return harness.run(scene, out_dir, seed=args.seed,
                               use_cache=use_cache, solver_tag=args.solver)
        if args.command == "compare":
            tags = args.solver or ["newton", "jgs2_cubature", "plain_local"]
            return harness.compare(scene, tags, out_dir, seed=args.seed,
                                   use_cache=use_cache)
        if args.command == "check":
            return harness.check(scene, seed=args.seed, use_cache=use_cache)
    except (SceneError, MeshError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_USAGE
    return harness.EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
