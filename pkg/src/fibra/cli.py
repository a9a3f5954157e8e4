"""Command line entry point: ``fibra <subcommand> ...``.

Exit status is 0 on success, 2 on invalid input (bad flags, unreadable or
malformed files, parameter validation) and 1 on runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import FibraError, ValidationError

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _config(args) -> pipeline.RunConfig:
    """Config file (if any) with command line flags layered on top."""
    base = pipeline.RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    over = {}
    for section, key, attr in FLAG_MAP:
        value = getattr(args, attr, None)
        if value is not None:
            if section is None:
                over[key] = value
            else:
                over.setdefault(section, {})[key] = value
    for key, value in over.items():
        if isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return pipeline.RunConfig.from_dict(base)


# (config section, key, argparse dest)
FLAG_MAP = [
    (None, "seed", "seed"),
    (None, "output_dir", "out_dir"),
    ("simulate", "preset", "preset"),
    ("simulate", "dims", "dims"),
    ("simulate", "radius", "radius"),
    ("simulate", "length", "length"),
    ("simulate", "volume_fraction", "fraction"),
    ("simulate", "max_attempts", "max_attempts"),
    ("simulate", "blur_sigma", "blur"),
    ("simulate", "noise_sigma", "noise"),
    ("dirfield", "sigma", "sigma"),
    ("dirfield", "cube_edge", "cube"),
    ("dirfield", "threshold", "threshold"),
    ("dirfield", "min_voxels", "min_voxels"),
    ("features", "mode", "mode"),
    ("features", "w", "window"),
    ("features", "stride", "stride"),
    ("features", "n_min", "n_min"),
    ("features", "standardize", "standardize"),
    ("features", "metric", "metric"),
    ("features", "log_c1", "log_c1"),
    ("cluster", "method", "method"),
    ("cluster", "k_init", "k_init"),
    ("cluster", "max_iter", "max_iter"),
    ("cluster", "beta", "beta"),
    ("cluster", "restarts", "restarts"),
    ("cluster", "eps_lab", "eps_lab"),
    ("cluster", "lam", "lam"),
    ("cluster", "lambda_preset", "lambda_preset"),
    ("cluster", "growth", "growth"),
    ("cluster", "n0", "n0"),
]


def _cmd_simulate(args):
    return [pipeline.simulate(_config(args), args.out)]


def _cmd_dirfield(args):
    return [pipeline.dirfield(_config(args), args.volume, args.out)]


def _cmd_features(args):
    return [pipeline.extract(_config(args), args.directions, args.out)]


def _cmd_sem(args):
    return [pipeline.cluster_sem(_config(args), args.features, args.out, args.mixture)]


def _cmd_awc(args):
    cfg = _config(args)
    return [pipeline.cluster_awc(cfg, args.features, args.out, args.edges)]


def _cmd_evaluate(args):
    features_json = None
    if args.features:
        features_json = Path(args.features).with_suffix(".json")
    return [pipeline.evaluate(args.pred, args.out, args.truth, args.system, features_json,
                              args.truth_out)]


def _cmd_export_vtk(args):
    return [pipeline.export_vtk(args.out, args.labels, args.features)]


def _cmd_pipeline(args):
    cfg = _config(args)
    return pipeline.run(cfg, args.out_dir)


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


def build_parser():
    p = argparse.ArgumentParser(prog="fibra", description="Anomaly detection in 3D fibre images")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run manifest JSON; flags override it")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("simulate", help="layered RSA fibre volume with ground truth")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--preset", choices=["rotated", "dispersed", "homogeneous"])
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--length", type=float)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--max-attempts", type=int)
    sp.add_argument("--blur", type=float)
    sp.add_argument("--noise", type=float)
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("dirfield", help="Hessian direction field per cube")
    common(sp)
    sp.add_argument("--volume", required=True, help="raw u8 volume (JSON sidecar alongside)")
    sp.add_argument("--out", required=True, help="direction CSV")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--cube", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--min-voxels", type=int)
    sp.set_defaults(func=_cmd_dirfield)

    sp = sub.add_parser("features", help="window attributes")
    common(sp)
    sp.add_argument("--directions", required=True)
    sp.add_argument("--out", required=True, help="feature CSV")
    sp.add_argument("--mode", choices=["entropy", "mean_dir", "both"])
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--n-min", type=int)
    sp.add_argument("--standardize", type=_bool)
    sp.add_argument("--metric", choices=["axial", "spherical"])
    sp.add_argument("--log-c1", type=float)
    sp.set_defaults(func=_cmd_features)

    sp = sub.add_parser("cluster-sem", help="spatial stochastic EM")
    common(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True, help="label CSV")
    sp.add_argument("--mixture", help="fitted mixture JSON")
    sp.add_argument("--k-init", type=int)
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--eps-lab", type=float)
    sp.set_defaults(func=_cmd_sem)

    sp = sub.add_parser("cluster-awc", help="adaptive weights clustering")
    common(sp)
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True, help="label CSV")
    sp.add_argument("--edges", help="final weight graph as i,j edge list")
    sp.add_argument("--lam", type=float, help="overrides the lambda preset")
    sp.add_argument("--lambda-preset", choices=["rsa", "real"])
    sp.add_argument("--growth", type=float)
    sp.add_argument("--n0", type=int)
    sp.set_defaults(func=_cmd_awc)

    sp = sub.add_parser("evaluate", help="compare labels with ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", help="ground-truth label CSV")
    sp.add_argument("--system", help="system.json from simulate (with --features)")
    sp.add_argument("--features", help="feature CSV defining the window grid")
    sp.add_argument("--truth-out", help="write derived ground-truth labels here")
    sp.add_argument("--out", required=True, help="report JSON")
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("export-vtk", help="legacy VTK export of labels/features")
    sp.add_argument("--labels")
    sp.add_argument("--features")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_export_vtk)

    sp = sub.add_parser("pipeline", help="all stages from one config")
    common(sp)
    sp.add_argument("--out-dir")
    sp.add_argument("--method", choices=["sem", "awc"])
    sp.add_argument("--mode", choices=["entropy", "mean_dir", "both"])
    sp.set_defaults(func=_cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        lines = args.func(args)
    except ValidationError as exc:
        print(f"fibra: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FibraError, OSError, RuntimeError, MemoryError) as exc:
        print(f"fibra: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in lines:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
