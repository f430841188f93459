"""Command-line driver: convergence studies, mesh inspection, property checks."""

import argparse
import logging
import sys

from .errors import HHOFlowError


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hho-flow",
        description="Hybrid high-order incompressible flow solver on polygonal meshes",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_study = sub.add_parser("study", help="run a manufactured-solution study")
    p_study.add_argument("--config", required=True, help="flat key = value file")

    p_info = sub.add_parser("mesh-info", help="print mesh statistics")
    p_info.add_argument("path", help="poly-text mesh file")

    sub.add_parser("verify", help="run the operator property suite")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "study":
            from .harness import parse_config, run_convergence_study
            reports = run_convergence_study(parse_config(args.config))
            return 0 if all(r.status == "ok" for r in reports) else 1
        if args.command == "mesh-info":
            from .mesh import load_mesh, mesh_info
            info = mesh_info(load_mesh(args.path))
            width = max(len(k) for k in info)
            for key, value in info.items():
                print(f"{key:<{width}}  {value}")
            return 0
        if args.command == "verify":
            from .harness import verify
            return 0 if verify() else 1
    except HHOFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
