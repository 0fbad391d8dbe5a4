"""Command-line front end: run scenarios, inspect meshes, emit configs.

Three subcommands: ``simulate`` runs a scenario file and writes per-stage
artifacts, ``mesh-info`` prints a summary of a mesh file, and ``case41``
writes a ready-to-run scenario file for the built-in vertical-producer
convergence case at a chosen refinement level.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .io import CheckpointError, ConfigError, DiscreteProblem, \
    builtin_case41, describe_problem, load_scenario, run_scenario, \
    save_scenario
from .mesh import MeshFormatError, MeshValidationError, load_dfm_mesh
from .solver import SimulationAbort


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geovag",
        description="liquid-vapor flow simulation in fractured porous "
                    "media with multi-branch wells")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario file")
    sim.add_argument("--config", required=True, metavar="PATH",
                     help="scenario file to run")
    sim.add_argument("--stage", type=int, default=None, metavar="N",
                     help="stop after stage N (1-based; default: all)")
    sim.add_argument("--threads", type=int, default=1, metavar="N",
                     help="worker threads (orchestration is currently "
                          "single-process; values > 1 are accepted and "
                          "reserved)")
    sim.add_argument("--output", default=None, metavar="DIR",
                     help="artifact directory (default: ./<title>)")
    sim.add_argument("--dry-run", action="store_true",
                     help="validate the config and print problem sizes "
                          "without solving")
    sim.add_argument("--checkpoint-from", default=None, metavar="PATH",
                     help="resume from a checkpoint written by an "
                          "earlier run of the same scenario")

    info = sub.add_parser("mesh-info", help="summarize a mesh file")
    info.add_argument("path", metavar="PATH", help="mesh file to inspect")

    gen = sub.add_parser(
        "case41", help="write the built-in two-stage vertical-producer "
                       "scenario file")
    gen.add_argument("--level", type=int, required=True, metavar="N",
                     help="mesh refinement level, 1 (coarsest) to 4")
    gen.add_argument("--output", default=".", metavar="DIR",
                     help="directory for the scenario file (default: .)")
    return parser


def _cmd_simulate(args) -> int:
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        config = load_scenario(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.stage is not None \
            and not 1 <= args.stage <= len(config.stages):
        print(f"error: --stage must be in 1..{len(config.stages)} for "
              f"this scenario, got {args.stage}", file=sys.stderr)
        return 2
    try:
        if args.dry_run:
            print(describe_problem(DiscreteProblem.build(config)))
            return 0
        outdir = Path(args.output) if args.output is not None \
            else Path.cwd() / config.title
        summary = run_scenario(config, outdir, stage_limit=args.stage,
                               checkpoint_from=args.checkpoint_from,
                               progress=print)
    except (ConfigError, CheckpointError, MeshFormatError,
            MeshValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimulationAbort as exc:
        print(f"aborted: {exc} (checkpoint written)", file=sys.stderr)
        return 1
    if not summary.stages:
        print("nothing to do: the checkpoint already covers the "
              "requested stages")
    return 0


def _cmd_mesh_info(args) -> int:
    try:
        mesh = load_dfm_mesh(args.path)
    except (OSError, MeshFormatError, MeshValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sizes = [len(cn) for cn in mesh.cell_nodes]
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    print(f"nodes: {mesh.n_nodes}")
    print(f"cells: {mesh.n_cells} "
          f"(hexahedra: {sizes.count(8)}, tetrahedra: {sizes.count(4)})")
    print(f"faces: {mesh.n_faces}")
    print(f"fracture faces: {mesh.n_fracture_faces}")
    print(f"bounding box: [{lo[0]:g}, {hi[0]:g}] x [{lo[1]:g}, {hi[1]:g}]"
          f" x [{lo[2]:g}, {hi[2]:g}] m")
    for tag in sorted(mesh.node_groups):
        print(f"node group '{tag}': {len(mesh.group(tag))} nodes")
    for geometry in mesh.wells:
        print(f"well '{geometry.name}': {geometry.n_nodes} nodes, "
              f"radius {geometry.radius:g} m")
    return 0


def _cmd_case41(args) -> int:
    try:
        config = builtin_case41(args.level)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{config.title}.ini"
    save_scenario(config, path)
    print(path)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "mesh-info":
        return _cmd_mesh_info(args)
    return _cmd_case41(args)


if __name__ == "__main__":
    sys.exit(main())
