"""Command line front end: mesh generation, scripted benchmarks, verification.

Exit codes: 0 success, 1 solver failure or failed verification, 2 usage.
"""

import argparse
import os
import sys
import warnings

import numpy as np

from . import engine
from .cutting import (
    ScriptError,
    default_script,
    generate_beam,
    generate_brick,
    load_script,
    run_script,
    summary_line,
    write_breakdown_csv,
    write_records_csv,
)
from .fem import load_mesh, save_mesh

__all__ = ["main"]


def _mesh_from_spec(spec):
    if spec.startswith("beam:"):
        return generate_beam(int(spec.split(":", 1)[1]))
    if spec.startswith("brick:"):
        return generate_brick(int(spec.split(":", 1)[1]))
    if os.path.exists(spec):
        return load_mesh(spec)
    raise ValueError(f"mesh spec {spec!r} is not beam:H, brick:L, or an existing file")


def _cmd_gen(args):
    mesh = _mesh_from_spec(args.meshspec)
    save_mesh(mesh, args.out)
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_tets} tets, "
          f"{mesh.n_free} free DOFs")
    return 0


def _cmd_bench(args):
    mesh = _mesh_from_spec(args.mesh)
    if args.script:
        actions = load_script(args.script)
    else:
        actions = default_script(mesh, args.experiment, steps=args.steps)
    try:
        res = run_script(
            mesh, actions, solver=args.solver, reps=args.reps,
            general_forces=args.general_forces, cg_rel_tol=args.cg_tol,
            compare_oracle=args.compare == "oracle", threads=args.threads,
        )
    except ScriptError as exc:
        print(f"solver failed at step {exc.step}: {exc.cause}", file=sys.stderr)
        return 1
    write_records_csv(res.records, args.out)
    base, ext = os.path.splitext(args.out)
    breakdown = f"{base}_breakdown{ext or '.csv'}"
    write_breakdown_csv(res.records, breakdown)
    print(summary_line(res.summary))
    print(f"wrote {args.out} and {breakdown}")
    return 0


def _cmd_verify(args):
    checks = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, mesh_fn in [("beam:4", lambda: generate_beam(4)),
                              ("brick:0", lambda: generate_brick(0))]:
            for experiment in ["deform", "cut"]:
                mesh = mesh_fn()
                actions = default_script(mesh, experiment)
                res = run_script(mesh, actions, solver="amps", compare_oracle=True)
                res_alt = run_script(mesh, actions, solver="amps-alt")
                diff = max(r.inf_diff_vs_oracle for r in res.records)
                resid = max(r.rel_residual for r in res.records)
                alt_gap = max(
                    float(np.abs(x - y).max() / max(np.abs(y).max(), 1e-300))
                    for x, y in zip(res_alt.solutions, res.solutions)
                )
                checks.append((f"{name} {experiment} oracle diff", diff, 1e-8))
                checks.append((f"{name} {experiment} residual", resid, 1e-10))
                checks.append((f"{name} {experiment} alt path gap", alt_gap, 1e-9))
    failed = 0
    for label, value, bound in checks:
        ok = value <= bound
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {label}: {value:.3e} (bound {bound:.0e})")
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="amps",
        description="Incremental sparse solver benchmark: mesh generation, "
                    "scripted cut/deform experiments, verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a mesh file")
    p_gen.add_argument("meshspec", help="beam:H or brick:L")
    p_gen.add_argument("out", help="output mesh path")

    p_bench = sub.add_parser("bench", help="run a scripted experiment")
    p_bench.add_argument("--mesh", required=True, help="beam:H, brick:L, or mesh file")
    p_bench.add_argument("--experiment", choices=["deform", "cut"], default="cut")
    p_bench.add_argument("--solver", choices=["amps", "amps-alt", "cg", "oracle"],
                         default="amps")
    p_bench.add_argument("--reps", type=int, default=20,
                         help="repetitions; the first is warm-up, excluded from means")
    p_bench.add_argument("--steps", type=int, default=None,
                         help="number of script steps (default: full protocol)")
    p_bench.add_argument("--threads", type=int, default=None)
    p_bench.add_argument("--compare", choices=["oracle"], default=None,
                         help="add a per-step difference column against the oracle")
    p_bench.add_argument("--cg-tol", type=float, default=1e-10,
                         help="CG stopping tolerance relative to ||f||")
    p_bench.add_argument("--general-forces", action="store_true",
                         help="also load the original copy of each duplicated node")
    p_bench.add_argument("--script", default=None, help="script file overriding the default protocol")
    p_bench.add_argument("--out", required=True, help="per-step CSV path")

    sub.add_parser("verify", help="oracle-equivalence suite on small meshes")

    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "bench":
            return _cmd_bench(args)
        return _cmd_verify(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
