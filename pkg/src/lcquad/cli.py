"""Command line drivers: geometry, precompute, evaluate, solve, converge.

All outputs are machine readable (CSV for tables, JSON for metrics); plots
are left to external tooling.  Runs are deterministic for a fixed config and
seed.  Numerical failures exit nonzero with a JSON error report on stderr.
"""

import argparse
import json
import sys
import time

import numpy as np

from .basis import n_basis
from .geometry import SurfaceMesh, gen_sphere, gen_stellarator, load_kpatch
from .kernels import KernelSpec
from .potential import (DirectAccelerator, TreecodeAccelerator, apply,
                        metrics, precompute, save_cache, write_potentials_csv)
from .quadrature import NearParams
from .solver import (greens_identity_error, point_source_field,
                     solve_dirichlet_cfie)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, default=_json_default, sort_keys=True)
    if path is None or path == "-":
        print(text)
    else:
        with open(path, "w") as f:
            f.write(text + "\n")


def _add_mesh_args(sub):
    g = sub.add_argument_group("mesh source")
    g.add_argument("--mesh", help="load surface from a KPATCH file")
    g.add_argument("--shape", choices=("sphere", "stellarator"),
                   help="built-in generator (alternative to --mesh)")
    g.add_argument("--refine", type=int, default=1,
                   help="sphere dyadic refinement level (default 1)")
    g.add_argument("--nu", type=int, default=8,
                   help="stellarator poloidal patch pairs (default 8)")
    g.add_argument("--nv", type=int, default=24,
                   help="stellarator toroidal patch pairs (default 24)")
    g.add_argument("--order", type=int, default=4,
                   help="patch polynomial order p (default 4)")


def _add_quad_args(sub):
    g = sub.add_argument_group("quadrature")
    g.add_argument("--eps", type=float, default=1e-6,
                   help="quadrature precision (default 1e-6)")
    g.add_argument("--eta", type=float, default=None,
                   help="near-field radius multiplier (default from order)")
    g.add_argument("--eta1", type=float, default=1.25,
                   help="adaptive-grading inner radius multiplier")


def _add_kernel_args(sub):
    g = sub.add_argument_group("kernel")
    g.add_argument("--kernel", default="single",
                   choices=("single", "double", "adjoint", "combined"))
    g.add_argument("--k", type=complex, default=0.0,
                   help="wavenumber, complex accepted (e.g. 1.0, 2+0.5j)")
    g.add_argument("--beta-s", type=complex, default=1.0,
                   help="single-layer weight for --kernel combined")
    g.add_argument("--beta-d", type=complex, default=1.0,
                   help="double-layer weight for --kernel combined")


def _add_accel_args(sub):
    g = sub.add_argument_group("far-field evaluation")
    g.add_argument("--accel", choices=("direct", "treecode"),
                   default="direct")
    g.add_argument("--eps-fmm", type=float, default=1e-9,
                   help="treecode tolerance (default 1e-9)")


def _build_mesh(args) -> SurfaceMesh:
    if args.mesh and args.shape:
        raise ValueError("give either --mesh or --shape, not both")
    if args.mesh:
        return load_kpatch(args.mesh)
    if args.shape == "sphere":
        return gen_sphere(args.refine, args.order)
    if args.shape == "stellarator":
        return gen_stellarator(args.nu, args.nv, args.order)
    raise ValueError("a mesh source is required: --mesh FILE or --shape NAME")


def _build_params(args, mesh) -> NearParams:
    return NearParams.for_order(mesh.order, args.eps,
                                eta=args.eta, eta1=args.eta1)


def _build_spec(args) -> KernelSpec:
    if args.kernel == "combined":
        return KernelSpec("combined", args.k,
                          beta_s=args.beta_s, beta_d=args.beta_d)
    return KernelSpec(args.kernel, args.k)


def _build_accel(args):
    if args.accel == "treecode":
        return TreecodeAccelerator(args.eps_fmm)
    return DirectAccelerator()


def _read_csv_columns(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(t) for t in parts])
            except ValueError:
                continue  # header line
    if not rows:
        raise ValueError(f"no numeric rows in {path}")
    return np.asarray(rows)


def _parse_slice(tokens):
    """Planar target lattice: normal=z offset=0 n=11 extent=2.0."""
    kv = {}
    for tok in tokens:
        key, _, val = tok.partition("=")
        if not val:
            raise ValueError(f"slice token '{tok}' is not key=value")
        kv[key] = val
    axis = {"x": 0, "y": 1, "z": 2}.get(kv.get("normal", "z"))
    if axis is None:
        raise ValueError("slice normal must be x, y or z")
    offset = float(kv.get("offset", 0.0))
    n = int(kv.get("n", 11))
    extent = float(kv.get("extent", 2.0))
    t = np.linspace(-extent, extent, n)
    a, b = np.meshgrid(t, t, indexing="ij")
    pts = np.zeros((n * n, 3))
    pts[:, (axis + 1) % 3] = a.ravel()
    pts[:, (axis + 2) % 3] = b.ravel()
    pts[:, axis] = offset
    nrm = np.zeros_like(pts)
    nrm[:, axis] = 1.0
    return pts, nrm


def _load_targets(args):
    if args.targets and args.slice:
        raise ValueError("give either --targets or --slice, not both")
    if args.targets:
        data = _read_csv_columns(args.targets)
        if data.shape[1] not in (3, 6):
            raise ValueError("target CSV needs columns x,y,z[,nx,ny,nz]")
        pts = data[:, :3]
        nrm = data[:, 3:6] if data.shape[1] == 6 else None
        return pts, nrm
    if args.slice:
        return _parse_slice(args.slice)
    raise ValueError("targets are required: --targets FILE or --slice ...")


def _load_density(args, n):
    if args.density is not None:
        data = _read_csv_columns(args.density)
        if len(data) != n:
            raise ValueError(f"density file has {len(data)} rows, "
                             f"mesh has {n} nodes")
        if data.shape[1] == 1:
            return data[:, 0].astype(complex)
        return data[:, -2] + 1j * data[:, -1]
    if args.density_random:
        rng = np.random.default_rng(args.seed)
        return rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return np.full(n, complex(args.density_const))


def _mesh_frame(mesh):
    """Node centroid, inradius, circumradius of the surface point cloud."""
    x = mesh.flat_points()
    c = x.mean(axis=0)
    d = np.linalg.norm(x - c, axis=1)
    return c, float(d.min()), float(d.max())


def _seeded_directions(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _manufactured_sources(mesh, n_src, seed):
    """Interior point sources at half the inradius with seeded strengths."""
    c, r_in, _ = _mesh_frame(mesh)
    v = _seeded_directions(n_src, seed)
    rng = np.random.default_rng(seed + 1)
    strengths = rng.standard_normal(n_src) + 1j * rng.standard_normal(n_src)
    return c + 0.5 * r_in * v, strengths


def _mesh_h(mesh) -> float:
    return 2.0 * float(np.max(mesh.radii))


def cmd_geom(args) -> int:
    mesh = _build_mesh(args)
    mesh.save_kpatch(args.out)
    _dump_json({
        "file": args.out,
        "npatches": mesh.npatches,
        "order": mesh.order,
        "nodes": mesh.total_points,
        "nodes_per_patch": n_basis(mesh.order),
        "h": _mesh_h(mesh),
        "aspect_max": float(mesh.aspects.max()),
    }, args.stats)
    return 0


def cmd_precompute(args) -> int:
    mesh = _build_mesh(args)
    cache = precompute(mesh, [_build_spec(args)], _build_params(args, mesh))
    if args.out:
        save_cache(cache, args.out)
    stats = metrics(cache)
    stats["cache_file"] = args.out
    _dump_json(stats, args.stats)
    return 0


def cmd_eval(args) -> int:
    mesh = _build_mesh(args)
    spec = _build_spec(args)
    pts, nrm = _load_targets(args)
    if spec.needs_tgt_normal and nrm is None:
        raise ValueError("adjoint kernels need target normals "
                         "(6-column --targets file or --slice)")
    t0 = time.perf_counter()
    cache = precompute(mesh, [spec], _build_params(args, mesh),
                       targets=pts,
                       target_normals=nrm if spec.needs_tgt_normal else None)
    t1 = time.perf_counter()
    sigma = _load_density(args, mesh.total_points)
    pot = apply(cache, sigma, _build_accel(args))[0]
    t2 = time.perf_counter()
    keep = slice(mesh.total_points, None)
    out_pot = type(pot)(points=pot.points[keep], values=pot.values[keep],
                        surface_node=pot.surface_node[keep], label=pot.label)
    write_potentials_csv(args.out, out_pot)
    stats = metrics(cache, {"t_apply": t2 - t1, "t_total": t2 - t0})
    stats["n_targets"] = len(pts)
    stats["output"] = args.out
    _dump_json(stats, args.stats)
    return 0


def cmd_solve(args) -> int:
    mesh = _build_mesh(args)
    k = args.k
    t0 = time.perf_counter()
    if args.data:
        f = _load_density_file(args.data, mesh.total_points)
        src = strengths = None
    else:
        src, strengths = _manufactured_sources(mesh, args.n_sources,
                                               args.seed)
        f = point_source_field(k, src, strengths, mesh.flat_points())
    sol = solve_dirichlet_cfie(mesh, k, f, args.eps,
                               accelerator=_build_accel(args),
                               maxit=args.maxit, identity=args.identity)
    t1 = time.perf_counter()
    with open(args.out, "w") as fh:
        fh.write("x,y,z,Re,Im\n")
        for pt, val in zip(mesh.flat_points(), sol.sigma):
            fh.write(f"{pt[0]:.17e},{pt[1]:.17e},{pt[2]:.17e},"
                     f"{val.real:.17e},{val.imag:.17e}\n")
    stats = {
        "iterations": sol.iterations,
        "converged": bool(sol.converged),
        "residuals": list(map(float, sol.residuals)),
        "t_solve": t1 - t0,
        "sigma_file": args.out,
        "k": k,
        "eps": args.eps,
    }
    if src is not None:
        c, _, r_out = _mesh_frame(mesh)
        probes = c + 2.0 * r_out * _seeded_directions(3, args.seed + 2)
        got = sol.evaluate(probes)
        want = point_source_field(k, src, strengths, probes)
        stats["eps_a"] = float(np.max(np.abs(got - want) / np.abs(want)))
    _dump_json(stats, args.stats)
    return 0


def _load_density_file(path, n):
    data = _read_csv_columns(path)
    if len(data) != n:
        raise ValueError(f"data file has {len(data)} rows, "
                         f"mesh has {n} nodes")
    if data.shape[1] == 1:
        return data[:, 0].astype(complex)
    return data[:, -2] + 1j * data[:, -1]


def cmd_converge(args) -> int:
    orders = [int(t) for t in args.orders.split(",")]
    refines = [int(t) for t in args.refines.split(",")]
    accel = _build_accel(args)
    rows = []
    for p in orders:
        prev = None  # (h, err) of the previous refinement level
        for nref in refines:
            mesh = gen_sphere(nref, p)
            if args.study == "greens":
                c, _, r_out = _mesh_frame(mesh)
                src = c + 3.0 * r_out * _seeded_directions(6, args.seed)
                err = greens_identity_error(mesh, args.k, src, eps=args.eps,
                                            accelerator=accel)
            else:
                src, strengths = _manufactured_sources(mesh, 6, args.seed)
                f = point_source_field(args.k, src, strengths,
                                       mesh.flat_points())
                sol = solve_dirichlet_cfie(mesh, args.k, f, args.eps,
                                           accelerator=accel,
                                           identity=args.identity)
                c, _, r_out = _mesh_frame(mesh)
                probes = c + 2.0 * r_out * _seeded_directions(3,
                                                              args.seed + 2)
                got = sol.evaluate(probes)
                want = point_source_field(args.k, src, strengths, probes)
                err = float(np.max(np.abs(got - want) / np.abs(want)))
            h = _mesh_h(mesh)
            order = (np.nan if prev is None
                     else np.log(prev[1] / err) / np.log(prev[0] / h))
            rows.append((p, nref, h, mesh.total_points, err, order))
            prev = (h, err)
    with open(args.out, "w") as fh:
        fh.write("p,refine,h,N,err,order\n")
        for p, nref, h, n, err, order in rows:
            fh.write(f"{p},{nref},{h:.17e},{n},{err:.17e},{order:.6f}\n")
    _dump_json({"study": args.study, "table": args.out,
                "final_err": rows[-1][4]}, args.stats)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lcquad",
        description="Locally corrected quadrature for Laplace and Helmholtz "
                    "layer potentials on curved triangle meshes.")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread cap (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("geom", help="generate a mesh and write a KPATCH file")
    _add_mesh_args(g)
    g.add_argument("-o", "--out", required=True, help="output KPATCH path")
    g.add_argument("--stats", default=None, help="summary JSON (default "
                   "stdout)")
    g.set_defaults(func=cmd_geom)

    g = sub.add_parser("precompute",
                       help="build near corrections, report cost metrics")
    _add_mesh_args(g)
    _add_quad_args(g)
    _add_kernel_args(g)
    g.add_argument("-o", "--out", default=None, help="cache archive path")
    g.add_argument("--stats", default=None, help="metrics JSON path")
    g.set_defaults(func=cmd_precompute)

    g = sub.add_parser("eval", help="evaluate a layer potential at targets")
    _add_mesh_args(g)
    _add_quad_args(g)
    _add_kernel_args(g)
    _add_accel_args(g)
    g.add_argument("--targets", help="CSV of targets x,y,z[,nx,ny,nz]")
    g.add_argument("--slice", nargs="+", metavar="KEY=VAL",
                   help="planar lattice, e.g. normal=z offset=0 n=11 "
                        "extent=2")
    g.add_argument("--density", help="CSV of node density values")
    g.add_argument("--density-const", type=complex, default=1.0,
                   help="constant density (default 1)")
    g.add_argument("--density-random", action="store_true",
                   help="seeded random complex density")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True, help="potentials CSV path")
    g.add_argument("--stats", default=None, help="metrics JSON path")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("solve",
                       help="exterior Dirichlet solve via combined field")
    _add_mesh_args(g)
    _add_quad_args(g)
    _add_accel_args(g)
    g.add_argument("--k", type=complex, default=1.0, help="wavenumber")
    g.add_argument("--data", help="boundary data CSV (Re[,Im] per node); "
                   "default: manufactured interior point sources")
    g.add_argument("--n-sources", type=int, default=6,
                   help="manufactured source count (default 6)")
    g.add_argument("--identity", choices=("half", "solid-angle"),
                   default="half",
                   help="jump coefficient: 1/2 or the per-node solid angle "
                        "of the discretized surface")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--maxit", type=int, default=200)
    g.add_argument("-o", "--out", required=True, help="sigma CSV path")
    g.add_argument("--stats", default=None, help="metrics JSON path")
    g.set_defaults(func=cmd_solve)

    g = sub.add_parser("converge",
                       help="refinement study on the sphere family")
    _add_quad_args(g)
    _add_accel_args(g)
    g.add_argument("--study", choices=("greens", "solve"), default="greens")
    g.add_argument("--identity", choices=("half", "solid-angle"),
                   default="half", help="jump coefficient for --study solve")
    g.add_argument("--orders", default="4", help="comma list of p values")
    g.add_argument("--refines", default="0,1,2",
                   help="comma list of refinement levels")
    g.add_argument("--k", type=complex, default=0.0, help="wavenumber")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True, help="table CSV path")
    g.add_argument("--stats", default=None, help="summary JSON path")
    g.set_defaults(func=cmd_converge)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limiter = None
    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=args.threads)
        except ImportError:
            pass
    try:
        return args.func(args)
    except Exception as exc:
        report = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(report, indent=2), file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
