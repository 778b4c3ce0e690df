#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the numpy fallback.

Times kernel_matrix fills for each kernel family on surface node clouds of
growing size and prints a table with the speed ratio.  Run each backend in
its own process (the choice is frozen at first use):

    LCQUAD_BACKEND=numpy  python3 benchmarks/bench_kernels.py -o np.json
    LCQUAD_BACKEND=cython python3 benchmarks/bench_kernels.py -o cy.json
    python3 benchmarks/bench_kernels.py --compare np.json cy.json
"""

import argparse
import json
import time
import warnings

import numpy as np

warnings.filterwarnings(
    "ignore", message="order-.* moment-fitted rule has non-positive weights")


def surface_cloud(n_target):
    from lcquad.geometry import gen_sphere

    nref = 0
    while True:
        mesh = gen_sphere(nref, 4)
        if mesh.total_points >= n_target or nref >= 5:
            break
        nref += 1
    return mesh.flat_points(), mesh.flat_normals()


def bench_fill(spec, tx, tn, sx, sn, repeats):
    from lcquad.kernels import kernel_matrix

    needs_tn = spec.family == "adjoint"
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        m = kernel_matrix(spec, tx, sx,
                          src_normals=None if needs_tn else sn,
                          tgt_normals=tn if needs_tn else None)
        best = min(best, time.perf_counter() - t0)
    assert np.all(np.isfinite(m.real))
    return best, m.shape[0] * m.shape[1]


def run(sizes, repeats):
    from lcquad.backend import backend_name
    from lcquad.kernels import KernelSpec

    specs = [
        ("laplace single", KernelSpec("single", 0.0)),
        ("laplace double", KernelSpec("double", 0.0)),
        ("helmholtz single k=2", KernelSpec("single", 2.0)),
        ("helmholtz adjoint k=2", KernelSpec("adjoint", 2.0)),
        ("helmholtz combined k=2", KernelSpec("combined", 2.0,
                                              beta_s=-2j, beta_d=1.0)),
    ]
    out = {"backend": backend_name(), "rows": []}
    print(f"backend: {out['backend']}")
    print(f"{'kernel':26s} {'n':>7s} {'fill s':>10s} {'Mpairs/s':>10s}")
    for n in sizes:
        x, nrm = surface_cloud(n)
        # separate sources and targets to avoid the coincident-point branch
        sx, sn = x + 3.0, nrm
        for label, spec in specs:
            dt, pairs = bench_fill(spec, x, nrm, sx, sn, repeats)
            rate = pairs / dt / 1e6
            print(f"{label:26s} {len(x):7d} {dt:10.4f} {rate:10.1f}")
            out["rows"].append({"kernel": label, "n": len(x),
                                "seconds": dt, "mpairs_s": rate})
    return out


def compare(path_a, path_b):
    a = json.load(open(path_a))
    b = json.load(open(path_b))
    rows_a = {(r["kernel"], r["n"]): r["seconds"] for r in a["rows"]}
    print(f"{'kernel':26s} {'n':>7s} {a['backend']:>10s} {b['backend']:>10s}"
          f" {'ratio':>7s}")
    for r in b["rows"]:
        key = (r["kernel"], r["n"])
        if key not in rows_a:
            continue
        ta, tb = rows_a[key], r["seconds"]
        print(f"{key[0]:26s} {key[1]:7d} {ta:10.4f} {tb:10.4f} "
              f"{ta / tb:7.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="320,1280,5120",
                    help="comma list of point-cloud sizes")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("-o", "--out", help="write timings JSON")
    ap.add_argument("--compare", nargs=2, metavar=("A.json", "B.json"),
                    help="print the speed ratio table of two runs")
    args = ap.parse_args()
    if args.compare:
        compare(*args.compare)
        return
    sizes = [int(t) for t in args.sizes.split(",")]
    result = run(sizes, args.repeats)
    if args.out:
        with open(args.out, "w") as f:
            json.dump(result, f, indent=2)


if __name__ == "__main__":
    main()
