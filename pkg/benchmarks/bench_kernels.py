#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-NumPy/Python fallbacks.

Runs this script twice internally: once in the current process (numba on,
unless BRCL_DISABLE_NUMBA is already set) and once in a subprocess with
BRCL_DISABLE_NUMBA=1, then prints a side-by-side table.

Usage: python benchmarks/bench_kernels.py [--n-points 8000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _timings(n_points, repeat):
    from brcl import _kernels
    from brcl.estimators import cl2_objective
    from brcl.gaussfield import FieldValues, ModelParams, build_cov_factor
    from brcl.geometry import (Window, delaunay, extract_edges,
                               extract_triples, guard_margin_for,
                               sample_poisson)
    from brcl.increments import decompose_v2, decompose_v3

    par = ModelParams(1.0, 0.5)
    win = Window(0.5, guard_margin_for(n_points))
    sample = sample_poisson(n_points, win, 12345)
    delaunay(sample.points[:64])  # trigger JIT outside the timers

    out = {"numba_enabled": _kernels.NUMBA_ENABLED, "n_points": sample.count}

    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        tri = delaunay(sample.points)
        best = min(best, time.perf_counter() - t0)
    out["delaunay_s"] = best

    edges = extract_edges(tri, Window(0.5))
    triples = extract_triples(tri, Window(0.5))
    factor = build_cov_factor(tri.vertices, par)
    rng = np.random.default_rng(0)
    draws = factor.sample(rng, size=2)
    fv1 = FieldValues(tri.vertices, draws[0], par)
    fv2 = FieldValues(tri.vertices, draws[1], par)
    decompose_v2(fv1, fv2, edges, par)

    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        decompose_v2(fv1, fv2, edges, par)
        decompose_v3(fv1, fv2, triples, par)
        best = min(best, time.perf_counter() - t0)
    out["decompose_s"] = best

    eta = np.exp(draws[0])
    cl2_objective(eta, edges, 1.0, 0.5)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        cl2_objective(eta, edges, 1.0, 0.5)
        best = min(best, time.perf_counter() - t0)
    out["cl2_objective_s"] = best
    out["n_edges"] = edges.count
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-points", type=int, default=8000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--emit-json", action="store_true",
                    help="print one JSON blob (used by the subprocess)")
    args = ap.parse_args()

    mine = _timings(args.n_points, args.repeat)
    if args.emit_json:
        print(json.dumps(mine))
        return

    env = dict(os.environ, BRCL_DISABLE_NUMBA="1")
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--emit-json",
         "--n-points", str(args.n_points), "--repeat", str(args.repeat)],
        env=env, capture_output=True, text=True, check=True)
    other = json.loads(proc.stdout.strip().splitlines()[-1])

    fast, slow = (mine, other) if mine["numba_enabled"] else (other, mine)
    print(f"n_points={mine['n_points']}  n_edges={mine['n_edges']}")
    print(f"{'kernel':<18}{'numba':>12}{'numpy/python':>16}{'speedup':>10}")
    for key, label in (("delaunay_s", "delaunay"),
                       ("decompose_s", "decompose v2+v3"),
                       ("cl2_objective_s", "cl2 objective")):
        ratio = slow[key] / fast[key]
        print(f"{label:<18}{fast[key]:>11.4f}s{slow[key]:>15.4f}s{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
