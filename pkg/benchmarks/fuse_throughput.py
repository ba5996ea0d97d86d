"""Throughput of fuse_cloud under both kernel backends.

Run directly to measure whichever backend the current environment
selects (numba unless TERRAVOX_NO_NUMBA=1). With --both, the script
re-runs itself once per backend in a child process and prints a
comparison table, since the backend is fixed at import time.

    python3 benchmarks/fuse_throughput.py --both
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def measure(n_clouds: int, n_points: int, n_voxels: int, seed: int) -> dict:
    from terravox import ONTOLOGY_10, SemanticCloud, VoxelMap
    from terravox import _kernels as K

    res, C = 0.2, ONTOLOGY_10.n_cls
    rng = np.random.default_rng(seed)
    side = int(np.ceil(n_voxels ** (1 / 3)))
    g = np.arange(side)
    cells = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    cells = cells[:n_voxels]

    vm = VoxelMap(res, ONTOLOGY_10, "range_based")
    for chunk in np.array_split(rng.permutation(cells.shape[0]),
                                max(1, cells.shape[0] // 200_000)):
        conf = np.zeros((chunk.size, C), np.float32)
        conf[np.arange(chunk.size), rng.integers(0, C, chunk.size)] = 1.0
        vm.fuse_cloud(SemanticCloud((cells[chunk] + 0.5) * res, conf,
                                    np.full(chunk.size, 30.0, np.float32)))

    fuse_s = 0.0
    for i in range(n_clouds):
        pick = rng.integers(0, cells.shape[0], n_points)
        pts = (cells[pick] + 0.5) * res
        conf = np.zeros((n_points, C), np.float32)
        conf[np.arange(n_points), rng.integers(0, C, n_points)] = 1.0
        conf[rng.random(n_points) < 0.15] = np.nan
        ranges = (rng.random(n_points) * 45 + 5).astype(np.float32)
        cloud = SemanticCloud(pts, conf, ranges)
        t0 = time.perf_counter()
        vm.fuse_cloud(cloud)
        fuse_s += time.perf_counter() - t0
        if i % 2 == 1:
            vm.snapshot()
    return {
        "backend": "numba" if K.HAS_NUMBA else "numpy",
        "clouds_per_s": n_clouds / fuse_s,
        "mpoints_per_s": n_clouds * n_points / fuse_s / 1e6,
        "n_voxels": vm.snapshot().n_voxels,
    }


def run_child(no_numba: bool, args) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["TERRAVOX_NO_NUMBA"] = "1"
    else:
        env.pop("TERRAVOX_NO_NUMBA", None)
    cmd = [sys.executable, os.path.abspath(__file__), "--json",
           "--clouds", str(args.clouds), "--points", str(args.points),
           "--voxels", str(args.voxels), "--seed", str(args.seed)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True,
                         text=True).stdout
    return json.loads(out)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clouds", type=int, default=20)
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--voxels", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--both", action="store_true",
                    help="compare numba and numpy backends in child runs")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    if args.both:
        rows = [run_child(False, args), run_child(True, args)]
        print(f"{args.clouds} clouds x {args.points} points into "
              f"{rows[0]['n_voxels']} live voxels")
        print(f"{'backend':<8} {'clouds/s':>10} {'Mpoints/s':>10}")
        for r in rows:
            print(f"{r['backend']:<8} {r['clouds_per_s']:>10.1f} "
                  f"{r['mpoints_per_s']:>10.2f}")
        ratio = rows[0]["clouds_per_s"] / rows[1]["clouds_per_s"]
        print(f"numba speedup: {ratio:.1f}x")
        return 0

    result = measure(args.clouds, args.points, args.voxels, args.seed)
    if args.json:
        print(json.dumps(result))
    else:
        print(f"{result['backend']}: {result['clouds_per_s']:.1f} clouds/s, "
              f"{result['mpoints_per_s']:.2f} Mpoints/s into "
              f"{result['n_voxels']} voxels")
    return 0


if __name__ == "__main__":
    sys.exit(main())
