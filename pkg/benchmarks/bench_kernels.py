"""Compare the numba kernels with the pure-python/numpy fallback.

Each mode runs in a fresh interpreter because the backend is chosen at import
time from ``PODINN_DISABLE_NUMBA``.  Reports compile time (first call), steady
state time per trajectory, and checks both backends produce the same data.

    python benchmarks/bench_kernels.py [--system a] [--n-traj 3] [--n-steps 200]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

WORKER = r"""
import json, sys, time
import numpy as np
from podinn import systems
from podinn._accel import NUMBA_ENABLED
sysid, n_traj, n_steps = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
spec = systems.get_system(sysid)
t0 = time.perf_counter()
systems.generate(spec, 1, 5, seed=99)
warm = time.perf_counter() - t0
t0 = time.perf_counter()
ds = systems.generate(spec, n_traj, n_steps, seed=0)
run = time.perf_counter() - t0
np.save(sys.argv[4], ds.obs)
print(json.dumps({"numba": NUMBA_ENABLED, "warmup_s": warm, "run_s": run}))
"""


def run_mode(disable, args, out_file):
    env = dict(os.environ, PODINN_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, args.system, str(args.n_traj), str(args.n_steps), out_file],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--system", default="a")
    ap.add_argument("--n-traj", type=int, default=3)
    ap.add_argument("--n-steps", type=int, default=200)
    args = ap.parse_args()
    tmp = os.path.join(os.environ.get("TMPDIR", "/tmp"), f"podinn_bench_{os.getpid()}")
    files = {m: f"{tmp}_{m}.npy" for m in ("numba", "numpy")}
    results = {}
    for mode, disable in (("numba", False), ("numpy", True)):
        t0 = time.perf_counter()
        results[mode] = run_mode(disable, args, files[mode])
        results[mode]["wall_s"] = time.perf_counter() - t0
    a, b = np.load(files["numba"]), np.load(files["numpy"])
    for f in files.values():
        os.remove(f)
    print(f"system {args.system}: {args.n_traj} trajectories x {args.n_steps} steps")
    print(f"{'backend':<8} {'warmup [s]':>11} {'run [s]':>9} {'per traj [s]':>13}")
    for mode, r in results.items():
        print(f"{mode:<8} {r['warmup_s']:>11.3f} {r['run_s']:>9.3f} {r['run_s'] / args.n_traj:>13.4f}")
    speedup = results["numpy"]["run_s"] / results["numba"]["run_s"]
    print(f"steady-state speedup {speedup:.1f}x; max |numba - numpy| = {np.max(np.abs(a - b)):.2e}")


if __name__ == "__main__":
    main()
