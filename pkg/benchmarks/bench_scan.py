"""Time the numba scan kernels against the numpy fallback.

    python benchmarks/bench_scan.py            # kernel timings, both backends
    python benchmarks/bench_scan.py --e2e      # also full loss+grad per backend

The end-to-end part re-runs this script in a child process with and without
COBRA_DISABLE_NUMBA=1, since the backend is picked once at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from cobra_bfa import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_inputs(B, T, c, n, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(B, T, c))
    delta = rng.uniform(0.05, 0.6, size=(B, T, c))
    A = -np.exp(rng.uniform(-2.0, 0.5, size=(c, n)))
    Bm, Cm = rng.normal(size=(B, T, n)), rng.normal(size=(B, T, n))
    D = rng.normal(size=c)
    return u, delta, A, Bm, Cm, D


def kernel_bench(shapes, repeat):
    if kernels.numba is None:
        print("numba not importable, nothing to compare")
        return
    print("times in ms, best of --repeat; x is the numba speedup")
    print(f"{'B':>3} {'T':>4} {'c':>4} {'n':>3} | {'fwd np':>8} {'fwd nb':>8} {'x':>6} | "
          f"{'bwd np':>8} {'bwd nb':>8} {'x':>6} | max abs diff")
    for B, T, c, n in shapes:
        args = make_inputs(B, T, c, n)
        y_np, hs = kernels.scan_forward_numpy(*args)
        y_nb, _ = kernels._scan_forward_nb(*args)  # also triggers compilation
        dy = np.ones_like(y_np)
        g_np = kernels.scan_backward_numpy(dy, *args, hs)
        g_nb = kernels._scan_backward_nb(dy, *args, hs)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip((y_np,) + g_np, (y_nb,) + g_nb))
        f_np = best_of(lambda: kernels.scan_forward_numpy(*args), repeat)
        f_nb = best_of(lambda: kernels._scan_forward_nb(*args), repeat)
        b_np = best_of(lambda: kernels.scan_backward_numpy(dy, *args, hs), repeat)
        b_nb = best_of(lambda: kernels._scan_backward_nb(dy, *args, hs), repeat)
        print(f"{B:>3} {T:>4} {c:>4} {n:>3} | {f_np * 1e3:8.3f} {f_nb * 1e3:8.3f} {f_np / f_nb:6.1f} | "
              f"{b_np * 1e3:8.3f} {b_nb * 1e3:8.3f} {b_np / b_nb:6.1f} | {err:.1e}")


def e2e_child(repeat):
    # one loss+gradient evaluation on the default toy model
    from cobra_bfa.corpus import calibration_batch
    from cobra_bfa.grad_engine import backward
    from cobra_bfa.pipeline import RunConfig, generate

    cfg = RunConfig()
    params = generate(cfg).decoded()
    batch = calibration_batch(cfg.corpus)
    loss, _ = backward(params, batch)
    t = best_of(lambda: backward(params, batch), repeat)
    print(json.dumps({"backend": kernels.backend(), "seconds": t, "loss": loss}))


def e2e_bench(repeat):
    for disable in ("0", "1"):
        env = dict(os.environ, COBRA_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(repeat)], env=env,
                             capture_output=True, text=True, check=True).stdout
        r = json.loads(out.strip().splitlines()[-1])
        print(f"loss+grad  {r['backend']:>5}: {r['seconds'] * 1e3:8.2f} ms   loss {r['loss']:.15f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e", action="store_true")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        e2e_child(args.repeat)
        return
    kernel_bench([(4, 32, 16, 8), (8, 64, 32, 8), (16, 128, 64, 16)], args.repeat)
    if args.e2e:
        e2e_bench(args.repeat)


if __name__ == "__main__":
    main()
