"""Compare the numba and numpy paths of every hot kernel, plus a full
training step under each backend.

    python benchmarks/bench_kernels.py            # kernels only
    python benchmarks/bench_kernels.py --step     # also time train steps

The train-step comparison re-launches itself with STREAMVOICE_NUMBA=0/1 so
each backend is bound at import time, exactly as in normal use.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from streamvoice.numerics import _kernels as K


def timeit(fn, *args, repeat=20):
    fn(*args)  # warm-up / JIT
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(dtype, n=480, heads=8, d=512):
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((heads, n, n)).astype(dtype)
    probs = K.np_causal_softmax(scores, 0).astype(dtype)
    rows = rng.standard_normal((n, d)).astype(dtype)
    rows2 = rng.standard_normal((n, d)).astype(dtype)
    inv = K.np_rmsnorm_fwd(rows, 1e-5)[1]
    x = rng.standard_normal((heads, n, 16)).astype(dtype)
    ang = np.arange(n)[:, None] * 10000.0 ** (-np.arange(0, 16, 2) / 16)
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    return {
        "causal_softmax": (K.np_causal_softmax, K.nb_causal_softmax, (scores, 0)),
        "softmax_backward": (K.np_softmax_backward, K.nb_softmax_backward, (probs, scores)),
        "rmsnorm_fwd": (K.np_rmsnorm_fwd, K.nb_rmsnorm_fwd, (rows, 1e-5)),
        "rmsnorm_bwd": (K.np_rmsnorm_bwd, K.nb_rmsnorm_bwd, (rows2, rows, inv)),
        "silu_mul_fwd": (K.np_silu_mul_fwd, K.nb_silu_mul_fwd, (rows, rows2)),
        "silu_mul_bwd": (K.np_silu_mul_bwd, K.nb_silu_mul_bwd, (rows2, rows, rows2)),
        "rope": (K.np_rope, K.nb_rope, (x, cos, sin, 1)),
    }


def bench_kernels():
    results = []
    print(f"{'kernel':<18}{'dtype':<9}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for dtype in (np.float32, np.float64):
        for name, (f_np, f_nb, args) in kernel_cases(dtype).items():
            t_np = timeit(f_np, *args)
            t_nb = timeit(f_nb, *args)
            results.append({"kernel": name, "dtype": np.dtype(dtype).name, "numpy_ms": 1e3 * t_np,
                            "numba_ms": 1e3 * t_nb})
            print(f"{name:<18}{np.dtype(dtype).name:<9}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>9.2f}")
    return results


STEP_SNIPPET = """
import json, time
from streamvoice.config import desk_config
from streamvoice.data import build_dataset
from streamvoice.model import StreamVoice
from streamvoice.numerics import BACKEND
from streamvoice.train import Trainer
cfg = desk_config()
tr = Trainer(StreamVoice(cfg), build_dataset(cfg.task, cfg.stream.prompt_frames))
tr.train_step()
t0 = time.perf_counter()
for _ in range({steps}):
    tr.train_step()
print(json.dumps({{"backend": BACKEND, "sec_per_step": (time.perf_counter() - t0) / {steps}}}))
"""


def bench_steps(steps=10):
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, STREAMVOICE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        rec = json.loads(res.stdout.strip().splitlines()[-1])
        out.append(rec)
        print(f"train step [{rec['backend']}]: {rec['sec_per_step'] * 1e3:.1f} ms")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--step", action="store_true", help="also time desk-config training steps")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args()
    res = {"kernels": bench_kernels()}
    if args.step:
        res["train_step"] = bench_steps(args.steps)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(res, f, indent=2)


if __name__ == "__main__":
    main()
