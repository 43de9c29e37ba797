"""Compare the numba and numpy variants of every hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--step]

``--step`` additionally times one IGC training step end to end under each
backend, each in a fresh interpreter with ``IGC_NUMBA`` set accordingly.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from igc import kernels


def cases(rng):
    V, d, N = 1110, 64, 64 * 24
    x = rng.normal(size=(N, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    _, xhat, rstd = kernels.layer_norm_fwd_numpy(x, gamma, beta, 1e-5)
    logits = rng.normal(size=(N, V))
    targets = rng.integers(0, V, N)
    mask = np.ones(N, dtype=bool)
    probs = rng.random((4096, 10, 11))
    values = rng.integers(0, 10**10, 4096)
    ids = rng.integers(0, V, N)
    g = rng.normal(size=(N, d))
    return {
        "scatter_add_rows": (lambda f: f(np.zeros((V, d)), ids, g)),
        "layer_norm_fwd": (lambda f: f(x, gamma, beta, 1e-5)),
        "layer_norm_bwd": (lambda f: f(g, xhat, rstd, gamma)),
        "softmax_xent": (lambda f: f(logits, targets, mask)),
        "decode_left": (lambda f: f(probs)),
        "decode_right": (lambda f: f(probs[:, :, :10])),
        "encode_left": (lambda f: f(values, 10)),
        "encode_right": (lambda f: f(values, 10)),
    }


STEP = """
import time, numpy as np
from igc import _accel
from igc.config import RunConfig
from igc.data import DataConfig, generate
from igc.model import HostModel, HostDims
from igc.module import IGCModel, freeze_base
from igc.tokenizer import default_vocab
from igc.train import igc_step
v = default_vocab()
splits, _ = generate(DataConfig(n_train=256, n_eval=8, n_eval_distractor=4, filter_cap=0))
host = HostModel(HostDims(vocab=len(v)))
host.pretrained = True
freeze_base(host)
m = IGCModel(host, RunConfig().igc)
recs = splits["train"]
idx = np.arange(64)
for _ in range(2):
    igc_step(m, recs, idx, v, 1.0)[0].backward()
t0 = time.perf_counter()
for _ in range({n}):
    igc_step(m, recs, idx, v, 1.0)[0].backward()
print(_accel.BACKEND, (time.perf_counter() - t0) / {n})
"""


def bench_step(n):
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "IGC_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", STEP.format(n=n)], env=env, capture_output=True, text=True,
                             check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call in cases(rng).items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        call(f_nb)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
    if args.step:
        res = bench_step(5)
        print(f"\ntraining step (64 samples): numba {res['numba'] * 1e3:.0f} ms, "
              f"numpy {res['numpy'] * 1e3:.0f} ms, speedup {res['numpy'] / res['numba']:.2f}x")


if __name__ == "__main__":
    main()
