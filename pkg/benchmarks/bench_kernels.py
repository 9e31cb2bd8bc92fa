"""Compare the numba kernels with the pure-numpy fallback.

Per-kernel timings run in-process against both namespaces. The training-step
timing runs in a child process per backend, because the backend is chosen
once at import time from MEMEPAIR_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from memepair import _kernels

STEP_SNIPPET = r"""
import json, sys, timeit
from memepair import _kernels, data as D, model as M, train as TR
from memepair.tensor import Graph
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
records, vocab, _ = D.generate_synthetic(D.SyntheticSpec(num_samples=max(batch, 64), seed=1))
cfg = M.ModelConfig(vocab_size=len(vocab), init_std=0.1)
params = M.init_params(cfg, 0)
state = TR.AdamState.zeros_like(params)
items = M.encode_records(cfg, vocab, records[:batch])
labels = [it.label for it in items]
tcfg = TR.TrainConfig()
t = [0]
def step():
    t[0] += 1
    params.zero_grad()
    with Graph() as g:
        loss = TR.cross_entropy(M.forward_items(cfg, params, items), labels)
    g.backward(loss)
    grads = {k: params[k].grad for k in params}
    TR.clip_grad_norm(grads, 1.0)
    TR.adamw_step(params, grads, state, t[0], tcfg)
step()  # warm-up / JIT
best = min(timeit.repeat(step, number=1, repeat=repeat))
print(json.dumps({"backend": _kernels.BACKEND, "step_ms": best * 1e3}))
"""


def kernel_cases(rng: np.random.Generator) -> dict:
    x = rng.normal(size=(32 * 4 * 24, 24))
    h = rng.normal(size=(32 * 24, 32))
    gamma, beta = rng.normal(size=32), rng.normal(size=32)
    pos, neg = rng.random(2000), rng.random(2000)
    return {
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(x, x),
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(h, gamma, beta, 1e-5),
        "gelu_fwd": lambda k: k.gelu_fwd(h),
        "gelu_bwd": lambda k: k.gelu_bwd(h, h),
        "pairwise_wins": lambda k: k.pairwise_wins(pos, neg),
    }


def best_of(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_ms(disable_numba: bool, batch: int, repeat: int) -> dict:
    env = {**os.environ, "MEMEPAIR_DISABLE_NUMBA": "1" if disable_numba else "0"}
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(batch), str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)

    if _kernels.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in kernel_cases(np.random.default_rng(0)).items():
        t_np = best_of(lambda: call(_kernels.numpy_impl), args.repeat) * 1e3
        t_nb = best_of(lambda: call(_kernels.numba_impl), args.repeat) * 1e3
        print(f"{name:<16}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    steps = [train_step_ms(flag, args.batch, max(3, args.repeat // 4)) for flag in (True, False)]
    print(f"\ntraining step, paired head, batch {args.batch}:")
    for s in steps:
        print(f"  {s['backend']:<6} {s['step_ms']:.1f} ms")


if __name__ == "__main__":
    main()
