"""Compare the numba and pure-numpy kernel backends.

Times each hot kernel at the shapes the default glyph model uses, then one
full training step, under both backends. Run::

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

The numba timings exclude JIT compilation (one warm-up call per kernel).
"""
import argparse
import json
import timeit

import numpy as np

from cadit import _kernels as K
from cadit.synthdata import GlyphStyle, batch_sampler, gen_glyph_pair
from cadit.train import TrainConfig, init_state, train_step

BATCH = 64
# (name, input shape, weight shape) for the stride-2 convs of the default model
CONVS = [
    ("enc1 16x16 1->8", (BATCH, 1, 16, 16), (8, 1, 3, 3)),
    ("enc2 8x8 8->16", (BATCH, 8, 8, 8), (16, 8, 3, 3)),
]


def kernel_cases(rng):
    cases = []
    for name, xs, ws in CONVS:
        x, w = rng.normal(size=xs), rng.normal(size=ws)
        out, cols = K.conv2d(x, w, 2, 1)
        gy = rng.normal(size=out.shape)
        cases += [
            (f"im2col {name}", lambda x=x: K.im2col(x, 3, 2, 1)),
            (f"col2im {name}", lambda c=cols, s=xs: K.col2im(c, *s, 3, 2, 1)),
            (f"conv2d {name}", lambda x=x, w=w: K.conv2d(x, w, 2, 1)),
            (f"conv grad input {name}", lambda g=gy, w=w, s=xs: K.conv2d_grad_input(g, w, 2, 1, s[2], s[3])),
        ]
    flat = rng.normal(size=(BATCH, 256))
    cases.append(("pairwise_sq_dist 64x256", lambda: K.pairwise_sq_dist(flat)))
    return cases


def train_step_case():
    pair = gen_glyph_pair(10, 20, GlyphStyle(1.0), GlyphStyle(2.0, invert=True, noise_sd=0.1), seed=0)
    cfg = TrainConfig()
    state = init_state(pair.sample_shape, pair.n_classes, cfg)
    batches = batch_sampler(pair, BATCH, 0)
    return "train_step (full objective)", lambda: train_step(state, *next(batches), cfg)


def best_ms(fn, repeat, number):
    fn()  # warm-up (JIT compile for numba)
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write results here")
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    rows = {}
    for backend in backends:
        with K.use_backend(backend):
            rng = np.random.default_rng(0)
            for name, fn in kernel_cases(rng):
                rows.setdefault(name, {})[backend] = best_ms(fn, args.repeat, 20)
            name, fn = train_step_case()
            rows.setdefault(name, {})[backend] = best_ms(fn, args.repeat, 3)

    width = max(map(len, rows))
    print(f"{'kernel':{width}s}  " + "  ".join(f"{b + ' ms':>10s}" for b in backends) + "   speedup")
    for name, t in rows.items():
        cols = "  ".join(f"{t[b]:10.3f}" for b in backends)
        speed = f"{t['numpy'] / t['numba']:8.2f}x" if "numba" in t else ""
        print(f"{name:{width}s}  {cols}  {speed}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
