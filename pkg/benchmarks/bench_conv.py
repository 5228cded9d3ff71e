"""Compare the conv kernel backends (numpy/BLAS vs compiled loops).

Usage: python benchmarks/bench_conv.py [--batch 128]

Prints per-kernel times over the toy family's layer shapes plus one full
gradient-accumulation step under each backend, and checks both agree.
"""

import argparse
import time

import numpy as np

from dspnet import backends
from dspnet.backends import numpy_backend


def bench(fn, *args, rep=10):
    fn(*args)
    t0 = time.perf_counter()
    for _ in range(rep):
        fn(*args)
    return (time.perf_counter() - t0) / rep * 1e3


def layer_shapes(batch):
    return [
        ("stem 1->8 k4 s2 32px", (batch, 1, 32, 32), (8, 1, 4, 4), 2, 1),
        ("conv 8->16 k4 s2 16px", (batch, 8, 16, 16), (16, 8, 4, 4), 2, 1),
        ("conv 16->16 k3 s1 8px", (batch, 16, 8, 8), (16, 16, 3, 3), 1, 1),
        ("conv 16->32 k4 s2 8px", (batch, 16, 8, 8), (32, 16, 4, 4), 2, 1),
        ("conv 32->32 k3 s1 16px", (batch, 32, 16, 16), (32, 32, 3, 3), 1, 1),
        ("conv 64->64 k3 s1 16px", (batch, 64, 16, 16), (64, 64, 3, 3), 1, 1),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()

    names = backends.available_backends()
    mods = {n: (numpy_backend if n == "numpy" else
                __import__("dspnet.backends._convkernels",
                           fromlist=["_convkernels"]))
            for n in names}
    print(f"backends: {', '.join(names)} (batch {args.batch})")
    print(f"{'layer':26s} " + " | ".join(
        f"{n}: fwd    bwd_in  bwd_w " for n in names))

    rng = np.random.default_rng(0)
    for label, xs, ws, stride, pad in layer_shapes(args.batch):
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        ref = numpy_backend.conv2d_forward(x, w, stride, pad)
        g = rng.standard_normal(ref.shape).astype(np.float32)
        cells = []
        for n in names:
            mod = mods[n]
            out = mod.conv2d_forward(x, w, stride, pad)
            scale = max(np.abs(ref).max(), 1e-9)
            assert np.abs(out - ref).max() / scale < 1e-4, f"{n} disagrees on {label}"
            f = bench(mod.conv2d_forward, x, w, stride, pad)
            bi = bench(mod.conv2d_backward_input, w, g, x.shape, stride, pad)
            bw = bench(mod.conv2d_backward_weight, x, g, w.shape, stride, pad)
            cells.append(f"{f:7.2f} {bi:7.2f} {bw:6.2f}")
        print(f"{label:26s} " + " | ".join(cells) + "  (ms)")

    # end-to-end: one gradient-accumulation step of the toy run
    import os
    from dspnet import config as cfgmod, data, ssl, trainer

    toy = os.path.join(os.path.dirname(__file__), "..", "configs", "toy.yaml")
    cfg = cfgmod.load_config(toy)
    train_ds, _ = trainer.build_datasets(cfg)
    state = ssl.init_train_state(cfg.family, cfg.head, seed=0)
    idxs = np.arange(min(args.batch, len(train_ds)))
    v, vp = data.augment_batch(train_ds.images, idxs, cfg.augment, 0, 0)
    cfgs = list(cfg.family.dn_list)
    print()
    initial = backends.active_backend().NAME
    try:
        for n in names:
            backends.set_backend(n)
            ssl.accumulate_gradients(v, vp, cfgs, state)
            t0 = time.perf_counter()
            for _ in range(3):
                ssl.accumulate_gradients(v, vp, cfgs, state)
            print(f"full accumulate step ({n}): {(time.perf_counter()-t0)/3*1e3:.0f} ms")
    finally:
        backends.set_backend(initial)


if __name__ == "__main__":
    main()
