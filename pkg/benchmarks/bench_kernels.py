"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--threads N]

Shapes mirror the finest scale of a 64^3 x 8 encode (128 MLPs, 16^3-voxel
blocks) plus representative convolution and bit-coding workloads.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ecnr import kernels
from ecnr.siren import MlpGroupConfig, init_group

if not kernels.HAVE_NUMBA:
    raise SystemExit("numba is not installed; nothing to compare against")


def timeit(fn, *args, repeats=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def show(name, t_nb, t_np):
    print(f"{name:<28} numba {t_nb * 1e3:9.2f} ms   numpy {t_np * 1e3:9.2f} ms"
          f"   speedup {t_np / t_nb:6.2f}x")


def bench_mlp(rng):
    m, n_vox = 128, 16 ** 3
    cfg = MlpGroupConfig(dtype=np.float32)
    g = init_group(cfg, m=m, n_blocks=m, seed=0)
    coords = rng.uniform(-1, 1, (n_vox, 3)).astype(np.float32)
    ids = np.arange(m, dtype=np.int64)
    lat = g.latents
    targets = rng.uniform(-1, 1, (m, n_vox)).astype(np.float32)
    wt = g.transposed_weights()
    dt = np.float32

    def fwd(impl):
        out = np.zeros((m, n_vox), dt)
        impl(ids, wt[0], g.biases[0], wt[1], g.biases[1], wt[2], g.biases[2],
             g.weights[3], g.biases[3], coords, lat, dt(30.0), out)

    def step(impl):
        gw = [np.zeros_like(w) for w in g.weights]
        gb = [np.zeros_like(b) for b in g.biases]
        glat = np.zeros_like(lat)
        mse = np.zeros(m, np.float64)
        impl(ids,
             g.weights[0], wt[0], g.biases[0],
             g.weights[1], wt[1], g.biases[1],
             g.weights[2], wt[2], g.biases[2],
             g.weights[3], g.biases[3],
             coords, lat, targets, dt(30.0), dt(2.0 / n_vox),
             gw[0], gb[0], gw[1], gb[1], gw[2], gb[2], gw[3], gb[3], glat, mse)

    show("mlp forward (128x4096)",
         timeit(fwd, kernels.mlp_forward_nb),
         timeit(fwd, kernels.mlp_forward_np))
    show("mlp train step (128x4096)",
         timeit(step, kernels.mlp_train_step_nb, repeats=3),
         timeit(step, kernels.mlp_train_step_np, repeats=3))


def bench_conv(rng):
    ci, co, shape = 32, 32, (32, 32, 32)
    xp = rng.uniform(-1, 1, (ci,) + tuple(s + 2 for s in shape))
    w = rng.uniform(-1, 1, (co, ci, 3, 3, 3))
    b = rng.uniform(-1, 1, co)

    def fwd(impl):
        out = np.zeros((co,) + shape)
        impl(xp, w, b, out)

    show("conv3d 32ch 32^3 forward",
         timeit(fwd, kernels.conv3d_forward_nb, repeats=3),
         timeit(fwd, kernels.conv3d_forward_np, repeats=3))


def bench_bits(rng):
    vals = rng.integers(0, 256, 2_000_000).astype(np.uint32)
    nbytes = (vals.size * 8 + 7) // 8

    def pack(impl):
        out = np.zeros(nbytes, np.uint8)
        impl(vals, 8, out)

    packed = np.zeros(nbytes, np.uint8)
    kernels.pack_bits_nb(vals, 8, packed)

    def unpack(impl):
        out = np.zeros(vals.size, np.uint32)
        impl(packed, 8, out)

    show("pack_bits (2M x 8 bit)",
         timeit(pack, kernels.pack_bits_nb),
         timeit(pack, kernels.pack_bits_np))
    show("unpack_bits (2M x 8 bit)",
         timeit(unpack, kernels.unpack_bits_nb),
         timeit(unpack, kernels.unpack_bits_np))


def bench_huffman(rng):
    from collections import Counter

    from ecnr.compress import _canonical_codes, _code_lengths

    data = np.clip(rng.normal(128, 24, 2_000_000), 0, 255).astype(np.uint8)
    lengths = _code_lengths(Counter(data.tolist()))
    code_val, symbols, first_code, first_index, max_len = _canonical_codes(lengths)
    n_bits = int(lengths[data].astype(np.int64).sum())
    buf = np.zeros((n_bits + 7) // 8, np.uint8)
    kernels.huffman_encode_nb(data, code_val, lengths, buf)

    def enc(impl):
        out = np.zeros((n_bits + 7) // 8, np.uint8)
        impl(data, code_val, lengths, out)

    def dec(impl):
        out = np.zeros(data.size, np.uint8)
        impl(buf, n_bits, first_code, first_index, max_len, symbols, out)

    show("huffman encode (2 MB)",
         timeit(enc, kernels.huffman_encode_nb),
         timeit(enc, kernels.huffman_encode_np))
    show("huffman decode (2 MB)",
         timeit(dec, kernels.huffman_decode_nb, repeats=3),
         timeit(dec, kernels.huffman_decode_np, repeats=1))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    n = kernels.configure_threads(args.threads)
    print(f"threads={n}  (numpy path uses BLAS/SIMD; numba path uses @njit)")
    rng = np.random.default_rng(0)
    bench_mlp(rng)
    bench_conv(rng)
    bench_bits(rng)
    bench_huffman(rng)


if __name__ == "__main__":
    main()
