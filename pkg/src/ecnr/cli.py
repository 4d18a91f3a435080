"""Command-line front end: encode, decode, info, metrics."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import codec, kernels
from .container import ContainerError, component_sizes, deserialize
from .pyramid import PyramidConfig
from .siren import TrainSchedule
from .volume import load_raw, save_raw


def _dims(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("dims must be X,Y,Z,T")
    return tuple(int(p) for p in parts)


def _block(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("block must be XB,YB,ZB")
    return tuple(int(p) for p in parts)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _kv_line(**kv) -> str:
    return " ".join(f"{k}={v}" for k, v in kv.items())


def _make_logger(stream, every: int = 25):
    def log(**kv):
        if "epoch" in kv and kv["epoch"] % every != 0 and kv["epoch"] != 1:
            return
        if "finetune_epoch" in kv and kv["finetune_epoch"] % every != 0:
            return
        if "cnn_epoch" in kv and kv["cnn_epoch"] % every != 0:
            return
        print(_kv_line(**kv), file=stream)

    return log


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ecnr",
        description="Compressive neural codec for time-varying volumetric scalar fields.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="compress a raw volume into a container")
    enc.add_argument("--input", required=True, help="raw float32 volume file")
    enc.add_argument("--dims", required=True, type=_dims, help="volume dims X,Y,Z,T")
    enc.add_argument("--block", required=True, type=_block, help="block dims XB,YB,ZB")
    enc.add_argument("--scales", required=True, type=int, help="pyramid scale count")
    enc.add_argument(
        "--blocks-per-mlp", type=_int_list, default=None,
        help="target blocks per MLP, coarsest scale first (default 8,16,32,... doubling)",
    )
    enc.add_argument("--beta", type=int, default=8, help="quantization bits (default 8)")
    enc.add_argument(
        "--lambda-b", type=float, default=0.1,
        help="loss weight in pruning importance (default 0.1)",
    )
    enc.add_argument(
        "--tau", type=float, default=1e-4,
        help="residual L2 threshold for keeping a block (default 1e-4)",
    )
    enc.add_argument("--epochs", type=int, default=500, help="training epochs per scale (default 500)")
    enc.add_argument("--latent-dim", type=int, default=16, help="latent code length (default 16)")
    enc.add_argument("--cnn", action="store_true", help="train the boundary-cleanup CNN (default off)")
    enc.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    enc.add_argument("--threads", type=int, default=None, help="worker threads (default: ECNR_THREADS or all cores)")
    enc.add_argument("--quiet", action="store_true", help="suppress progress lines")
    enc.add_argument("--output", required=True, help="container output path")

    dec = sub.add_parser("decode", help="reconstruct a raw volume from a container")
    dec.add_argument("--input", required=True, help="container file")
    dec.add_argument(
        "--upto-scale", type=int, default=None,
        help="decode only scales s..K for a coarse preview (default: full decode)",
    )
    dec.add_argument("--threads", type=int, default=None, help="worker threads (default: ECNR_THREADS or all cores)")
    dec.add_argument("--output", required=True, help="raw float32 output path")

    info = sub.add_parser("info", help="print container header and storage breakdown")
    info.add_argument("--input", required=True, help="container file")

    met = sub.add_parser("metrics", help="PSNR (and chamfer distance) between two raw volumes")
    met.add_argument("--a", required=True, help="reference raw volume")
    met.add_argument("--b", required=True, help="test raw volume")
    met.add_argument("--dims", required=True, type=_dims, help="volume dims X,Y,Z,T")
    met.add_argument("--isovalue", type=float, default=None, help="also report chamfer distance at this isovalue")
    return p


def _cmd_encode(args) -> int:
    kernels.configure_threads(args.threads)
    vol = load_raw(args.input, args.dims)
    epochs = args.epochs
    base = TrainSchedule()
    prune_epochs = tuple(e for e in base.prune_epochs if e <= epochs)
    schedule = TrainSchedule(
        epochs=epochs,
        prune_epochs=prune_epochs,
        prune_sparsity=base.prune_sparsity[: len(prune_epochs)],
        lambda_b=args.lambda_b,
    )
    cfg = codec.EncodeConfig(
        pyramid=PyramidConfig(args.scales, args.block, args.tau),
        blocks_per_mlp=args.blocks_per_mlp,
        schedule=schedule,
        beta=args.beta,
        latent_dim=args.latent_dim,
        enable_cnn=args.cnn,
        seed=args.seed,
    )
    log = None if args.quiet else _make_logger(sys.stdout)
    result = codec.encode(vol, cfg, log=log)
    with open(args.output, "wb") as f:
        f.write(result.data)
    for st in result.per_scale:
        print(_kv_line(
            scale=st.scale, blocks=st.total_blocks, effective=st.effective_blocks,
            mlps=st.mlps, sparsity=round(st.sparsity, 4), scale_psnr=round(st.psnr, 3),
        ))
    print(_kv_line(
        psnr=round(result.psnr, 4),
        compression_rate=round(result.compression_rate, 2),
        bytes=len(result.data),
        output=args.output,
    ))
    return 0


def _cmd_decode(args) -> int:
    kernels.configure_threads(args.threads)
    with open(args.input, "rb") as f:
        data = f.read()
    if args.upto_scale is None:
        vol = codec.decode(data)
    else:
        vol = codec.decode_scale(data, args.upto_scale)
    save_raw(vol, args.output)
    x, y, z, t = vol.dims
    print(_kv_line(dims=f"{x},{y},{z},{t}", output=args.output))
    return 0


def _cmd_info(args) -> int:
    with open(args.input, "rb") as f:
        data = f.read()
    st = deserialize(data)
    x, y, z, t = st.dims
    print(_kv_line(
        magic="ECNR", dims=f"{x},{y},{z},{t}",
        range=f"{st.vrange.lo:g}..{st.vrange.hi:g}",
        scales=st.scales, block=",".join(map(str, st.block_dims)),
        latent_dim=st.latent_dim, neurons=st.neurons, omega0=st.omega0,
        beta=st.beta, cnn=int(st.cnn is not None),
    ))
    sizes = component_sizes(st)
    raw_bytes = x * y * z * t * 4
    total = len(data)
    for comp in sizes["scales"]:
        scale_total = comp["latents"] + comp["masks"] + comp["codebooks"] + comp["indices"]
        print(_kv_line(
            scale=comp["scale"], mlps=comp["m"],
            effective=f"{comp['effective']}/{comp['total_blocks']}",
            latents=comp["latents"], masks=comp["masks"],
            codebooks=comp["codebooks"], indices=comp["indices"],
            scale_bytes=scale_total,
            pct=round(100.0 * scale_total / total, 2),
        ))
    if st.cnn is not None:
        print(_kv_line(cnn_bytes=sizes["cnn"], pct=round(100.0 * sizes["cnn"] / total, 2)))
    print(_kv_line(file_bytes=total, raw_bytes=raw_bytes,
                   compression_rate=round(raw_bytes / total, 2)))
    return 0


def _cmd_metrics(args) -> int:
    a = load_raw(args.a, args.dims)
    b = load_raw(args.b, args.dims)
    quality = codec.psnr(a, b)
    kv = {"psnr": "inf" if np.isinf(quality) else round(quality, 4)}
    if args.isovalue is not None:
        kv["chamfer"] = round(codec.chamfer_distance(a, b, args.isovalue), 6)
    print(_kv_line(**kv))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "encode": _cmd_encode,
        "decode": _cmd_decode,
        "info": _cmd_info,
        "metrics": _cmd_metrics,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, ContainerError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
