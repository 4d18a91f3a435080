"""Deep compression of a trained MLP group.

Three stages: loss-guided magnitude pruning over the candidate parameters,
global codebook quantization per (layer, kind) across all MLPs at a scale
with optional codebook fine-tuning, and canonical Huffman coding of the
serialized payload.

Candidate parameters (the prunable set) are the weights of every layer
except the last and the biases of every layer except the first and last.
Canonical parameter order, used everywhere a deterministic enumeration is
needed (prune tie-breaks, mask bits, quantization index streams), is: layers
in network order, weights before biases within a layer, MLP-major then
row-major within an array.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .assign import Assignment
from .siren import MlpGroup, TrainSchedule, adam_step, backward, block_coords

# (layer, kind) streams in canonical order; kind "w" = weights, "b" = biases
ALL_STREAMS = tuple((layer, kind) for layer in range(4) for kind in ("w", "b"))
CANDIDATE_STREAMS = ((0, "w"), (1, "w"), (1, "b"), (2, "w"), (2, "b"))


def _stream_array(group: MlpGroup, layer: int, kind: str) -> np.ndarray:
    return group.weights[layer] if kind == "w" else group.biases[layer]


def _stream_mask(group: MlpGroup, layer: int, kind: str) -> np.ndarray:
    return group.mask_w[layer] if kind == "w" else group.mask_b[layer]


def candidate_count(group: MlpGroup) -> int:
    return sum(_stream_array(group, l, k).size for l, k in CANDIDATE_STREAMS)


def candidate_sparsity(group: MlpGroup) -> float:
    total = candidate_count(group)
    masked = sum(int((~_stream_mask(group, l, k)).sum()) for l, k in CANDIDATE_STREAMS)
    return masked / total


def _minmax(values: np.ndarray) -> np.ndarray:
    lo = values.min()
    hi = values.max()
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo)


def importance(group: MlpGroup, per_mlp_loss: np.ndarray, lambda_b: float) -> dict:
    """Pruning priority per candidate parameter.

    Magnitudes are min-max normalized over the whole candidate set at the
    scale; the per-MLP average block loss is min-max normalized across the
    MLPs.  Low score means prune first: small magnitude, and membership in a
    low-loss (easily fitting) MLP.
    """
    mags = np.concatenate(
        [np.abs(_stream_array(group, l, k)).ravel() for l, k in CANDIDATE_STREAMS]
    )
    norm_mags = _minmax(mags)
    norm_loss = _minmax(np.asarray(per_mlp_loss, dtype=np.float64))
    scores = {}
    offset = 0
    for layer, kind in CANDIDATE_STREAMS:
        arr = _stream_array(group, layer, kind)
        s = norm_mags[offset : offset + arr.size].reshape(arr.shape).copy()
        s += lambda_b * norm_loss[:, None, None]
        scores[(layer, kind)] = s
        offset += arr.size
    return scores


def prune_to_sparsity(group: MlpGroup, scores: dict, target: float) -> None:
    """Mask the lowest-scored candidates until the masked count hits the target.

    Cumulative: already-masked parameters stay masked.  Ties at the threshold
    break by canonical parameter order, making the mask deterministic.
    """
    flat_scores = np.concatenate([scores[(l, k)].ravel() for l, k in CANDIDATE_STREAMS])
    flat_mask = np.concatenate(
        [_stream_mask(group, l, k).ravel() for l, k in CANDIDATE_STREAMS]
    )
    total = flat_scores.size
    want = int(np.ceil(target * total))
    already = int((~flat_mask).sum())
    if want < already:
        raise ValueError(
            f"target sparsity {target} below current {already / total:.4f}"
        )
    alive = np.flatnonzero(flat_mask)
    order = np.argsort(flat_scores[alive], kind="stable")  # canonical tie-break
    newly = alive[order[: want - already]]
    flat_mask[newly] = False

    offset = 0
    for layer, kind in CANDIDATE_STREAMS:
        mask = _stream_mask(group, layer, kind)
        mask[...] = flat_mask[offset : offset + mask.size].reshape(mask.shape)
        offset += mask.size
    group.any_pruned = True
    group.apply_masks()


def make_prune_hook(group: MlpGroup, schedule: TrainSchedule, log=None):
    """Hook for train_scale implementing the iterative prune rounds."""
    targets = dict(zip(schedule.prune_epochs, schedule.prune_sparsity))

    def hook(grp: MlpGroup, epoch: int, per_mlp_loss: np.ndarray) -> None:
        target = targets[epoch]
        scores = importance(grp, per_mlp_loss, schedule.lambda_b)
        prune_to_sparsity(grp, scores, target)
        if log is not None:
            log(epoch=epoch, pruned_to=target, sparsity=candidate_sparsity(grp))

    return hook


# ---------------------------------------------------------------------------
# Global quantization.
# ---------------------------------------------------------------------------


def kmeans_1d(values: np.ndarray, k: int, iters: int = 25) -> np.ndarray:
    """1-D k-means with quantile seeding; returns sorted centers (<= k)."""
    vals = np.sort(values.astype(np.float64))
    uniq = np.unique(vals)
    if uniq.size <= k:
        return uniq
    centers = np.quantile(vals, (np.arange(k) + 0.5) / k)
    centers = np.unique(centers)
    for _ in range(iters):
        edges = (centers[1:] + centers[:-1]) / 2
        idx = np.searchsorted(edges, vals)
        sums = np.bincount(idx, weights=vals, minlength=centers.size)
        counts = np.bincount(idx, minlength=centers.size)
        keep = counts > 0
        new_centers = sums[keep] / counts[keep]
        if new_centers.size == centers.size and np.allclose(new_centers, centers):
            centers = new_centers
            break
        centers = new_centers
    return centers


@dataclass
class QuantizedScale:
    """Per-(layer, kind) shared-value codebooks and per-parameter indices."""

    beta: int
    codebooks: dict  # (layer, kind) -> float32 array, sorted ascending
    indices: dict  # (layer, kind) -> uint32 per unpruned parameter, canonical order


def quantize_global(group: MlpGroup, beta: int) -> QuantizedScale:
    """Cluster each (layer, kind)'s unpruned values across all MLPs at the scale.

    Values are replaced in place by their nearest codebook entry (quantized
    to float32, the stored precision).
    """
    if not 1 <= beta <= 16:
        raise ValueError(f"beta must be in [1, 16], got {beta}")
    codebooks, indices = {}, {}
    for layer, kind in ALL_STREAMS:
        arr = _stream_array(group, layer, kind)
        mask = _stream_mask(group, layer, kind)
        vals = arr[mask].astype(np.float64)
        if vals.size == 0:
            codebooks[(layer, kind)] = np.zeros(0, dtype=np.float32)
            indices[(layer, kind)] = np.zeros(0, dtype=np.uint32)
            continue
        centers = kmeans_1d(vals, 2 ** beta).astype(np.float32)
        edges = (centers[1:].astype(np.float64) + centers[:-1].astype(np.float64)) / 2
        idx = np.searchsorted(edges, vals).astype(np.uint32)
        codebooks[(layer, kind)] = centers
        indices[(layer, kind)] = idx
        arr[mask] = centers[idx].astype(arr.dtype)
    return QuantizedScale(beta, codebooks, indices)


def materialize_from_codebooks(group: MlpGroup, quant: QuantizedScale) -> None:
    """Overwrite unpruned parameters with their codebook values."""
    for layer, kind in ALL_STREAMS:
        arr = _stream_array(group, layer, kind)
        mask = _stream_mask(group, layer, kind)
        cb = quant.codebooks[(layer, kind)]
        if cb.size:
            arr[mask] = cb[quant.indices[(layer, kind)]].astype(arr.dtype)


def finetune_codebooks(
    group: MlpGroup,
    quant: QuantizedScale,
    assignment: Assignment,
    blocks: np.ndarray,
    block_dims: tuple[int, int, int],
    epochs: int = 75,
    lr: float = 1e-5,
    log=None,
) -> None:
    """Fine-tune shared codebook entries with indices frozen.

    The gradient of an entry is the sum of the gradients of every parameter
    mapped to it.  Adam runs on the codebook entries only; latent codes and
    the index/mask structure stay fixed.
    """
    if epochs <= 0:
        return
    dt = group.cfg.dtype
    coords = block_coords(block_dims, dt)
    slot_batches = []
    for slot in range(assignment.max_slots):
        rows = assignment.slot_rows(slot)
        slot_batches.append(
            (
                np.ascontiguousarray(assignment.cluster_of[rows], dtype=np.int64),
                rows,
                np.ascontiguousarray(blocks[rows], dtype=dt),
            )
        )
    mom = {sk: np.zeros_like(quant.codebooks[sk], dtype=np.float64) for sk in ALL_STREAMS}
    vel = {sk: np.zeros_like(quant.codebooks[sk], dtype=np.float64) for sk in ALL_STREAMS}
    eps = 1e-8
    beta1, beta2 = 0.9, 0.999
    t = 0
    for epoch in range(1, epochs + 1):
        epoch_loss = 0.0
        for ids, rows, targets in slot_batches:
            grads, mse = backward(group, ids, coords, group.latents[rows], targets)
            epoch_loss += float(mse.sum())
            t += 1
            c1 = 1.0 - beta1 ** t
            c2 = 1.0 - beta2 ** t
            for layer, kind in ALL_STREAMS:
                cb = quant.codebooks[(layer, kind)]
                if cb.size == 0:
                    continue
                mask = _stream_mask(group, layer, kind)
                garr = grads["w"][layer] if kind == "w" else grads["b"][layer]
                g = np.bincount(
                    quant.indices[(layer, kind)],
                    weights=garr[mask].astype(np.float64),
                    minlength=cb.size,
                )
                mom[(layer, kind)] = beta1 * mom[(layer, kind)] + (1 - beta1) * g
                vel[(layer, kind)] = beta2 * vel[(layer, kind)] + (1 - beta2) * g * g
                step = (mom[(layer, kind)] / c1) / (np.sqrt(vel[(layer, kind)] / c2) + eps)
                quant.codebooks[(layer, kind)] = (
                    cb.astype(np.float64) - lr * step
                ).astype(np.float32)
            materialize_from_codebooks(group, quant)
        epoch_loss /= assignment.n_blocks
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"codebook fine-tune diverged at epoch {epoch}")
        if log is not None:
            log(finetune_epoch=epoch, loss=epoch_loss)


# ---------------------------------------------------------------------------
# Canonical Huffman coding over bytes.
# ---------------------------------------------------------------------------


@dataclass
class HuffmanBlob:
    code_lengths: np.ndarray  # uint8 per byte symbol; 0 = absent
    payload: np.ndarray  # packed bit stream, uint8
    n_symbols: int  # original byte count
    n_bits: int

    def __post_init__(self):
        if not _prefix_free(self.code_lengths):
            raise ValueError("code lengths violate the Kraft inequality")


def _prefix_free(lengths: np.ndarray) -> bool:
    used = lengths[lengths > 0]
    if used.size == 0:
        return False
    return float((2.0 ** -used.astype(np.float64)).sum()) <= 1.0 + 1e-12


def _code_lengths(freqs: Counter) -> np.ndarray:
    """Huffman code length per symbol; a lone symbol gets a 1-bit code."""
    lengths = np.zeros(256, dtype=np.uint8)
    if len(freqs) == 1:
        lengths[next(iter(freqs))] = 1
        return lengths
    heap = [(f, sym, (sym,)) for sym, f in sorted(freqs.items())]
    heapq.heapify(heap)
    tiebreak = 256
    depth = {s: 0 for s in freqs}
    while len(heap) > 1:
        fa, _, sa = heapq.heappop(heap)
        fb, _, sb = heapq.heappop(heap)
        for s in sa + sb:
            depth[s] += 1
        heapq.heappush(heap, (fa + fb, tiebreak, sa + sb))
        tiebreak += 1
    for s, d in depth.items():
        lengths[s] = d
    return lengths


def _canonical_codes(lengths: np.ndarray):
    """Canonical code values plus decoder tables (first_code/first_index)."""
    present = np.flatnonzero(lengths)
    order = sorted(present, key=lambda s: (lengths[s], s))
    max_len = int(lengths[present].max())
    if max_len > 60:  # uint64 bit kernels; unreachable for realistic payloads
        raise ValueError(f"huffman code length {max_len} exceeds supported 60")
    code_val = np.zeros(256, dtype=np.uint64)
    symbols = np.zeros(len(order), dtype=np.uint8)
    first_code = np.zeros(max_len + 2, dtype=np.uint64)
    first_index = np.zeros(max_len + 2, dtype=np.int64)
    code = 0
    prev_len = 0
    for i, s in enumerate(order):
        ln = int(lengths[s])
        code <<= ln - prev_len
        if prev_len != ln:
            for l in range(prev_len + 1, ln + 1):
                first_code[l] = code >> (ln - l) if l < ln else code
                first_index[l] = i
        code_val[s] = code
        symbols[i] = s
        code += 1
        prev_len = ln
    first_index[max_len + 1] = len(order)
    # fill first_index for lengths with no symbols so count lookups see 0
    for l in range(max_len, 0, -1):
        if first_index[l] > first_index[l + 1]:
            first_index[l] = first_index[l + 1]
    return code_val, symbols, first_code, first_index, max_len


def huffman_encode(data: bytes | np.ndarray) -> HuffmanBlob:
    """Canonical Huffman coding of a byte string; lossless."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    if arr.size == 0:
        raise ValueError("huffman_encode: empty input")
    freqs = Counter(arr.tolist())
    lengths = _code_lengths(freqs)
    code_val, _, _, _, _ = _canonical_codes(lengths)
    n_bits = int(lengths[arr].astype(np.int64).sum())
    out = np.zeros((n_bits + 7) // 8, dtype=np.uint8)
    kernels.huffman_encode(arr, code_val, lengths, out)
    return HuffmanBlob(lengths, out, arr.size, n_bits)


def huffman_decode(blob: HuffmanBlob, *, allow_truncated: bool = False) -> bytes:
    """Invert :func:`huffman_encode`; exact round trip.

    With ``allow_truncated`` a short bit stream yields the prefix of the
    original bytes that could be fully decoded.
    """
    _, symbols, first_code, first_index, max_len = _canonical_codes(blob.code_lengths)
    out = np.zeros(blob.n_symbols, dtype=np.uint8)
    avail_bits = min(blob.n_bits, blob.payload.size * 8)
    if not allow_truncated and avail_bits < blob.n_bits:
        raise ValueError("huffman_decode: bit stream shorter than declared")
    count = kernels.huffman_decode(
        blob.payload, avail_bits, first_code, first_index, max_len, symbols, out
    )
    if count < 0:
        raise ValueError("huffman_decode: invalid code in stream")
    if count < blob.n_symbols and not allow_truncated:
        raise ValueError(
            f"huffman_decode: stream ended after {count} of {blob.n_symbols} symbols"
        )
    return out[:count].tobytes()
