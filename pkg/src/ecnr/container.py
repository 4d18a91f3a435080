"""Bit-exact container format: plain header, Huffman-wrapped payload.

Layout (all integers little-endian):

  header:   magic "ECNR", u16 version, u32 dims x4, f32 range x2, u8 scales,
            u16 block dims x3, u16 latent_dim, u16 neurons, f32 omega0,
            u8 beta, u8 cnn_present, u8 flags (bit 0: degenerate range);
            then per scale, coarsest first: u32 m, u32 bitset byte count,
            the effective-block bitset (LSB-first bit per linear id), and
            one u32 MLP id per effective block in raster order.
  payload:  a single Huffman blob (symbol table + bit stream) wrapping, per
            scale: latent codes (f32), candidate prune-mask bits, and per
            (layer, kind) stream a u16 codebook size, f32 entries, and
            beta-bit packed indices for the unpruned parameters; then the
            CNN section when present.

Scales are stored coarsest-first, so a file prefix suffices to decode a
coarse preview: the Huffman table sits at the front of the blob and the bit
stream decodes incrementally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .compress import ALL_STREAMS, CANDIDATE_STREAMS, HuffmanBlob, huffman_decode, huffman_encode
from .siren import MlpGroupConfig
from .volume import ValueRange

MAGIC = b"ECNR"
VERSION = 1
FLAG_DEGENERATE_RANGE = 1


class ContainerError(ValueError):
    """Malformed, truncated, or inconsistent container data."""


@dataclass
class ScaleState:
    """Everything the decoder needs for one scale, in stored (f32) precision."""

    scale: int
    counts: tuple[int, int, int, int]  # block grid (nx, ny, nz, nt)
    m: int
    effective: np.ndarray  # bool per linear block id
    assignment: np.ndarray  # uint32 MLP id per effective block
    latents: np.ndarray  # float32 (n_effective, latent_dim)
    masks: dict  # (layer, kind) -> bool array, full parameter shape
    codebooks: dict  # (layer, kind) -> float32 array
    indices: dict  # (layer, kind) -> uint32 array over unpruned params

    @property
    def n_blocks(self) -> int:
        nx, ny, nz, nt = self.counts
        return nx * ny * nz * nt

    @property
    def n_effective(self) -> int:
        return int(self.effective.sum())

    def materialize_params(self, cfg: MlpGroupConfig):
        """Full float32 weight/bias arrays rebuilt from codebooks and masks."""
        weights, biases = [], []
        for layer, (fan_in, fan_out) in enumerate(cfg.layer_dims):
            for kind, shape in (("w", (self.m, fan_in, fan_out)), ("b", (self.m, 1, fan_out))):
                arr = np.zeros(shape, dtype=np.float32)
                mask = self.masks[(layer, kind)]
                cb = self.codebooks[(layer, kind)]
                if cb.size:
                    arr[mask] = cb[self.indices[(layer, kind)]]
                (weights if kind == "w" else biases).append(arr)
        return weights, biases


@dataclass
class CnnState:
    layers: int
    channels: int
    kernel: int
    bits: int
    codebook: np.ndarray  # float32
    indices: np.ndarray  # uint32 over all conv parameters


@dataclass
class ContainerState:
    dims: tuple[int, int, int, int]
    vrange: ValueRange
    scales: int
    block_dims: tuple[int, int, int]
    latent_dim: int
    neurons: int
    omega0: float
    beta: int
    scale_states: list  # ScaleState, coarsest first; may be shorter if truncated
    cnn: Optional[CnnState]

    @property
    def mlp_config(self) -> MlpGroupConfig:
        return MlpGroupConfig(
            neurons=self.neurons, latent_dim=self.latent_dim, omega0=self.omega0
        )


def _mask_shapes(cfg: MlpGroupConfig, m: int) -> dict:
    shapes = {}
    for layer, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        shapes[(layer, "w")] = (m, fan_in, fan_out)
        shapes[(layer, "b")] = (m, 1, fan_out)
    return shapes


def _pack_bool(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bool(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, np.uint8), bitorder="little")[:count].astype(bool)


def _pack_indices(indices: np.ndarray, bits: int) -> bytes:
    if indices.size == 0:
        return b""
    out = np.zeros((indices.size * bits + 7) // 8, dtype=np.uint8)
    kernels.pack_bits(np.ascontiguousarray(indices, dtype=np.uint32), bits, out)
    return out.tobytes()


def _unpack_indices(data: bytes, bits: int, count: int) -> np.ndarray:
    values = np.zeros(count, dtype=np.uint32)
    if count:
        kernels.unpack_bits(np.frombuffer(data, np.uint8), bits, values)
    return values


class _Cursor:
    """Sequential reader that raises ContainerError past the end."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"truncated {self.what}: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _scale_payload_bytes(state: ScaleState, cfg: MlpGroupConfig, beta: int) -> bytes:
    if state.m == 0:
        return b""
    parts = [state.latents.astype("<f4").tobytes()]
    cand_bits = np.concatenate(
        [state.masks[sk].ravel() for sk in CANDIDATE_STREAMS]
    )
    parts.append(_pack_bool(cand_bits))
    for sk in ALL_STREAMS:
        cb = state.codebooks[sk]
        parts.append(struct.pack("<H", cb.size))
        parts.append(cb.astype("<f4").tobytes())
        parts.append(_pack_indices(state.indices[sk], beta))
    return b"".join(parts)


def _cnn_payload_bytes(cnn: CnnState) -> bytes:
    parts = [struct.pack("<BBBB", cnn.layers, cnn.channels, cnn.kernel, cnn.bits)]
    parts.append(struct.pack("<H", cnn.codebook.size))
    parts.append(cnn.codebook.astype("<f4").tobytes())
    parts.append(_pack_indices(cnn.indices, cnn.bits))
    return b"".join(parts)


def serialize(state: ContainerState) -> bytes:
    x, y, z, t = state.dims
    flags = FLAG_DEGENERATE_RANGE if state.vrange.degenerate else 0
    head = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<4I", x, y, z, t),
        struct.pack("<2f", state.vrange.lo, state.vrange.hi),
        struct.pack("<B", state.scales),
        struct.pack("<3H", *state.block_dims),
        struct.pack("<HH", state.latent_dim, state.neurons),
        struct.pack("<f", state.omega0),
        struct.pack("<BBB", state.beta, 1 if state.cnn is not None else 0, flags),
    ]
    if len(state.scale_states) != state.scales:
        raise ContainerError("serialize: scale state count mismatch")
    payload_parts = []
    cfg = state.mlp_config
    for st in state.scale_states:  # coarsest first
        bitset = _pack_bool(st.effective)
        head.append(struct.pack("<II", st.m, len(bitset)))
        head.append(bitset)
        head.append(st.assignment.astype("<u4").tobytes())
        payload_parts.append(_scale_payload_bytes(st, cfg, state.beta))
    if state.cnn is not None:
        payload_parts.append(_cnn_payload_bytes(state.cnn))
    payload = b"".join(payload_parts)
    if not payload:  # fully degenerate container (e.g. constant volume)
        head.append(struct.pack("<IIH", 0, 0, 0))
        return b"".join(head)
    blob = huffman_encode(payload)
    table = np.flatnonzero(blob.code_lengths)
    head.append(struct.pack("<IIH", blob.n_symbols, blob.n_bits, table.size))
    head.append(
        b"".join(struct.pack("<BB", s, blob.code_lengths[s]) for s in table)
    )
    head.append(blob.payload.tobytes())
    return b"".join(head)


def _parse_scale_payload(
    cur: _Cursor, header: ContainerState, scale: int, m: int,
    counts, effective, assignment,
) -> ScaleState:
    cfg = header.mlp_config
    shapes = _mask_shapes(cfg, m)
    n_eff = int(effective.sum())
    state = ScaleState(
        scale=scale, counts=counts, m=m, effective=effective, assignment=assignment,
        latents=np.zeros((0, header.latent_dim), np.float32),
        masks={}, codebooks={}, indices={},
    )
    if m == 0:
        for sk in ALL_STREAMS:
            state.masks[sk] = np.ones(shapes[sk], dtype=bool)
            state.codebooks[sk] = np.zeros(0, np.float32)
            state.indices[sk] = np.zeros(0, np.uint32)
        return state
    lat_bytes = cur.take(4 * n_eff * header.latent_dim)
    state.latents = (
        np.frombuffer(lat_bytes, "<f4").reshape(n_eff, header.latent_dim).copy()
    )
    cand_total = sum(int(np.prod(shapes[sk])) for sk in CANDIDATE_STREAMS)
    cand_bits = _unpack_bool(cur.take((cand_total + 7) // 8), cand_total)
    offset = 0
    for sk in ALL_STREAMS:
        shape = shapes[sk]
        size = int(np.prod(shape))
        if sk in CANDIDATE_STREAMS:
            mask = cand_bits[offset : offset + size].reshape(shape)
            offset += size
        else:
            mask = np.ones(shape, dtype=bool)
        state.masks[sk] = mask
    for sk in ALL_STREAMS:
        (cb_size,) = cur.unpack("H")
        cb = np.frombuffer(cur.take(4 * cb_size), "<f4").copy()
        unpruned = int(state.masks[sk].sum())
        if cb_size == 0 and unpruned > 0:
            raise ContainerError(f"stream {sk}: empty codebook with {unpruned} parameters")
        n_idx_bytes = (unpruned * header.beta + 7) // 8
        idx = _unpack_indices(cur.take(n_idx_bytes), header.beta, unpruned)
        if cb_size and idx.size and idx.max() >= cb_size:
            raise ContainerError(f"stream {sk}: index out of codebook range")
        state.codebooks[sk] = cb
        state.indices[sk] = idx
    return state


def _parse_cnn_payload(cur: _Cursor) -> CnnState:
    layers, channels, kernel, bits = cur.unpack("BBBB")
    (cb_size,) = cur.unpack("H")
    codebook = np.frombuffer(cur.take(4 * cb_size), "<f4").copy()
    n_params = 0
    chans = [1] + [channels] * (layers - 1) + [1]
    for ci, co in zip(chans[:-1], chans[1:]):
        n_params += co * ci * kernel ** 3 + co
    idx = _unpack_indices(cur.take((n_params * bits + 7) // 8), bits, n_params)
    if cb_size and idx.size and idx.max() >= cb_size:
        raise ContainerError("cnn: index out of codebook range")
    return CnnState(layers, channels, kernel, bits, codebook, idx)


def deserialize(data: bytes, *, upto_scale: int = 1) -> ContainerState:
    """Parse a container; with ``upto_scale > 1`` a truncated payload is
    acceptable as long as scales s..upto_scale decode fully."""
    cur = _Cursor(data, "header")
    if cur.take(4) != MAGIC:
        raise ContainerError("bad magic: not an ECNR container")
    (version,) = cur.unpack("H")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    x, y, z, t = cur.unpack("4I")
    lo, hi = cur.unpack("2f")
    (scales,) = cur.unpack("B")
    xb, yb, zb = cur.unpack("3H")
    latent_dim, neurons = cur.unpack("HH")
    (omega0,) = cur.unpack("f")
    beta, cnn_present, flags = cur.unpack("BBB")
    vrange = ValueRange(lo, hi, degenerate=bool(flags & FLAG_DEGENERATE_RANGE))
    header = ContainerState(
        dims=(x, y, z, t), vrange=vrange, scales=scales, block_dims=(xb, yb, zb),
        latent_dim=latent_dim, neurons=neurons, omega0=omega0, beta=beta,
        scale_states=[], cnn=None,
    )
    if not 1 <= upto_scale <= scales:
        raise ContainerError(f"upto_scale must be in [1, {scales}]")

    meta = []
    for scale in range(scales, 0, -1):
        f = 2 ** (scale - 1)
        counts = (x // (f * xb), y // (f * yb), z // (f * zb), t // f)
        n_blocks = int(np.prod(counts))
        m, bitset_len = cur.unpack("II")
        if bitset_len != (n_blocks + 7) // 8:
            raise ContainerError(f"scale {scale}: bitset length mismatch")
        effective = _unpack_bool(cur.take(bitset_len), n_blocks)
        n_eff = int(effective.sum())
        assignment = np.frombuffer(cur.take(4 * n_eff), "<u4").copy()
        if m == 0 and n_eff > 0:
            raise ContainerError(f"scale {scale}: effective blocks but no MLPs")
        if assignment.size and assignment.max() >= max(m, 1):
            raise ContainerError(f"scale {scale}: assignment references missing MLP")
        meta.append((scale, counts, m, effective, assignment))

    (n_symbols, n_bits, table_size) = cur.unpack("IIH")
    lengths = np.zeros(256, dtype=np.uint8)
    for _ in range(table_size):
        sym, ln = cur.unpack("BB")
        lengths[sym] = ln
    bit_bytes = data[cur.pos :]
    declared = (n_bits + 7) // 8
    if len(bit_bytes) > declared:
        raise ContainerError("trailing bytes after payload")
    if n_symbols == 0:
        payload = b""
    else:
        truncated = len(bit_bytes) < declared
        try:
            blob = HuffmanBlob(lengths, np.frombuffer(bit_bytes, np.uint8), n_symbols, n_bits)
        except ValueError as e:
            raise ContainerError(str(e)) from None
        payload = huffman_decode(blob, allow_truncated=True)
        if len(payload) < n_symbols and not truncated:
            raise ContainerError("payload decode fell short despite full bit stream")

    pcur = _Cursor(payload, "payload")
    for scale, counts, m, effective, assignment in meta:
        if scale < upto_scale:
            break
        try:
            header.scale_states.append(
                _parse_scale_payload(pcur, header, scale, m, counts, effective, assignment)
            )
        except ContainerError:
            raise ContainerError(
                f"payload truncated before scale {scale} finished decoding"
            ) from None
    if cnn_present and upto_scale == 1:
        try:
            header.cnn = _parse_cnn_payload(pcur)
        except ContainerError:
            raise ContainerError("payload truncated inside the CNN section") from None
    return header


def component_sizes(state: ContainerState) -> dict:
    """Pre-compression byte counts per component, for reporting."""
    cfg = state.mlp_config
    out = {"scales": [], "cnn": 0}
    for st in state.scale_states:
        comp = {
            "scale": st.scale,
            "m": st.m,
            "effective": st.n_effective,
            "total_blocks": st.n_blocks,
            "latents": st.latents.size * 4,
            "masks": 0,
            "codebooks": 0,
            "indices": 0,
        }
        if st.m:
            cand = sum(int(np.prod(_mask_shapes(cfg, st.m)[sk])) for sk in CANDIDATE_STREAMS)
            comp["masks"] = (cand + 7) // 8
            for sk in ALL_STREAMS:
                comp["codebooks"] += 2 + st.codebooks[sk].size * 4
                comp["indices"] += (int(st.masks[sk].sum()) * state.beta + 7) // 8
        out["scales"].append(comp)
    if state.cnn is not None:
        out["cnn"] = (
            4 + 2 + state.cnn.codebook.size * 4
            + (state.cnn.indices.size * state.cnn.bits + 7) // 8
        )
    return out
