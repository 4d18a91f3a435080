"""Hot numeric kernels, JIT-compiled with numba when available.

Every kernel has two implementations with identical semantics: a numba
``@njit`` version (``*_nb``) and a pure-numpy reference (``*_np``).  The
active set is chosen once at import time: numba is used unless it is not
installed or the environment variable ``ECNR_DISABLE_NUMBA`` is set to a
non-empty value other than ``0``.  ``benchmarks/bench_kernels.py`` compares
the two paths.

The sinusoidal MLP kernels are dtype-polymorphic.  On float32 inputs the
numba path evaluates sine with a range-reduced polynomial (max abs error
~2e-7, measured); on float64 inputs it calls libm, so float64 results are
suitable for finite-difference gradient checks.  The numpy path always uses
``np.sin``/``np.cos``.
"""

from __future__ import annotations

import math
import os

import numpy as np

_ENV_FLAG = os.environ.get("ECNR_DISABLE_NUMBA", "0")
NUMBA_DISABLED = _ENV_FLAG not in ("", "0")

# the TBB bundled with some images is too old; omp avoids a startup warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via ECNR_DISABLE_NUMBA
    HAVE_NUMBA = False

USING_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


def configure_threads(n: int | None) -> int:
    """Set the worker thread count; returns the count in effect."""
    if not USING_NUMBA:
        return 1
    limit = numba.config.NUMBA_NUM_THREADS
    if n is None:
        n = int(os.environ.get("ECNR_THREADS", limit) or limit)
    n = max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# Sinusoidal MLP: fused forward / forward+backward over a batch of rows.
#
# A "row" is one (mlp, block) pair: ids[r] selects the MLP whose parameters
# row r uses, coords (N, 3) are shared across rows, latents[r] is the row's
# latent code.  The network is fixed at three sine layers plus one linear
# output layer; widths come from the array shapes.  Weight arrays are passed
# both in canonical (m, fan_in, fan_out) layout and pre-transposed
# (m, fan_out, fan_in) layout so each direction reads contiguously.
# ---------------------------------------------------------------------------


def _sin_act(x):  # pragma: no cover - overload target, numpy path uses np.sin
    return math.sin(x)


def _cos_act(x):  # pragma: no cover - overload target, numpy path uses np.cos
    return math.cos(x)


if HAVE_NUMBA:
    from numba.extending import overload

    def _sin_core64(xd):
        # reduce to [-pi/2, pi/2] in double, odd minimax polynomial in single
        k = np.int64(round(xd * 0.3183098861837907))
        r = np.float32(xd - k * 3.141592653589793)
        r2 = r * r
        p = np.float32(-2.3889859e-08)
        p = p * r2 + np.float32(2.7525562e-06)
        p = p * r2 - np.float32(1.9840874e-04)
        p = p * r2 + np.float32(8.3333310e-03)
        p = p * r2 - np.float32(1.6666667e-01)
        p = p * r2 + np.float32(1.0)
        sign = np.float32(1 - 2 * (k & 1))
        return r * p * sign

    _sin_core64_jit = njit(inline="always", fastmath=True)(_sin_core64)

    @overload(_sin_act, inline="always", fastmath=True)
    def _sin_act_impl(x):
        if x == numba.types.float32:
            def f32_impl(x):
                return _sin_core64_jit(np.float64(x))
            return f32_impl

        def f64_impl(x):
            return math.sin(x)

        return f64_impl

    @overload(_cos_act, inline="always", fastmath=True)
    def _cos_act_impl(x):
        if x == numba.types.float32:
            def f32_impl(x):
                # the quarter-turn shift happens in double so large
                # arguments keep full reduction accuracy
                return _sin_core64_jit(np.float64(x) + 1.5707963267948966)
            return f32_impl

        def f64_impl(x):
            return math.cos(x)

        return f64_impl


def _make_mlp_forward():
    def kern(ids, w0t, b0, w1t, b1, w2t, b2, w3, b3, coords, latents, w0, out):
        rows, n_vox = out.shape
        hidden = w0t.shape[1]
        n_lat = latents.shape[1]
        for r in prange(rows):
            g = ids[r]
            h0 = np.empty_like(b0[0, 0])
            h1 = np.empty_like(b0[0, 0])
            h2 = np.empty_like(b0[0, 0])
            z = np.empty_like(b0[0, 0])
            lat = latents[r]
            for v in range(n_vox):
                for j in range(hidden):
                    s = b0[g, 0, j]
                    wr = w0t[g, j]
                    for i in range(3):
                        s += coords[v, i] * wr[i]
                    for i in range(n_lat):
                        s += lat[i] * wr[3 + i]
                    z[j] = w0 * s
                for j in range(hidden):
                    h0[j] = _sin_act(z[j])
                for j in range(hidden):
                    s = b1[g, 0, j]
                    wr = w1t[g, j]
                    for i in range(hidden):
                        s += h0[i] * wr[i]
                    z[j] = w0 * s
                for j in range(hidden):
                    h1[j] = _sin_act(z[j])
                for j in range(hidden):
                    s = b2[g, 0, j]
                    wr = w2t[g, j]
                    for i in range(hidden):
                        s += h1[i] * wr[i]
                    z[j] = w0 * s
                for j in range(hidden):
                    h2[j] = _sin_act(z[j])
                acc = b3[g, 0, 0]
                for i in range(hidden):
                    acc += h2[i] * w3[g, i, 0]
                out[r, v] = acc
        return out

    return kern


def _make_mlp_train_step():
    def kern(
        ids,
        w0m, w0t, b0,
        w1m, w1t, b1,
        w2m, w2t, b2,
        w3m, b3,
        coords, latents, targets, w0, inv_n2,
        gw0, gb0, gw1, gb1, gw2, gb2, gw3, gb3, glat, mse,
    ):
        rows, n_vox = targets.shape
        hidden = w0t.shape[1]
        n_lat = latents.shape[1]
        for r in prange(rows):
            g = ids[r]
            z0 = np.empty_like(b0[0, 0])
            z1 = np.empty_like(b0[0, 0])
            z2 = np.empty_like(b0[0, 0])
            h0 = np.empty_like(b0[0, 0])
            c0 = np.empty_like(b0[0, 0])
            h1 = np.empty_like(b0[0, 0])
            c1 = np.empty_like(b0[0, 0])
            h2 = np.empty_like(b0[0, 0])
            c2 = np.empty_like(b0[0, 0])
            d = np.empty_like(b0[0, 0])
            d2 = np.empty_like(b0[0, 0])
            lat = latents[r]
            acc = 0.0
            for v in range(n_vox):
                for j in range(hidden):
                    s = b0[g, 0, j]
                    wr = w0t[g, j]
                    for i in range(3):
                        s += coords[v, i] * wr[i]
                    for i in range(n_lat):
                        s += lat[i] * wr[3 + i]
                    z0[j] = w0 * s
                for j in range(hidden):
                    h0[j] = _sin_act(z0[j])
                    c0[j] = _cos_act(z0[j])
                for j in range(hidden):
                    s = b1[g, 0, j]
                    wr = w1t[g, j]
                    for i in range(hidden):
                        s += h0[i] * wr[i]
                    z1[j] = w0 * s
                for j in range(hidden):
                    h1[j] = _sin_act(z1[j])
                    c1[j] = _cos_act(z1[j])
                for j in range(hidden):
                    s = b2[g, 0, j]
                    wr = w2t[g, j]
                    for i in range(hidden):
                        s += h1[i] * wr[i]
                    z2[j] = w0 * s
                for j in range(hidden):
                    h2[j] = _sin_act(z2[j])
                    c2[j] = _cos_act(z2[j])
                out = b3[g, 0, 0]
                for i in range(hidden):
                    out += h2[i] * w3m[g, i, 0]
                err = out - targets[r, v]
                acc += np.float64(err) * np.float64(err)
                gy = inv_n2 * err
                gb3[g, 0, 0] += gy
                for i in range(hidden):
                    gw3[g, i, 0] += h2[i] * gy
                    d[i] = gy * w3m[g, i, 0] * c2[i] * w0
                for j in range(hidden):
                    gb2[g, 0, j] += d[j]
                for i in range(hidden):
                    hi = h1[i]
                    s = d[0] * 0
                    for j in range(hidden):
                        gw2[g, i, j] += hi * d[j]
                        s += w2m[g, i, j] * d[j]
                    d2[i] = s * c1[i] * w0
                for j in range(hidden):
                    gb1[g, 0, j] += d2[j]
                for i in range(hidden):
                    hi = h0[i]
                    s = d[0] * 0
                    for j in range(hidden):
                        gw1[g, i, j] += hi * d2[j]
                        s += w1m[g, i, j] * d2[j]
                    d[i] = s * c0[i] * w0
                for j in range(hidden):
                    gb0[g, 0, j] += d[j]
                for i in range(3):
                    xi = coords[v, i]
                    for j in range(hidden):
                        gw0[g, i, j] += xi * d[j]
                for i in range(n_lat):
                    li = lat[i]
                    s = d[0] * 0
                    for j in range(hidden):
                        gw0[g, 3 + i, j] += li * d[j]
                        s += w0m[g, 3 + i, j] * d[j]
                    glat[r, i] += s
            mse[r] = acc / n_vox
        return mse

    return kern


def _mlp_forward_np(ids, w0t, b0, w1t, b1, w2t, b2, w3, b3, coords, latents, w0, out):
    rows, n_vox = out.shape
    x = np.concatenate(
        [np.broadcast_to(coords, (rows,) + coords.shape),
         np.broadcast_to(latents[:, None, :], (rows, n_vox, latents.shape[1]))],
        axis=2,
    ).astype(b0.dtype)
    h = np.sin(w0 * (np.matmul(x, w0t[ids].transpose(0, 2, 1)) + b0[ids]))
    h = np.sin(w0 * (np.matmul(h, w1t[ids].transpose(0, 2, 1)) + b1[ids]))
    h = np.sin(w0 * (np.matmul(h, w2t[ids].transpose(0, 2, 1)) + b2[ids]))
    y = np.matmul(h, w3[ids]) + b3[ids]
    out[...] = y[:, :, 0]
    return out


def _mlp_train_step_np(
    ids,
    w0m, w0t, b0,
    w1m, w1t, b1,
    w2m, w2t, b2,
    w3m, b3,
    coords, latents, targets, w0, inv_n2,
    gw0, gb0, gw1, gb1, gw2, gb2, gw3, gb3, glat, mse,
):
    rows, n_vox = targets.shape
    n_lat = latents.shape[1]
    x = np.concatenate(
        [np.broadcast_to(coords, (rows,) + coords.shape),
         np.broadcast_to(latents[:, None, :], (rows, n_vox, n_lat))],
        axis=2,
    ).astype(b0.dtype)
    zs, hs, cs = [], [x], []
    h = x
    for wt, b in ((w0t, b0), (w1t, b1), (w2t, b2)):
        z = w0 * (np.matmul(h, wt[ids].transpose(0, 2, 1)) + b[ids])
        zs.append(z)
        cs.append(np.cos(z))
        h = np.sin(z)
        hs.append(h)
    out = np.matmul(h, w3m[ids]) + b3[ids]
    err = out[:, :, 0] - targets
    mse[...] = np.mean(err.astype(np.float64) ** 2, axis=1)
    gy = (inv_n2 * err)[:, :, None]
    gw3[ids] = np.matmul(hs[3].transpose(0, 2, 1), gy)
    gb3[ids] = gy.sum(axis=1, keepdims=True)
    gh = np.matmul(gy, w3m[ids].transpose(0, 2, 1))
    for layer in (2, 1, 0):
        gz = gh * cs[layer] * w0
        gw = (gw0, gw1, gw2)[layer]
        gb = (gb0, gb1, gb2)[layer]
        gw[ids] = np.matmul(hs[layer].transpose(0, 2, 1), gz)
        gb[ids] = gz.sum(axis=1, keepdims=True)
        wm = (w0m, w1m, w2m)[layer]
        if layer > 0:
            gh = np.matmul(gz, wm[ids].transpose(0, 2, 1))
        else:
            gin = np.matmul(gz, wm[ids].transpose(0, 2, 1))
    glat[...] = gin[:, :, 3:].sum(axis=1)
    return mse


# ---------------------------------------------------------------------------
# 3D convolution (replicate-padded input supplied by the caller).
# ---------------------------------------------------------------------------


def _make_conv3d_forward():
    def kern(xp, w, b, out):
        c_out, c_in, kd, kh, kw = w.shape
        _, zn, yn, xn = out.shape
        for co in prange(c_out):
            for z in range(zn):
                for y in range(yn):
                    for x in range(xn):
                        s = b[co]
                        for ci in range(c_in):
                            for dz in range(kd):
                                for dy in range(kh):
                                    for dx in range(kw):
                                        s += w[co, ci, dz, dy, dx] * xp[ci, z + dz, y + dy, x + dx]
                        out[co, z, y, x] = s
        return out

    return kern


def _make_conv3d_input_grad():
    def kern(gy, w, gxp):
        c_out, c_in, kd, kh, kw = w.shape
        _, zn, yn, xn = gy.shape
        for ci in prange(c_in):
            for co in range(c_out):
                for z in range(zn):
                    for y in range(yn):
                        for x in range(xn):
                            g = gy[co, z, y, x]
                            for dz in range(kd):
                                for dy in range(kh):
                                    for dx in range(kw):
                                        gxp[ci, z + dz, y + dy, x + dx] += w[co, ci, dz, dy, dx] * g
        return gxp

    return kern


def _make_conv3d_weight_grad():
    def kern(xp, gy, gw, gb):
        c_out, c_in, kd, kh, kw = gw.shape
        _, zn, yn, xn = gy.shape
        for co in prange(c_out):
            sb = 0.0
            for z in range(zn):
                for y in range(yn):
                    for x in range(xn):
                        sb += gy[co, z, y, x]
            gb[co] = sb
            for ci in range(c_in):
                for dz in range(kd):
                    for dy in range(kh):
                        for dx in range(kw):
                            s = 0.0
                            for z in range(zn):
                                for y in range(yn):
                                    for x in range(xn):
                                        s += xp[ci, z + dz, y + dy, x + dx] * gy[co, z, y, x]
                            gw[co, ci, dz, dy, dx] = s
        return gw

    return kern


def _conv3d_forward_np(xp, w, b, out):
    c_out, c_in, kd, kh, kw = w.shape
    _, zn, yn, xn = out.shape
    out[...] = b[:, None, None, None]
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, dz:dz + zn, dy:dy + yn, dx:dx + xn]
                out += np.einsum("oc,czyx->ozyx", w[:, :, dz, dy, dx], patch)
    return out


def _conv3d_input_grad_np(gy, w, gxp):
    c_out, c_in, kd, kh, kw = w.shape
    _, zn, yn, xn = gy.shape
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, dz:dz + zn, dy:dy + yn, dx:dx + xn] += np.einsum(
                    "oc,ozyx->czyx", w[:, :, dz, dy, dx], gy
                )
    return gxp


def _conv3d_weight_grad_np(xp, gy, gw, gb):
    c_out, c_in, kd, kh, kw = gw.shape
    _, zn, yn, xn = gy.shape
    gb[...] = gy.sum(axis=(1, 2, 3))
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                patch = xp[:, dz:dz + zn, dy:dy + yn, dx:dx + xn]
                gw[:, :, dz, dy, dx] = np.einsum("ozyx,czyx->oc", gy, patch)
    return gw


# ---------------------------------------------------------------------------
# Bit packing: fixed-width little-endian bit streams (bit p of the stream is
# bit p & 7 of byte p >> 3).
# ---------------------------------------------------------------------------


def _make_pack_bits():
    def kern(values, bits, out):
        for i in range(values.size):
            v = np.uint64(values[i])
            pos = i * bits
            for j in range(bits):
                if (v >> np.uint64(j)) & np.uint64(1):
                    out[(pos + j) >> 3] |= np.uint8(1 << ((pos + j) & 7))
        return out

    return kern


def _make_unpack_bits():
    def kern(packed, bits, values):
        for i in range(values.size):
            pos = i * bits
            v = np.uint64(0)
            for j in range(bits):
                if packed[(pos + j) >> 3] & np.uint8(1 << ((pos + j) & 7)):
                    v |= np.uint64(1) << np.uint64(j)
            values[i] = v
        return values

    return kern


def _pack_bits_np(values, bits, out):
    shifts = np.arange(bits, dtype=np.uint64)
    bitmat = (values[:, None].astype(np.uint64) >> shifts) & 1
    packed = np.packbits(bitmat.astype(np.uint8).ravel(), bitorder="little")
    out[: packed.size] = packed
    return out


def _unpack_bits_np(packed, bits, values):
    flat = np.unpackbits(packed, bitorder="little")[: values.size * bits]
    bitmat = flat.reshape(values.size, bits).astype(np.uint64)
    values[...] = bitmat @ (np.uint64(1) << np.arange(bits, dtype=np.uint64))
    return values


# ---------------------------------------------------------------------------
# Huffman bit coding.  Codes are canonical; the encoder receives per-symbol
# code values/lengths, the decoder receives canonical first-code tables.
# Both operate on the little-endian bit stream above, with each code's bits
# emitted most-significant first.
# ---------------------------------------------------------------------------


def _make_huffman_encode():
    def kern(data, code_val, code_len, out):
        pos = 0
        for i in range(data.size):
            sym = data[i]
            v = code_val[sym]
            ln = code_len[sym]
            for j in range(ln):
                if (v >> np.uint64(ln - 1 - j)) & np.uint64(1):
                    out[(pos + j) >> 3] |= np.uint8(1 << ((pos + j) & 7))
            pos += ln
        return pos

    return kern


def _make_huffman_decode():
    def kern(bits, nbits, first_code, first_index, max_len, symbols, out):
        count = 0
        code = np.uint64(0)
        ln = 0
        for p in range(nbits):
            bit = (bits[p >> 3] >> np.uint8(p & 7)) & np.uint8(1)
            code = (code << np.uint64(1)) | np.uint64(bit)
            ln += 1
            if ln > max_len:
                return -1
            idx = np.int64(code) - np.int64(first_code[ln])
            if idx >= 0 and first_index[ln] + idx < first_index[ln + 1]:
                out[count] = symbols[first_index[ln] + idx]
                count += 1
                if count == out.size:
                    return count
                code = np.uint64(0)
                ln = 0
        return count

    return kern


def _huffman_encode_np(data, code_val, code_len, out):
    lens = code_len[data].astype(np.int64)
    total = int(lens.sum())
    max_len = int(code_len.max())
    shifts = np.arange(max_len - 1, -1, -1, dtype=np.uint64)
    bitmat = (code_val[data][:, None] >> shifts) & 1
    valid = np.arange(max_len)[None, :] >= (max_len - lens[:, None])
    flat = bitmat[valid].astype(np.uint8)
    packed = np.packbits(flat, bitorder="little")
    out[: packed.size] = packed
    return total


def _huffman_decode_np(bits, nbits, first_code, first_index, max_len, symbols, out):
    stream = np.unpackbits(bits, bitorder="little")[:nbits]
    count = 0
    code = 0
    ln = 0
    want = out.size
    for bit in stream:
        code = (code << 1) | int(bit)
        ln += 1
        if ln > max_len:
            return -1
        idx = code - int(first_code[ln])
        if idx >= 0 and first_index[ln] + idx < first_index[ln + 1]:
            out[count] = symbols[first_index[ln] + idx]
            count += 1
            if count == want:
                return count
            code = 0
            ln = 0
    return count


# ---------------------------------------------------------------------------
# Path selection.
# ---------------------------------------------------------------------------

mlp_forward_np = _mlp_forward_np
mlp_train_step_np = _mlp_train_step_np
conv3d_forward_np = _conv3d_forward_np
conv3d_input_grad_np = _conv3d_input_grad_np
conv3d_weight_grad_np = _conv3d_weight_grad_np
pack_bits_np = _pack_bits_np
unpack_bits_np = _unpack_bits_np
huffman_encode_np = _huffman_encode_np
huffman_decode_np = _huffman_decode_np

if HAVE_NUMBA:
    _fast = dict(parallel=True, fastmath=True, cache=True)
    mlp_forward_nb = njit(**_fast)(_make_mlp_forward())
    mlp_train_step_nb = njit(**_fast)(_make_mlp_train_step())
    conv3d_forward_nb = njit(**_fast)(_make_conv3d_forward())
    conv3d_input_grad_nb = njit(**_fast)(_make_conv3d_input_grad())
    conv3d_weight_grad_nb = njit(**_fast)(_make_conv3d_weight_grad())
    pack_bits_nb = njit(cache=True)(_make_pack_bits())
    unpack_bits_nb = njit(cache=True)(_make_unpack_bits())
    huffman_encode_nb = njit(cache=True)(_make_huffman_encode())
    huffman_decode_nb = njit(cache=True)(_make_huffman_decode())

if USING_NUMBA:
    mlp_forward = mlp_forward_nb
    mlp_train_step = mlp_train_step_nb
    conv3d_forward = conv3d_forward_nb
    conv3d_input_grad = conv3d_input_grad_nb
    conv3d_weight_grad = conv3d_weight_grad_nb
    pack_bits = pack_bits_nb
    unpack_bits = unpack_bits_nb
    huffman_encode = huffman_encode_nb
    huffman_decode = huffman_decode_nb
else:
    mlp_forward = _mlp_forward_np
    mlp_train_step = _mlp_train_step_np
    conv3d_forward = _conv3d_forward_np
    conv3d_input_grad = _conv3d_input_grad_np
    conv3d_weight_grad = _conv3d_weight_grad_np
    pack_bits = _pack_bits_np
    unpack_bits = _unpack_bits_np
    huffman_encode = _huffman_encode_np
    huffman_decode = _huffman_decode_np
