"""Lightweight 3D CNN that cleans block-boundary artifacts at the finest scale.

Five 3x3x3 convolution layers (1 -> 32 -> 32 -> 32 -> 32 -> 1 channels) with
replicate padding, ReLU after all but the last, and a global residual
connection.  The final layer is zero-initialized so the untrained network is
the identity.  Applied independently per timestep; compute is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .compress import kmeans_1d


@dataclass(frozen=True)
class CnnConfig:
    layers: int = 5
    channels: int = 32
    kernel: int = 3
    quant_bits: int = 9

    @property
    def channel_chain(self) -> list[int]:
        return [1] + [self.channels] * (self.layers - 1) + [1]

    @property
    def n_params(self) -> int:
        n = 0
        for ci, co in zip(self.channel_chain[:-1], self.channel_chain[1:]):
            n += co * ci * self.kernel ** 3 + co
        return n


@dataclass
class CnnParams:
    cfg: CnnConfig
    weights: list  # per layer (c_out, c_in, k, k, k) float64
    biases: list  # per layer (c_out,) float64

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def unflatten(self, flat: np.ndarray) -> None:
        pos = 0
        for w in self.weights:
            w[...] = flat[pos : pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = flat[pos : pos + b.size]
            pos += b.size


def init_cnn(cfg: CnnConfig, seed: int = 0) -> CnnParams:
    """He-uniform init; the last layer starts at zero (identity network)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    chain = cfg.channel_chain
    for layer, (ci, co) in enumerate(zip(chain[:-1], chain[1:])):
        shape = (co, ci, cfg.kernel, cfg.kernel, cfg.kernel)
        if layer == cfg.layers - 1:
            weights.append(np.zeros(shape))
        else:
            bound = np.sqrt(6.0 / (ci * cfg.kernel ** 3))
            weights.append(rng.uniform(-bound, bound, size=shape))
        biases.append(np.zeros(co))
    return CnnParams(cfg, weights, biases)


def _pad_replicate(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)), mode="edge")


def _fold_pad_grad(gxp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of replicate padding: padded-cell grads add into edge cells."""
    c, zp, yp, xp = gxp.shape
    zi = np.clip(np.arange(zp) - p, 0, zp - 2 * p - 1)
    yi = np.clip(np.arange(yp) - p, 0, yp - 2 * p - 1)
    xi = np.clip(np.arange(xp) - p, 0, xp - 2 * p - 1)
    gx = np.zeros((c, zp - 2 * p, yp - 2 * p, xp - 2 * p))
    np.add.at(
        gx,
        (slice(None), zi[:, None, None], yi[None, :, None], xi[None, None, :]),
        gxp,
    )
    return gx


def cnn_forward(params: CnnParams, vol3d: np.ndarray, *, want_cache: bool = False):
    """y = x + conv_stack(x); shape preserved for any input of extent >= 1."""
    cfg = params.cfg
    p = cfg.kernel // 2
    x = vol3d[None].astype(np.float64)
    cache = []
    h = x
    for layer in range(cfg.layers):
        hp = _pad_replicate(h, p)
        co = params.weights[layer].shape[0]
        out = np.empty((co,) + h.shape[1:])
        kernels.conv3d_forward(hp, params.weights[layer], params.biases[layer], out)
        if want_cache:
            cache.append((hp, out.copy()))
        h = np.maximum(out, 0.0) if layer < cfg.layers - 1 else out
    y = x[0] + h[0]
    if want_cache:
        return y, cache
    return y


def cnn_backward(params: CnnParams, cache: list, gy: np.ndarray):
    """Gradients of the conv stack given dLoss/dOutput (residual add included)."""
    cfg = params.cfg
    p = cfg.kernel // 2
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    gh = gy[None].astype(np.float64)
    for layer in range(cfg.layers - 1, -1, -1):
        hp, pre = cache[layer]
        if layer < cfg.layers - 1:
            gh = gh * (pre > 0)
        kernels.conv3d_weight_grad(hp, gh, gw[layer], gb[layer])
        gxp = np.zeros_like(hp)
        kernels.conv3d_input_grad(gh, params.weights[layer], gxp)
        gh = _fold_pad_grad(gxp, p)
    # the global residual connection adds gy to the input gradient
    gx = gh[0] + gy
    return gw, gb, gx


def train_cnn(
    params: CnnParams,
    decoded: list,
    reference: list,
    epochs: int = 100,
    lr: float = 1e-5,
    log=None,
) -> CnnParams:
    """Adam on conv parameters, MSE against the reference, per-timestep batches."""
    if len(decoded) != len(reference):
        raise ValueError("decoded and reference timestep counts differ")
    for d, g in zip(decoded, reference):
        if d.shape != g.shape:
            raise ValueError(f"timestep shape mismatch {d.shape} vs {g.shape}")
    mw = [np.zeros_like(w) for w in params.weights]
    vw = [np.zeros_like(w) for w in params.weights]
    mb = [np.zeros_like(b) for b in params.biases]
    vb = [np.zeros_like(b) for b in params.biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    for epoch in range(1, epochs + 1):
        total = 0.0
        for d, g in zip(decoded, reference):
            y, cache = cnn_forward(params, d, want_cache=True)
            err = y - g
            loss = float((err * err).mean())
            total += loss
            gy = 2.0 * err / err.size
            gw, gb, _ = cnn_backward(params, cache, gy)
            t += 1
            c1 = 1.0 - beta1 ** t
            c2 = 1.0 - beta2 ** t
            for i in range(params.cfg.layers):
                mw[i] = beta1 * mw[i] + (1 - beta1) * gw[i]
                vw[i] = beta2 * vw[i] + (1 - beta2) * gw[i] ** 2
                params.weights[i] -= lr * (mw[i] / c1) / (np.sqrt(vw[i] / c2) + eps)
                mb[i] = beta1 * mb[i] + (1 - beta1) * gb[i]
                vb[i] = beta2 * vb[i] + (1 - beta2) * gb[i] ** 2
                params.biases[i] -= lr * (mb[i] / c1) / (np.sqrt(vb[i] / c2) + eps)
        total /= max(len(decoded), 1)
        if not np.isfinite(total):
            raise RuntimeError(f"cnn training diverged at epoch {epoch}")
        if log is not None:
            log(cnn_epoch=epoch, loss=total)
    return params


def quantize_cnn(params: CnnParams, bits: int = 9):
    """One shared codebook over all conv parameters; no fine-tuning.

    Returns (codebook float32, indices uint32) and replaces the parameters
    with their quantized values.
    """
    flat = params.flatten()
    centers = kmeans_1d(flat, 2 ** bits).astype(np.float32)
    edges = (centers[1:].astype(np.float64) + centers[:-1].astype(np.float64)) / 2
    idx = np.searchsorted(edges, flat).astype(np.uint32)
    params.unflatten(centers[idx].astype(np.float64))
    return centers, idx


def params_from_quantized(cfg: CnnConfig, codebook: np.ndarray, indices: np.ndarray) -> CnnParams:
    """Rebuild CnnParams from a stored codebook and index stream."""
    params = init_cnn(cfg, seed=0)
    flat = codebook.astype(np.float64)[indices]
    params.unflatten(flat)
    return params
