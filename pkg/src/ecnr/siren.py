"""Batched groups of small sinusoidal MLPs with per-block latent codes.

One group holds ``m`` identical-architecture networks as stacked parameter
tensors (m, fan_in, fan_out), trained jointly: every step, each MLP fits one
whole block of voxels (its cluster's block at the current slot).  The
architecture is fixed at three sine layers plus a linear output layer; the
input is the voxel's local coordinate concatenated with the block's latent
code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .assign import Assignment


@dataclass(frozen=True)
class MlpGroupConfig:
    neurons: int = 24
    latent_dim: int = 16
    omega0: float = 30.0
    hidden_layers: int = 3
    dtype: type = np.float32

    def __post_init__(self):
        if self.hidden_layers != 3:
            raise ValueError("architecture is fixed at 3 sine layers + 1 linear layer")
        if self.neurons < 1 or self.latent_dim < 1:
            raise ValueError("neurons and latent_dim must be positive")

    @property
    def in_dim(self) -> int:
        return 3 + self.latent_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        h = self.neurons
        return [(self.in_dim, h), (h, h), (h, h), (h, 1)]


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 500
    lr0: float = 1e-3
    lr_decay_per_prune: float = 0.75
    prune_epochs: tuple[int, ...] = (150, 225, 300, 375)
    prune_sparsity: tuple[float, ...] = (0.30, 0.40, 0.45, 0.50)
    lambda_b: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 2e-5
    finetune_epochs: int = 75
    finetune_lr: float = 1e-5

    def __post_init__(self):
        if len(self.prune_epochs) != len(self.prune_sparsity):
            raise ValueError("prune_epochs and prune_sparsity must have equal length")
        prev = -1.0
        for s in self.prune_sparsity:
            if not (0.0 <= s < 1.0) or s <= prev:
                raise ValueError("prune sparsities must increase strictly within [0, 1)")
            prev = s


class MlpGroup:
    """Stacked parameters, prune masks, latent codes, and Adam state."""

    def __init__(self, cfg: MlpGroupConfig, weights, biases, latents):
        self.cfg = cfg
        self.weights = [np.ascontiguousarray(w, dtype=cfg.dtype) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=cfg.dtype) for b in biases]
        self.latents = np.ascontiguousarray(latents, dtype=cfg.dtype)
        self.mask_w = [np.ones(w.shape, dtype=bool) for w in self.weights]
        self.mask_b = [np.ones(b.shape, dtype=bool) for b in self.biases]
        self.any_pruned = False  # fast path: skip mask application until a prune happens
        self.step_count = 0
        self._adam = None

    @property
    def m(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_blocks(self) -> int:
        return self.latents.shape[0]

    def parameters_finite(self) -> bool:
        arrays = self.weights + self.biases + [self.latents]
        return all(np.isfinite(a).all() for a in arrays)

    def apply_masks(self) -> None:
        if not self.any_pruned:
            return
        for w, mk in zip(self.weights, self.mask_w):
            w[~mk] = 0
        for b, mk in zip(self.biases, self.mask_b):
            b[~mk] = 0

    def transposed_weights(self) -> list[np.ndarray]:
        return [np.ascontiguousarray(w.transpose(0, 2, 1)) for w in self.weights[:3]]

    def _adam_state(self):
        if self._adam is None:
            self._adam = {
                "mw": [np.zeros_like(w) for w in self.weights],
                "vw": [np.zeros_like(w) for w in self.weights],
                "mb": [np.zeros_like(b) for b in self.biases],
                "vb": [np.zeros_like(b) for b in self.biases],
                "ml": np.zeros_like(self.latents),
                "vl": np.zeros_like(self.latents),
            }
        return self._adam


def init_group(
    cfg: MlpGroupConfig, m: int, n_blocks: int, seed: int = 0
) -> MlpGroup:
    """Sinusoidal-network initialization, deterministic per seed.

    First-layer weights ~ U(-1/fan_in, 1/fan_in); deeper layers (including
    the linear output) ~ U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0);
    biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); latents ~ U(-1e-4, 1e-4).
    """
    if m < 1:
        raise ValueError(f"mlp count must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        if layer == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / cfg.omega0
        weights.append(rng.uniform(-bound, bound, size=(m, fan_in, fan_out)))
        b_bound = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-b_bound, b_bound, size=(m, 1, fan_out)))
    latents = rng.uniform(-1e-4, 1e-4, size=(n_blocks, cfg.latent_dim))
    return MlpGroup(cfg, weights, biases, latents)


def block_coords(block_dims: tuple[int, int, int], dtype=np.float32) -> np.ndarray:
    """Local coordinates of a block's voxels, (zb*yb*xb, 3) in [-1, 1]^3.

    Rows follow the (z, y, x) C-order flattening used by block extraction;
    columns are (x, y, z).  Axes of extent 1 sit at 0.
    """
    xb, yb, zb = block_dims

    def axis(n):
        if n == 1:
            return np.zeros(1)
        return -1.0 + 2.0 * np.arange(n) / (n - 1)

    cz, cy, cx = np.meshgrid(axis(zb), axis(yb), axis(xb), indexing="ij")
    return np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1).astype(dtype)


def forward(
    group: MlpGroup, mlp_ids: np.ndarray, coords: np.ndarray, latents: np.ndarray
) -> np.ndarray:
    """Predict voxel values for a batch of rows; row r uses MLP mlp_ids[r]."""
    dt = group.cfg.dtype
    m = group.m
    ids = np.ascontiguousarray(mlp_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= m):
        raise ValueError(f"mlp id out of range [0, {m})")
    coords = np.ascontiguousarray(coords, dtype=dt)
    latents = np.ascontiguousarray(latents, dtype=dt)
    out = np.empty((ids.size, coords.shape[0]), dtype=dt)
    wt = group.transposed_weights()
    kernels.mlp_forward(
        ids, wt[0], group.biases[0], wt[1], group.biases[1], wt[2], group.biases[2],
        group.weights[3], group.biases[3], coords, latents, dt(group.cfg.omega0), out,
    )
    return out


def backward(
    group: MlpGroup,
    mlp_ids: np.ndarray,
    coords: np.ndarray,
    latents: np.ndarray,
    targets: np.ndarray,
):
    """Per-row MSE loss gradients for parameters and latent codes.

    Each row must use a distinct MLP id.  Returns (grads, per-row mse) where
    grads holds full-shape weight/bias arrays plus per-row latent gradients;
    pruned parameters receive exactly zero gradient.
    """
    dt = group.cfg.dtype
    ids = np.ascontiguousarray(mlp_ids, dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise ValueError("backward: rows must use distinct MLP ids")
    coords = np.ascontiguousarray(coords, dtype=dt)
    latents = np.ascontiguousarray(latents, dtype=dt)
    targets = np.ascontiguousarray(targets, dtype=dt)
    n_vox = coords.shape[0]
    gw = [np.zeros_like(w) for w in group.weights]
    gb = [np.zeros_like(b) for b in group.biases]
    glat = np.zeros_like(latents)
    mse = np.zeros(ids.size, dtype=np.float64)
    wt = group.transposed_weights()
    kernels.mlp_train_step(
        ids,
        group.weights[0], wt[0], group.biases[0],
        group.weights[1], wt[1], group.biases[1],
        group.weights[2], wt[2], group.biases[2],
        group.weights[3], group.biases[3],
        coords, latents, targets, dt(group.cfg.omega0), dt(2.0 / n_vox),
        gw[0], gb[0], gw[1], gb[1], gw[2], gb[2], gw[3], gb[3], glat, mse,
    )
    if group.any_pruned:
        for g, mk in zip(gw, group.mask_w):
            g[~mk] = 0
        for g, mk in zip(gb, group.mask_b):
            g[~mk] = 0
    return {"w": gw, "b": gb, "latents": glat}, mse


def adam_step(
    group: MlpGroup,
    grads: dict,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 2e-5,
    eps: float = 1e-8,
    latent_grads: np.ndarray | None = None,
) -> None:
    """One Adam update with decoupled weight decay on weights only.

    ``grads["latents"]`` may be per-row; pass the dense (n_blocks, latent_dim)
    gradient via ``latent_grads`` in that case.  Masked parameters stay 0.
    """
    dt = group.cfg.dtype
    st = group._adam_state()
    group.step_count += 1
    t = group.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t

    def update(p, g, mom, vel, decay):
        mom *= beta1
        mom += (1.0 - beta1) * g
        vel *= beta2
        vel += (1.0 - beta2) * (g * g)
        step = (mom / c1) / (np.sqrt(vel / c2) + eps)
        if decay:
            step = step + weight_decay * p
        p -= dt(lr) * step.astype(dt)

    for layer in range(4):
        update(group.weights[layer], grads["w"][layer], st["mw"][layer], st["vw"][layer], True)
        update(group.biases[layer], grads["b"][layer], st["mb"][layer], st["vb"][layer], False)
    glat = latent_grads if latent_grads is not None else grads["latents"]
    update(group.latents, glat, st["ml"], st["vl"], False)
    group.apply_masks()


def evaluate_per_mlp_loss(
    group: MlpGroup, assignment: Assignment, blocks: np.ndarray, coords: np.ndarray
) -> np.ndarray:
    """Average block MSE of each MLP over its assigned blocks."""
    dt = group.cfg.dtype
    ids = np.ascontiguousarray(assignment.cluster_of, dtype=np.int64)
    out = forward(group, ids, coords, group.latents)
    err = out.astype(np.float64) - blocks.astype(np.float64)
    mse_rows = (err * err).mean(axis=1)
    sums = np.bincount(assignment.cluster_of, weights=mse_rows, minlength=assignment.m)
    counts = np.maximum(assignment.cluster_sizes, 1)
    return sums / counts


def train_scale(
    group: MlpGroup,
    assignment: Assignment,
    blocks: np.ndarray,
    block_dims: tuple[int, int, int],
    schedule: TrainSchedule,
    prune_hook=None,
    log=None,
) -> np.ndarray:
    """Fit one scale's blocks; returns the final per-MLP average block MSE.

    Per epoch, slot by slot, every MLP owning a block at that slot processes
    it as one batch row.  ``prune_hook(group, epoch, per_mlp_loss)`` runs at
    each scheduled epoch, after which the learning rate decays.
    """
    dt = group.cfg.dtype
    coords = block_coords(block_dims, dt)
    n_vox = coords.shape[0]
    if blocks.shape[0] != assignment.n_blocks:
        raise ValueError("blocks and assignment disagree on block count")

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

    lr = schedule.lr0
    prune_round = 0
    for epoch in range(1, schedule.epochs + 1):
        epoch_loss = 0.0
        for ids, rows, targets in slot_batches:
            grads, mse = backward(group, ids, coords, group.latents[rows], targets)
            dense_lat = np.zeros_like(group.latents)
            dense_lat[rows] = grads["latents"]
            adam_step(
                group, grads, lr,
                beta1=schedule.beta1, beta2=schedule.beta2,
                weight_decay=schedule.weight_decay, latent_grads=dense_lat,
            )
            epoch_loss += float(mse.sum())
        epoch_loss /= assignment.n_blocks
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"training diverged at epoch {epoch} (loss={epoch_loss})")
        if log is not None:
            log(epoch=epoch, loss=epoch_loss, lr=lr)
        if prune_round < len(schedule.prune_epochs) and epoch == schedule.prune_epochs[prune_round]:
            if prune_hook is not None:
                per_mlp = evaluate_per_mlp_loss(group, assignment, blocks, coords)
                prune_hook(group, epoch, per_mlp)
            lr *= schedule.lr_decay_per_prune
            prune_round += 1
    return evaluate_per_mlp_loss(group, assignment, blocks, coords)
