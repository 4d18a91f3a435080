"""Encode/decode orchestration across scales, plus the quality metrics.

Encoding walks the pyramid coarsest to finest.  Each scale trains a group of
MLPs on its target (content at the coarsest scale, residual against the
upsampled *decoded* coarser volume otherwise), compresses the group, and
then reconstructs the scale from the stored-precision state so the next
scale's residual sees exactly what the decoder will produce.  Decoding
replays the reconstruction half from the container alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import cnn as cnn_mod
from .assign import Assignment, assign_blocks
from .compress import (
    ALL_STREAMS,
    CANDIDATE_STREAMS,
    finetune_codebooks,
    make_prune_hook,
    quantize_global,
)
from .container import (
    CnnState,
    ContainerState,
    ScaleState,
    deserialize,
    serialize,
)
from .pyramid import (
    BlockGrid,
    PyramidConfig,
    build_targets,
    filter_effective,
    gather_effective_blocks,
    partition,
    scale_dims,
    scatter_effective_blocks,
)
from .siren import (
    MlpGroup,
    MlpGroupConfig,
    TrainSchedule,
    block_coords,
    forward,
    init_group,
    train_scale,
)
from .volume import Volume4D, combine, denormalize, normalize, residual, upsample


def default_blocks_per_mlp(scales: int, coarsest: int = 8) -> tuple[int, ...]:
    """Target blocks per MLP, coarsest scale first, doubling per finer scale."""
    return tuple(coarsest * 2 ** i for i in range(scales))


@dataclass
class EncodeConfig:
    pyramid: PyramidConfig
    blocks_per_mlp: tuple[int, ...] = None  # coarsest first; default derived
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    beta: int = 8
    latent_dim: int = 16
    neurons: int = 24
    omega0: float = 30.0
    enable_cnn: bool = False
    cnn_epochs: int = 100
    cnn_lr: float = 1e-5
    seed: int = 0
    dtype: type = np.float32

    def __post_init__(self):
        if self.blocks_per_mlp is None:
            self.blocks_per_mlp = default_blocks_per_mlp(self.pyramid.scales)
        self.blocks_per_mlp = tuple(int(b) for b in self.blocks_per_mlp)
        if len(self.blocks_per_mlp) != self.pyramid.scales:
            raise ValueError(
                f"blocks_per_mlp needs {self.pyramid.scales} entries, "
                f"got {len(self.blocks_per_mlp)}"
            )
        if min(self.blocks_per_mlp) < 1:
            raise ValueError("blocks_per_mlp entries must be positive")

    def blocks_for_scale(self, scale: int) -> int:
        # list is coarsest first: scale s -> index 0
        return self.blocks_per_mlp[self.pyramid.scales - scale]

    @property
    def mlp_config(self) -> MlpGroupConfig:
        return MlpGroupConfig(
            neurons=self.neurons,
            latent_dim=self.latent_dim,
            omega0=self.omega0,
            dtype=self.dtype,
        )


@dataclass
class ScaleStats:
    scale: int
    total_blocks: int
    effective_blocks: int
    mlps: int
    sparsity: float
    psnr: float  # of the cumulative reconstruction vs this scale's content


@dataclass
class EncodeResult:
    data: bytes
    recon: Volume4D  # decoded volume, identical to decode(data)
    psnr: float
    compression_rate: float
    per_scale: list


def _empty_scale_state(cfg: EncodeConfig, scale: int, grid: BlockGrid) -> ScaleState:
    from .container import _mask_shapes

    shapes = _mask_shapes(cfg.mlp_config, 0)
    return ScaleState(
        scale=scale,
        counts=grid.counts,
        m=0,
        effective=grid.effective.copy(),
        assignment=np.zeros(0, np.uint32),
        latents=np.zeros((0, cfg.latent_dim), np.float32),
        masks={sk: np.ones(shapes[sk], bool) for sk in ALL_STREAMS},
        codebooks={sk: np.zeros(0, np.float32) for sk in ALL_STREAMS},
        indices={sk: np.zeros(0, np.uint32) for sk in ALL_STREAMS},
    )


def _scale_state_from_group(
    scale: int, grid: BlockGrid, assignment: Assignment, group: MlpGroup, quant
) -> ScaleState:
    return ScaleState(
        scale=scale,
        counts=grid.counts,
        m=group.m,
        effective=grid.effective.copy(),
        assignment=assignment.cluster_of.astype(np.uint32),
        latents=group.latents.astype(np.float32),
        masks={sk: (group.mask_w if sk[1] == "w" else group.mask_b)[sk[0]].copy()
               for sk in ALL_STREAMS},
        codebooks=dict(quant.codebooks),
        indices=dict(quant.indices),
    )


def _scale_residual_volume(
    st: ScaleState, header: ContainerState, dims_i: tuple[int, int, int, int]
) -> Volume4D:
    """Reconstruct one scale's contribution from stored-precision state."""
    grid = BlockGrid(st.scale, st.counts, header.block_dims, st.effective.copy())
    if st.m == 0 or st.n_effective == 0:
        return Volume4D.zeros(dims_i)
    cfg = header.mlp_config
    weights, biases = st.materialize_params(cfg)
    group = MlpGroup(cfg, weights, biases, st.latents)
    coords = block_coords(header.block_dims, cfg.dtype)
    ids = st.assignment.astype(np.int64)
    values = forward(group, ids, coords, group.latents)
    return scatter_effective_blocks(grid, dims_i, values.astype(np.float64))


def _apply_cnn(header: ContainerState, vol: Volume4D) -> Volume4D:
    cst = header.cnn
    cfg = cnn_mod.CnnConfig(cst.layers, cst.channels, cst.kernel, cst.bits)
    params = cnn_mod.params_from_quantized(cfg, cst.codebook, cst.indices)
    out = np.empty_like(vol.data)
    for ti in range(vol.data.shape[0]):
        out[ti] = cnn_mod.cnn_forward(params, vol.data[ti])
    return Volume4D(out)


def _reconstruct(header: ContainerState, upto_scale: int, apply_cnn: bool) -> Volume4D:
    recon = None
    for st in header.scale_states:
        if st.scale < upto_scale:
            break
        dims_i = scale_dims(header.dims, st.scale)
        resid = _scale_residual_volume(st, header, dims_i)
        recon = resid if recon is None else combine(upsample(recon), resid)
    if recon is None:
        raise ValueError("no scale states available for reconstruction")
    if apply_cnn and header.cnn is not None:
        recon = _apply_cnn(header, recon)
    return recon


def encode(vol: Volume4D, cfg: EncodeConfig, log=None) -> EncodeResult:
    """Compress a volume into container bytes; deterministic per seed."""
    cfg.pyramid.validate_dims(vol.dims)
    emit = log if log is not None else (lambda **kv: None)
    norm_vol, vrange = normalize(vol)
    levels = build_targets(norm_vol, cfg.pyramid)
    s = cfg.pyramid.scales
    seed_root = np.random.SeedSequence(cfg.seed)
    scale_seeds = seed_root.spawn(s + 1)

    header = ContainerState(
        dims=vol.dims, vrange=vrange, scales=s, block_dims=cfg.pyramid.block_dims,
        latent_dim=cfg.latent_dim, neurons=cfg.neurons, omega0=cfg.omega0,
        beta=cfg.beta, scale_states=[], cnn=None,
    )

    recon = None
    per_scale = []
    for scale in range(s, 0, -1):
        coarsest = scale == s
        dims_i = scale_dims(vol.dims, scale)
        gt_i = levels[scale - 1]
        if coarsest:
            target = gt_i
            up = None
        else:
            up = upsample(recon)
            target = residual(gt_i, up)
        grid = partition(scale, cfg.pyramid, vol.dims)
        if vrange.degenerate:
            # constant input: the flagged range reconstructs it exactly, so
            # no block carries information worth encoding
            grid = BlockGrid(scale, grid.counts, grid.block_dims,
                             np.zeros(grid.n_blocks, dtype=bool))
        else:
            grid = filter_effective(
                grid, target, cfg.pyramid.residual_threshold, coarsest=coarsest
            )
        n_eff = grid.n_effective
        emit(scale=scale, blocks=grid.n_blocks, effective=n_eff)

        if n_eff == 0:
            state = _empty_scale_state(cfg, scale, grid)
        else:
            blocks = gather_effective_blocks(target, grid)
            a_seed, i_seed = (int(c.generate_state(1)[0]) for c in scale_seeds[s - scale].spawn(2))
            assignment = assign_blocks(
                blocks, cfg.blocks_for_scale(scale), seed=a_seed, scale=scale
            )
            group = init_group(cfg.mlp_config, assignment.m, n_eff, seed=i_seed)

            def scale_log(**kv):
                emit(scale=scale, **kv)

            hook = make_prune_hook(group, cfg.schedule, scale_log)
            train_scale(
                group, assignment, blocks, cfg.pyramid.block_dims, cfg.schedule,
                prune_hook=hook, log=scale_log,
            )
            quant = quantize_global(group, cfg.beta)
            finetune_codebooks(
                group, quant, assignment, blocks, cfg.pyramid.block_dims,
                epochs=cfg.schedule.finetune_epochs, lr=cfg.schedule.finetune_lr,
                log=scale_log,
            )
            state = _scale_state_from_group(scale, grid, assignment, group, quant)

        header.scale_states.append(state)
        resid = _scale_residual_volume(state, header, dims_i)
        recon = resid if coarsest else combine(up, resid)
        scale_psnr = psnr(gt_i, recon)
        sp = 0.0
        if n_eff and state.m:
            masked = sum(int((~state.masks[sk]).sum()) for sk in CANDIDATE_STREAMS)
            total = sum(state.masks[sk].size for sk in CANDIDATE_STREAMS)
            sp = masked / total
        per_scale.append(
            ScaleStats(scale, grid.n_blocks, n_eff, state.m, sp, scale_psnr)
        )
        emit(scale=scale, mlps=state.m, sparsity=round(sp, 4), scale_psnr=round(scale_psnr, 3))

    if cfg.enable_cnn and not vrange.degenerate:
        cnn_seed = int(scale_seeds[s].generate_state(1)[0])
        ccfg = cnn_mod.CnnConfig()
        params = cnn_mod.init_cnn(ccfg, seed=cnn_seed)
        decoded_ts = [recon.data[ti] for ti in range(recon.data.shape[0])]
        gt_ts = [levels[0].data[ti] for ti in range(recon.data.shape[0])]
        cnn_mod.train_cnn(
            params, decoded_ts, gt_ts, epochs=cfg.cnn_epochs, lr=cfg.cnn_lr, log=emit
        )
        codebook, indices = cnn_mod.quantize_cnn(params, bits=ccfg.quant_bits)
        header.cnn = CnnState(
            ccfg.layers, ccfg.channels, ccfg.kernel, ccfg.quant_bits, codebook, indices
        )
        recon = _apply_cnn(header, recon)

    data = serialize(header)
    final = denormalize(recon, vrange)
    quality = psnr(vol, final)
    raw_bytes = vol.nvox * 4
    cr = raw_bytes / len(data)
    emit(psnr=round(quality, 4), compression_rate=round(cr, 2), bytes=len(data))
    return EncodeResult(data, final, quality, cr, per_scale)


def decode(data: bytes) -> Volume4D:
    """Reconstruct the full volume (CNN applied when present)."""
    header = deserialize(data, upto_scale=1)
    recon = _reconstruct(header, 1, apply_cnn=True)
    return denormalize(recon, header.vrange)


def decode_scale(data: bytes, upto_scale: int) -> Volume4D:
    """Preview from scales s..upto_scale, upsampled to full resolution.

    The CNN stage is never applied here; decode_scale(1) equals decode()
    when no CNN payload is present.
    """
    header = deserialize(data, upto_scale=upto_scale)
    recon = _reconstruct(header, upto_scale, apply_cnn=False)
    for _ in range(upto_scale - 1):
        recon = upsample(recon)
    return denormalize(recon, header.vrange)


def identity_roundtrip(vol: Volume4D, cfg: PyramidConfig) -> Volume4D:
    """Run the structural pipeline with block values standing in for MLP output.

    Exercises partition/filter/gather/scatter and the resampling recurrence
    end to end; with threshold 0 the result must equal the input bit for bit.
    The volume is treated as already normalized (no range mapping).
    """
    levels = build_targets(vol, cfg)
    recon = None
    for scale in range(cfg.scales, 0, -1):
        coarsest = scale == cfg.scales
        gt_i = levels[scale - 1]
        if coarsest:
            target = gt_i
            up = None
        else:
            up = upsample(recon)
            target = residual(gt_i, up)
        grid = partition(scale, cfg, vol.dims)
        grid = filter_effective(grid, target, cfg.residual_threshold, coarsest=coarsest)
        blocks = gather_effective_blocks(target, grid)
        resid = scatter_effective_blocks(grid, scale_dims(vol.dims, scale), blocks)
        recon = resid if coarsest else combine(up, resid)
    return recon


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------


def psnr(reference: Volume4D, test: Volume4D) -> float:
    """10*log10(peak^2 / MSE) with peak = reference value range; inf if equal."""
    if reference.data.shape != test.data.shape:
        raise ValueError("psnr: dims mismatch")
    mse = float(np.mean((reference.data - test.data) ** 2))
    if mse == 0.0:
        return float("inf")
    peak = float(reference.data.max() - reference.data.min())
    if peak == 0.0:
        return float("-inf")
    return 10.0 * np.log10(peak * peak / mse)


def _surface_points(field: np.ndarray, isovalue: float) -> np.ndarray:
    above = field > isovalue
    crossing = np.zeros_like(above)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        diff = above[tuple(lo)] != above[tuple(hi)]
        crossing[tuple(lo)] |= diff
        crossing[tuple(hi)] |= diff
    zyx = np.argwhere(crossing)
    return zyx[:, ::-1].astype(np.float64)  # (x, y, z) voxel centers


def chamfer_distance(a: Volume4D, b: Volume4D, isovalue: float) -> float:
    """Symmetric mean nearest-neighbor distance between isosurface-crossing
    voxel centers, averaged over timesteps."""
    if a.data.shape != b.data.shape:
        raise ValueError("chamfer: dims mismatch")
    per_t = []
    for ti in range(a.data.shape[0]):
        pa = _surface_points(a.data[ti], isovalue)
        pb = _surface_points(b.data[ti], isovalue)
        if pa.size == 0 or pb.size == 0:
            raise ValueError(
                f"chamfer: no surface crossings at isovalue {isovalue} (timestep {ti})"
            )
        d_ab = cKDTree(pb).query(pa)[0].mean()
        d_ba = cKDTree(pa).query(pb)[0].mean()
        per_t.append(0.5 * (d_ab + d_ba))
    return float(np.mean(per_t))
