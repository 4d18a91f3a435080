import numpy as np
import pytest

from ecnr.cnn import (
    CnnConfig,
    CnnParams,
    cnn_backward,
    cnn_forward,
    init_cnn,
    params_from_quantized,
    quantize_cnn,
    train_cnn,
)


class TestForward:
    def test_identity_at_init(self, rng):
        params = init_cnn(CnnConfig(), seed=0)
        x = rng.uniform(-1, 1, (6, 5, 4))
        assert np.array_equal(cnn_forward(params, x), x)

    def test_zero_params_identity(self, rng):
        params = init_cnn(CnnConfig(), seed=1)
        for w in params.weights:
            w[...] = 0
        for b in params.biases:
            b[...] = 0
        x = rng.uniform(-1, 1, (4, 4, 4))
        assert np.array_equal(cnn_forward(params, x), x)

    @pytest.mark.parametrize("shape", [(3, 3, 3), (5, 4, 3), (8, 8, 8)])
    def test_shape_preserved(self, rng, shape):
        params = init_cnn(CnnConfig(layers=3, channels=4), seed=2)
        x = rng.uniform(-1, 1, shape)
        assert cnn_forward(params, x).shape == shape

    def test_center_tap_reduces_to_affine_chain(self, rng):
        # with only the center tap nonzero, each layer is per-voxel affine
        cfg = CnnConfig(layers=3, channels=2)
        params = init_cnn(cfg, seed=3)
        taps = []
        for layer, w in enumerate(params.weights):
            w[...] = 0
            center = rng.uniform(-0.6, 0.6, (w.shape[0], w.shape[1]))
            w[:, :, 1, 1, 1] = center
            params.biases[layer][...] = rng.uniform(-0.1, 0.1, w.shape[0])
            taps.append(center)
        x = rng.uniform(-1, 1, (4, 4, 4))
        y = cnn_forward(params, x)

        h = x[None] * np.ones((1, 1, 1, 1))
        for layer in range(cfg.layers):
            z = np.einsum("oc,czyx->ozyx", taps[layer], h) + params.biases[layer][:, None, None, None]
            h = np.maximum(z, 0) if layer < cfg.layers - 1 else z
        expect = x + h[0]
        assert np.allclose(y, expect, rtol=1e-12, atol=1e-12)

    def test_deterministic(self, rng):
        params = init_cnn(CnnConfig(layers=3, channels=4), seed=4)
        x = rng.uniform(-1, 1, (5, 5, 5))
        assert np.array_equal(cnn_forward(params, x), cnn_forward(params, x))


class TestBackward:
    def test_gradcheck(self, rng):
        from gradcheck import relative_errors

        cfg = CnnConfig(layers=3, channels=3)
        params = init_cnn(cfg, seed=5)
        params.weights[-1][...] = rng.uniform(-0.2, 0.2, params.weights[-1].shape)
        params.biases[-1][...] = rng.uniform(-0.2, 0.2, params.biases[-1].shape)
        x = rng.uniform(-1, 1, (5, 5, 5))
        gt = rng.uniform(-1, 1, (5, 5, 5))
        y, cache = cnn_forward(params, x, want_cache=True)
        err = y - gt
        gy = 2.0 * err / err.size
        gw, gb, _ = cnn_backward(params, cache, gy)

        def loss():
            e = cnn_forward(params, x) - gt
            return float((e * e).mean())

        pairs, idxs = [], []
        for layer in range(cfg.layers):
            pairs.append((params.weights[layer], gw[layer]))
            idxs.append(rng.choice(params.weights[layer].size, 20, replace=False))
            pairs.append((params.biases[layer], gb[layer]))
            idxs.append(range(params.biases[layer].size))
        rels = relative_errors(loss, pairs, idxs)
        assert rels.max() <= 1e-3


class TestTrain:
    def test_identity_pairs_stay_near_init(self, rng):
        cfg = CnnConfig(layers=3, channels=4)
        params = init_cnn(cfg, seed=6)
        before = [w.copy() for w in params.weights]
        vols = [rng.uniform(-1, 1, (6, 6, 6)) for _ in range(2)]
        train_cnn(params, vols, [v.copy() for v in vols], epochs=10, lr=1e-5)
        # loss starts at 0 (identity network), so parameters barely move
        for w, b4 in zip(params.weights, before):
            assert np.abs(w - b4).max() < 1e-6

    def test_reduces_blocky_artifact(self, rng):
        cfg = CnnConfig(layers=3, channels=4)
        params = init_cnn(cfg, seed=7)
        gx, gy_, gz = np.meshgrid(*[np.linspace(-1, 1, 8)] * 3, indexing="ij")
        smooth = np.sin(2 * gx) * np.cos(gy_) + 0.5 * gz
        blocky = smooth.copy()
        blocky[:4] += 0.15  # block-boundary step artifact
        pre = float(((blocky - smooth) ** 2).mean())
        train_cnn(params, [blocky], [smooth], epochs=100, lr=1e-3)
        post = float(((cnn_forward(params, blocky) - smooth) ** 2).mean())
        assert post <= pre

    def test_shape_mismatch(self, rng):
        params = init_cnn(CnnConfig(layers=3, channels=2), seed=8)
        with pytest.raises(ValueError, match="mismatch"):
            train_cnn(params, [np.zeros((4, 4, 4))], [np.zeros((4, 4, 5))], epochs=1)


class TestQuantize:
    def test_cardinality(self, rng):
        params = init_cnn(CnnConfig(), seed=9)
        for w in params.weights:
            w[...] = rng.uniform(-1, 1, w.shape)
        quantize_cnn(params, bits=9)
        assert np.unique(params.flatten()).size <= 512

    def test_all_equal_single_entry(self):
        params = init_cnn(CnnConfig(layers=3, channels=2), seed=10)
        for w in params.weights:
            w[...] = 0.5
        for b in params.biases:
            b[...] = 0.5
        cb, idx = quantize_cnn(params, bits=9)
        assert cb.size == 1 and np.all(idx == 0)

    def test_nearest_centroid_oracle(self, rng):
        cfg = CnnConfig(layers=3, channels=2)
        params = init_cnn(cfg, seed=11)
        for w in params.weights:
            w[...] = rng.uniform(-1, 1, w.shape)
        flat_before = params.flatten()
        cb, idx = quantize_cnn(params, bits=4)
        cb64 = cb.astype(np.float64)
        nearest = cb64[np.abs(flat_before[:, None] - cb64[None, :]).argmin(axis=1)]
        assert np.allclose(params.flatten(), nearest)

    def test_roundtrip_through_state(self, rng):
        cfg = CnnConfig(layers=3, channels=2)
        params = init_cnn(cfg, seed=12)
        for w in params.weights:
            w[...] = rng.uniform(-1, 1, w.shape)
        cb, idx = quantize_cnn(params, bits=6)
        rebuilt = params_from_quantized(cfg, cb, idx)
        for a, b in zip(params.weights, rebuilt.weights):
            assert np.array_equal(a, b)
        for a, b in zip(params.biases, rebuilt.biases):
            assert np.array_equal(a, b)
