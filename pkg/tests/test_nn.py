import numpy as np
import pytest

from rct import nn
from rct.exceptions import DomainError, UsageError
from rct.quant import QuantizedTensor, QuantParams, compute_params, dequantize, quantize


def dense_model(w, b, k=8, act_bits=None):
    w = np.asarray(w, float)
    layer = nn.Dense(w.shape[1], w.shape[0], name="fc")
    return nn.quantize_model([layer], (w.shape[1],), {"fc.weight": w, "fc.bias": np.asarray(b, float)},
                             k, act_bits)


def random_small_model(rng, conv=False):
    if conv:
        specs = [{"type": "conv2d", "filters": 2, "kernel": 2, "stride": 1, "padding": 0},
                 {"type": "relu"}, {"type": "flatten"}, {"type": "dense", "units": 2}]
        shape = (1, 3, 3)
    else:
        h = int(rng.integers(2, 5))
        specs = [{"type": "dense", "units": h}, {"type": "relu"}, {"type": "dense", "units": 3}]
        shape = (int(rng.integers(2, 5)),)
    model = nn.build_model(specs, shape, 32, rng, act_bits=None)
    assert model.n_params() <= 50
    X = rng.normal(size=(6,) + shape)
    y = rng.integers(0, model.output_shape[0], 6)
    return model, X, y


class TestForward:
    def test_identity_weights(self):
        # k=2 over [0, 1]: 1 -> code 3, 0 -> code 0; bias all zero
        m = dense_model([[1, 0], [0, 1]], [0, 0], k=2)
        assert list(m.get_tensor("fc.weight").codes.ravel()) == [3, 0, 0, 3]
        logits, _ = nn.forward(m, np.array([[0.5, 0.25]]))
        np.testing.assert_array_equal(logits, [[0.5, 0.25]])

    def test_zero_input_zero_bias(self):
        rng = np.random.default_rng(0)
        specs = [{"type": "dense", "units": 4}, {"type": "relu"}, {"type": "dense", "units": 3}]
        layers = nn.build_layers(specs, (5,))
        params = nn.init_weights(layers, rng)
        for name in params:
            if name.endswith("bias"):
                params[name] = np.zeros_like(params[name])
        m = nn.quantize_model(layers, (5,), params, 8)
        logits, _ = nn.forward(m, np.zeros((2, 5)))
        np.testing.assert_array_equal(logits, 0.0)

    def test_integer_gemm_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n, i, o = rng.integers(1, 9, 3)
            w = rng.normal(size=(o, i))
            x = rng.normal(size=(n, i))
            m = dense_model(w, rng.normal(size=o), k=int(rng.integers(2, 12)), act_bits=8)
            pw = m.get_tensor("fc.weight").params
            qw = m.get_tensor("fc.weight").codes
            px = compute_params(x, 8)
            qx = quantize(x, px).codes
            # exact integer accumulation, single rounding at the end
            acc = [[sum((int(qx[r, c]) - px.zero_point) * (int(qw[j, c]) - pw.zero_point)
                        for c in range(i)) for j in range(o)] for r in range(n)]
            expected = pw.scale * px.scale * np.array(acc, dtype=float) + dequantize(m.get_tensor("fc.bias"))
            logits, _ = nn.forward(m, x)
            np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-12)

    def test_logits_not_quantized(self):
        rng = np.random.default_rng(1)
        m = nn.build_model([{"type": "dense", "units": 7}], (3,), 8, rng, act_bits=2)
        x = np.array([[0.0, 0.5, 1.0]])  # on its own 2-bit grid
        logits, _ = nn.forward(m, x)
        assert len(np.unique(logits)) == 7

    def test_shape_mismatch(self):
        m = dense_model(np.eye(3), np.zeros(3))
        with pytest.raises(DomainError):
            nn.forward(m, np.zeros((2, 4)))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        m, X, y = random_small_model(rng)
        l1, c1 = nn.forward(m, X)
        l2, c2 = nn.forward(m, X)
        np.testing.assert_array_equal(l1, l2)
        g1, g2 = nn.backward(m, c1, y), nn.backward(m, c2, y)
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        conv = nn.Conv2D(2, 3, 3, stride=2, padding=1)
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv.forward(x, w, b)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros(out.shape)
        for n in range(2):
            for o in range(3):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
        assert conv.output_shape((2, 5, 4)) == out.shape[1:]


class TestBackward:
    def test_stale_cache(self):
        m = dense_model(np.eye(2), np.zeros(2))
        _, cache = nn.forward(m, np.ones((1, 2)))
        m.set_tensor("fc.bias", m.get_tensor("fc.bias"))
        with pytest.raises(UsageError):
            nn.backward(m, cache, np.array([0]))

    def test_stationary_point(self):
        m = dense_model(np.eye(2), np.zeros(2), k=8)
        weights = {"fc.weight": 100 * np.eye(2), "fc.bias": np.zeros(2)}
        _, cache = nn.forward(m, np.eye(2), weights=weights, act_bits=None)
        grads = nn.backward(m, cache, np.array([0, 1]))
        assert np.sqrt(sum((g ** 2).sum() for g in grads.values())) < 1e-6

    def test_ste_on_grid_inputs(self):
        rng = np.random.default_rng(4)
        m = dense_model(rng.normal(size=(3, 4)), rng.normal(size=3), act_bits=8)
        codes = rng.integers(0, 256, (5, 4))
        codes[0, :2] = (0, 255)
        x = 0.25 * (codes - 100)  # scale (max - min) / 255 is exactly 0.25
        np.testing.assert_array_equal(nn.fake_quant_activation(x, 8), x)
        y = rng.integers(0, 3, 5)
        _, cq = nn.forward(m, x)
        _, cf = nn.forward(m, x, act_bits=None)
        gq, gf = nn.backward(m, cq, y), nn.backward(m, cf, y)
        for name in gq:
            np.testing.assert_array_equal(gq[name], gf[name])

    def test_sum_reduction_scales_with_batch(self):
        rng = np.random.default_rng(6)
        m, X, y = random_small_model(rng)
        _, c = nn.forward(m, X)
        gm = nn.backward(m, c, y, "mean")
        gs = nn.backward(m, c, y, "sum")
        for name in gm:
            np.testing.assert_allclose(gs[name], gm[name] * len(X), rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("conv", [False, True])
    def test_finite_differences(self, conv):
        rng = np.random.default_rng(7 + conv)
        for _ in range(5):
            m, X, y = random_small_model(rng, conv)
            res = nn.gradient_check(m, X, y, h=1e-4)
            assert res.n_checked > 0
            assert res.max_rel_error < 1e-4

    def test_gradient_check_catches_wrong_gradient(self, monkeypatch):
        rng = np.random.default_rng(8)
        m, X, y = random_small_model(rng)
        original = nn.Dense.backward
        monkeypatch.setattr(nn.Dense, "backward",
                            lambda self, x, w, dy: tuple(1.01 * g for g in original(self, x, w, dy)))
        assert nn.gradient_check(m, X, y).max_rel_error > 1e-3


class TestFakeQuant:
    def test_on_grid_unchanged(self):
        codes = np.random.default_rng(0).integers(0, 256, 50)
        codes[:2] = (0, 255)
        x = 0.125 * (codes - 37)
        np.testing.assert_array_equal(nn.fake_quant_activation(x, 8), x)

    def test_idempotent_up_to_rounding(self):
        # the second pass recomputes the scale from the output's own min/max,
        # which may differ from the first by an ulp
        for seed in range(200):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(4, 6)) * rng.uniform(0.01, 100)
            once = nn.fake_quant_activation(x, 8)
            twice = nn.fake_quant_activation(once, 8)
            np.testing.assert_allclose(twice, once, rtol=4e-16 * 255, atol=0)

    def test_constant_unchanged(self):
        x = np.full((3, 3), 0.7)
        np.testing.assert_array_equal(nn.fake_quant_activation(x, 8), x)

    def test_linspace_bound(self):
        x = np.linspace(0, 1, 1000)
        assert np.abs(nn.fake_quant_activation(x, 8) - x).max() <= (1 / 255) / 2 + 1e-15


class TestModel:
    def test_duplicate_names(self):
        with pytest.raises(DomainError):
            nn.Model([nn.ReLU("a"), nn.ReLU("a")], (2,))

    def test_shapes_must_compose(self):
        with pytest.raises(DomainError):
            nn.build_layers([{"type": "dense", "units": 3}, {"type": "conv2d", "filters": 1, "kernel": 1}], (2,))

    def test_unknown_layer(self):
        with pytest.raises(DomainError):
            nn.build_layers([{"type": "pool"}], (2,))

    def test_tensor_naming_and_macs(self):
        m = nn.build_model([{"type": "dense", "units": 4, "name": "a"}, {"type": "relu"},
                            {"type": "dense", "units": 2, "name": "b"}], (3,), 8, 0)
        assert m.tensor_names() == ["a.weight", "a.bias", "b.weight", "b.bias"]
        assert m.layer_macs(10) == {"a": 120, "b": 80}
        assert m.n_params() == 12 + 4 + 8 + 2

    def test_set_tensor_shape_checked(self):
        m = dense_model(np.eye(2), np.zeros(2))
        with pytest.raises(DomainError):
            m.set_tensor("fc.bias", QuantizedTensor(np.zeros(3, int), QuantParams(1.0, 0, 8)))


def test_float_sgd_loss_decreases_on_separable_data():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.3, (50, 2)), rng.normal(2, 0.3, (50, 2))])
    y = np.repeat([0, 1], 50)
    layers = nn.build_layers([{"type": "dense", "units": 2}], (2,))
    params = {name: np.zeros_like(v) for name, v in nn.init_weights(layers, rng).items()}
    model = nn.quantize_model(layers, (2,), params, 32, None)
    losses = []
    for _ in range(100):
        logits, cache = nn.forward(model, X, weights=params, act_bits=None)
        losses.append(nn.cross_entropy(logits, y))
        for name, g in nn.backward(model, cache, y).items():
            params[name] -= 0.1 * g
    assert losses[-1] < 0.5 * losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
