import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emocenter import autodiff as ad
from emocenter import model as M
from emocenter.autodiff import Tensor
from emocenter.model import ConvLayer, EncoderConfig

TINY = EncoderConfig(
    n_bins=12,
    conv_stack=(ConvLayer(3, (3, 3), (2, 1)), ConvLayer(2, (2, 2), (1, 1), pool=(2, 2))),
    rnn_width=4, feature_dim=3, n_classes=3,
)


def tiny_batch(rng, lengths=(11, 14, 9)):
    specs = [rng.standard_normal((n, TINY.n_bins)) for n in lengths]
    return specs, *M.pad_batch(specs)


class TestInit:
    def test_deterministic(self):
        a, b = M.init_params(EncoderConfig(), 3), M.init_params(EncoderConfig(), 3)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_seed_changes_weights(self):
        a, b = M.init_params(TINY, 0), M.init_params(TINY, 1)
        assert not np.array_equal(a["fc1.w"], b["fc1.w"])

    @pytest.mark.parametrize("seed", range(5))
    def test_fan_in_variance(self, seed):
        params = M.init_params(EncoderConfig(), seed)
        for name, p in params.items():
            kind = name.rsplit(".", 1)[1]
            if kind == "b":
                assert np.all(p == 0)
            elif kind == "slope":
                assert p == 0.25
            else:
                target = 2.0 / M.fan_in(name, p.shape)
                assert abs(p.var() / target - 1) < 0.2, name

    def test_default_shapes(self):
        shapes = M.param_shapes(EncoderConfig())
        assert shapes["fc1.w"] == (256, 64)
        assert shapes["fc2.w"] == (64, 4)
        assert shapes["gru_fwd.u_n"] == (128, 128)


class TestConfig:
    def test_large_kernel_first(self):
        with pytest.raises(M.EncoderError):
            EncoderConfig(conv_stack=(ConvLayer(4, (3, 3)), ConvLayer(4, (5, 5))))

    def test_too_few_bins(self):
        with pytest.raises(M.ReceptiveFieldError):
            EncoderConfig(n_bins=6)

    def test_round_trip(self):
        cfg = EncoderConfig(n_bins=40, rnn_width=7)
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestCnn:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.data())
    def test_lengths_match_shape_simulation(self, n_layers, data):
        layers = []
        for i in range(n_layers):
            k = data.draw(st.integers(1, 5 if i == 0 else 3))
            s = data.draw(st.integers(1, 2))
            pool = data.draw(st.sampled_from([None, (2, 2), (2, 1)]))
            layers.append(ConvLayer(2, (k, k), (s, s), pool))
        if max(l.kernel[0] for l in layers[1:] or layers) > layers[0].kernel[0]:
            layers[0] = ConvLayer(2, (5, 5), layers[0].stride, layers[0].pool)
        try:
            cfg = EncoderConfig(n_bins=40, conv_stack=tuple(layers), rnn_width=2, feature_dim=2, n_classes=2)
        except M.ReceptiveFieldError:
            return
        n_frames = data.draw(st.integers(1, 60))
        sim = M.simulate_shapes(cfg, 1, n_frames)
        conv_out = sim[len(sim) - 4]
        assert cfg.time_out([n_frames])[0] == conv_out[1]
        if conv_out[1] >= 1:
            params = M.as_tensors(M.init_params(cfg, 0))
            seq, lengths = M.cnn_encode(np.zeros((1, n_frames, 40)), [n_frames], params, cfg)
            assert seq.shape == conv_out
        else:
            with pytest.raises(M.ReceptiveFieldError):
                M.cnn_encode(np.zeros((1, n_frames, 40)), [n_frames], M.as_tensors(M.init_params(cfg, 0)), cfg)

    def test_intermediate_shapes(self):
        cfg = EncoderConfig()
        params = M.as_tensors(M.init_params(cfg, 0))
        sim = M.simulate_shapes(cfg, 2, 50)
        with ad.Tape() as tape:
            z, logits = M.forward(np.zeros((2, 50, 128)), [50, 50], M.as_tensors(M.init_params(cfg, 0), True), cfg)
        conv_shapes = [n.output.shape for n in tape.nodes if n.op in ("conv2d", "maxpool2d")]
        assert conv_shapes == sim[1:len(conv_shapes) + 1]
        assert z.shape == sim[-2] and logits.shape == sim[-1]
        seq, _ = M.cnn_encode(np.zeros((2, 50, 128)), [50, 50], params, cfg)
        assert seq.shape == sim[-4]

    def test_identity_kernel(self):
        cfg = EncoderConfig(n_bins=5, conv_stack=(ConvLayer(1, (1, 1)),), rnn_width=2, feature_dim=2, n_classes=2)
        params = M.as_tensors(M.init_params(cfg, 0))
        params["conv0.w"] = Tensor(np.ones((1, 1, 1, 1)))
        params["conv0.slope"] = Tensor(np.array(1.0))
        x = np.random.default_rng(0).standard_normal((1, 7, 5))
        seq, lengths = M.cnn_encode(x, [7], params, cfg)
        np.testing.assert_array_equal(seq.value, x)
        assert lengths.tolist() == [7]

    def test_too_short_input(self):
        params = M.as_tensors(M.init_params(TINY, 0))
        with pytest.raises(M.ReceptiveFieldError):
            M.cnn_encode(np.zeros((1, 3, 12)), [3], params, TINY)

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(1)
        specs, x, lengths = tiny_batch(rng)
        params = M.as_tensors(M.init_params(TINY, 2))
        z = M.encode(x, lengths, params, TINY).value
        junk = x.copy()
        for i, n in enumerate(lengths):
            junk[i, n:] = rng.standard_normal(junk[i, n:].shape) * 100
        np.testing.assert_array_equal(M.encode(junk, lengths, params, TINY).value, z)


class TestBiRnn:
    def test_single_step(self):
        rng = np.random.default_rng(3)
        params = M.init_params(TINY, 3)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
        seq = rng.standard_normal((2, 1, 8))
        p = {k: Tensor(v) for k, v in params.items()}
        p["gru_fwd.wx"] = Tensor(rng.standard_normal((8, 12)))
        p["gru_bwd.wx"] = Tensor(rng.standard_normal((8, 12)))
        out = M.bi_rnn_compress(seq, [1, 1], p).value

        def one_step(d):
            h = 4
            xp = seq[:, 0] @ p[f"{d}.wx"].value + p[f"{d}.b"].value
            sig = lambda v: 1 / (1 + np.exp(-v))
            r, u = sig(xp[:, :h]), sig(xp[:, h:2 * h])
            n = np.tanh(xp[:, 2 * h:])  # h_prev = 0
            return (1 - u) * n

        np.testing.assert_allclose(out, np.concatenate([one_step("gru_fwd"), one_step("gru_bwd")], axis=1), atol=1e-14)

    def test_zero_weights_give_zero(self):
        params = {k: Tensor(np.zeros(v.shape)) for k, v in M.init_params(TINY, 0).items()}
        seq = np.random.default_rng(0).standard_normal((2, 5, 8))
        out = M.bi_rnn_compress(seq, [5, 3], params).value
        assert out.shape == (2, 8)
        np.testing.assert_array_equal(out, 0.0)

    def test_padded_equals_unpadded(self):
        rng = np.random.default_rng(4)
        params = M.as_tensors(M.init_params(TINY, 4))
        seq = rng.standard_normal((1, 6, 8))
        alone = M.bi_rnn_compress(seq, [6], params).value
        padded = np.concatenate([seq, rng.standard_normal((1, 4, 8))], axis=1)
        batch = np.concatenate([padded, rng.standard_normal((1, 10, 8))])
        together = M.bi_rnn_compress(batch, [6, 10], params).value
        np.testing.assert_allclose(together[0], alone[0], rtol=0, atol=1e-12)

    def test_empty_sequence(self):
        params = M.as_tensors(M.init_params(TINY, 0))
        with pytest.raises(M.EncoderError):
            M.bi_rnn_compress(np.zeros((1, 3, 8)), [0], params)


class TestEncode:
    def test_default_feature_dim(self):
        cfg = EncoderConfig()
        z = M.encode(np.random.default_rng(0).standard_normal((2, 40, 128)), [40, 33],
                     M.as_tensors(M.init_params(cfg, 0)), cfg)
        assert z.shape == (2, 64)

    def test_deterministic(self):
        _, x, lengths = tiny_batch(np.random.default_rng(5))
        params = M.as_tensors(M.init_params(TINY, 5))
        assert M.encode(x, lengths, params, TINY).value.tobytes() == M.encode(x, lengths, params, TINY).value.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_solo_equals_batched(self, seed):
        rng = np.random.default_rng(seed)
        specs, x, lengths = tiny_batch(rng, lengths=rng.integers(8, 30, 4))
        params = M.as_tensors(M.init_params(TINY, seed))
        batched = M.encode(x, lengths, params, TINY).value
        for i, s in enumerate(specs):
            solo = M.encode(s[None], [len(s)], params, TINY).value
            np.testing.assert_allclose(batched[i], solo[0], rtol=0, atol=1e-12)

    def test_grad_check_sum_z(self):
        rng = np.random.default_rng(6)
        # equal lengths: zero padding would sit exactly on PReLU and pooling kinks
        _, x, lengths = tiny_batch(rng, lengths=(13, 13))
        params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in M.init_params(TINY, 6).items()}
        names = sorted(params)
        fn = lambda *ts: M.encode(x, lengths, dict(zip(names, ts)), TINY).sum()
        with ad.Tape() as tape:
            fn(*[Tensor(params[k], requires_grad=True) for k in names])
        assert ad.kink_margin(tape) > 1e-6
        assert ad.grad_check(fn, [params[k] for k in names]) < 1e-4


class TestClassify:
    def test_zero_weights(self):
        p = {"fc2.w": Tensor(np.zeros((3, 4))), "fc2.b": Tensor(np.zeros(4))}
        np.testing.assert_array_equal(M.classify(np.ones((2, 3)), p).value, 0.0)

    def test_identity(self):
        z = np.random.default_rng(0).standard_normal((5, 4))
        p = {"fc2.w": Tensor(np.eye(4)), "fc2.b": Tensor(np.zeros(4))}
        np.testing.assert_array_equal(M.classify(z, p).value, z)

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(1)
        z, w, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
        out = M.classify(z, {"fc2.w": Tensor(w), "fc2.b": Tensor(b)}).value
        oracle = np.array([[sum(z[i, k] * w[k, j] for k in range(5)) + b[j] for j in range(3)] for i in range(6)])
        np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(M.EncoderError):
            M.classify(np.ones((2, 3)), {"fc2.w": Tensor(np.zeros((4, 2))), "fc2.b": Tensor(np.zeros(2))})


def test_pad_batch():
    x, lengths = M.pad_batch([np.ones((3, 2)), 2 * np.ones((5, 2))])
    assert x.shape == (2, 5, 2) and lengths.tolist() == [3, 5]
    assert np.all(x[0, 3:] == 0)
    with pytest.raises(M.EncoderError):
        M.pad_batch([np.ones((3, 2)), np.ones((3, 4))])
