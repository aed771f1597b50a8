"""Backbone oracles: exact parameter accounting, hand-computed GRU cells,
mask-range/causality/determinism properties, checkpoint round trips, and a
dual-route gradient check of the fused recurrent layer against a
primitive-composed tape."""

import numpy as np
import pytest

from sceneadapt import model as M
from sceneadapt import signal as sig
from sceneadapt.autodiff import Tape, grad_check, stable_sigmoid
from sceneadapt.errors import InvalidConfigError, ShapeError


def test_reference_parameter_count_is_230144():
    assert M.param_count_for_dims(128, 128) == 230144
    params = M.GruEnhancerParams(128, 128)
    assert M.param_count(params) == 230144


def test_toy_parameter_count_matches_hand_formula():
    # fc pair: 2*B*H; per GRU layer: 3 gates x (H*H + H*H + H).
    bands, hidden = 4, 4
    hand = 2 * bands * hidden + 2 * 3 * (hidden * hidden + hidden * hidden + hidden)
    assert hand == 248
    assert M.param_count_for_dims(bands, hidden) == hand
    assert M.param_count(M.init_params(bands, hidden, seed=0)) == hand


class TestGruCell:
    def test_all_zeros_gives_zero_state(self):
        layer = M.GruLayerParams(3, 3, "t")
        h = M.gru_cell(np.zeros(3), np.zeros(3), layer)
        np.testing.assert_array_equal(h, np.zeros(3))

    def test_saturated_update_gate_carries_state(self):
        rng = np.random.default_rng(0)
        layer = M.GruLayerParams(4, 4, "t")
        for g in M.GATES:
            layer.w[g].value[...] = rng.uniform(-0.5, 0.5, (4, 4))
            layer.u[g].value[...] = rng.uniform(-0.5, 0.5, (4, 4))
        layer.b["z"].value[...] = 40.0  # update gate pinned to 1
        h_prev = rng.uniform(-0.8, 0.8, 4)
        h = M.gru_cell(rng.uniform(-1, 1, 4), h_prev, layer)
        np.testing.assert_allclose(h, h_prev, atol=1e-6)

    def test_single_unit_hand_computation(self):
        layer = M.GruLayerParams(1, 1, "t")
        wz, uz, bz = 0.4, -0.3, 0.1
        wr, ur, br = -0.2, 0.5, 0.0
        wn, un, bn = 0.8, 0.6, -0.1
        layer.w["z"].value[...] = wz
        layer.u["z"].value[...] = uz
        layer.b["z"].value[...] = bz
        layer.w["r"].value[...] = wr
        layer.u["r"].value[...] = ur
        layer.b["r"].value[...] = br
        layer.w["n"].value[...] = wn
        layer.u["n"].value[...] = un
        layer.b["n"].value[...] = bn
        x, h0 = 0.7, -0.4
        z = 1.0 / (1.0 + np.exp(-(wz * x + uz * h0 + bz)))
        r = 1.0 / (1.0 + np.exp(-(wr * x + ur * h0 + br)))
        cand = np.tanh(wn * x + un * (r * h0) + bn)
        expected = z * h0 + (1 - z) * cand
        got = M.gru_cell(np.array([x]), np.array([h0]), layer)
        assert got[0] == pytest.approx(expected, abs=1e-12)

    def test_dim_mismatch_raises(self):
        layer = M.GruLayerParams(3, 3, "t")
        with pytest.raises(ShapeError):
            M.gru_cell(np.zeros(5), np.zeros(3), layer)


class TestForward:
    def test_mask_strictly_inside_unit_interval(self):
        params = M.init_params(8, 8, seed=1)
        rng = np.random.default_rng(2)
        feats = sig.ErbFeatures(rng.uniform(0, 3, (11, 8)), 0.3)
        mask = M.forward(feats, params)
        assert np.all(mask > 0) and np.all(mask < 1)

    def test_zero_recurrence_makes_frames_independent(self):
        params = M.init_params(8, 8, seed=3)
        for layer in (params.gru1, params.gru2):
            for g in M.GATES:
                layer.u[g].value[...] = 0.0
        row = np.random.default_rng(4).uniform(0, 2, 8)
        feats = sig.ErbFeatures(np.tile(row, (5, 1)), 0.3)
        mask = M.forward(feats, params)
        for t in range(1, 5):
            np.testing.assert_array_equal(mask[t], mask[0])

    def test_frame_permutation_changes_output(self):
        params = M.init_params(8, 8, seed=5)
        rng = np.random.default_rng(6)
        data = rng.uniform(0, 2, (6, 8))
        mask = M.forward(sig.ErbFeatures(data, 0.3), params)
        permuted = M.forward(sig.ErbFeatures(data[::-1].copy(), 0.3), params)
        assert not np.allclose(mask[-1], permuted[0])

    def test_causality(self):
        params = M.init_params(8, 8, seed=7)
        rng = np.random.default_rng(8)
        data = rng.uniform(0, 2, (9, 8))
        mask_full = M.forward(sig.ErbFeatures(data, 0.3), params)
        tampered = data.copy()
        tampered[6:] += 1.0
        mask_tampered = M.forward(sig.ErbFeatures(tampered, 0.3), params)
        np.testing.assert_array_equal(mask_full[:6], mask_tampered[:6])
        assert not np.array_equal(mask_full[6:], mask_tampered[6:])

    def test_determinism(self):
        params = M.init_params(8, 8, seed=9)
        data = np.random.default_rng(10).uniform(0, 2, (7, 8))
        a = M.forward(sig.ErbFeatures(data, 0.3), params)
        b = M.forward(sig.ErbFeatures(data, 0.3), params)
        np.testing.assert_array_equal(a, b)


class TestEnhance:
    def setup_method(self):
        self.params = M.init_params(8, 8, seed=11)
        self.pipeline = M.Pipeline(8)

    def test_length_preserved(self):
        for n in (512, 1000, 8000, 8192):
            wave = sig.Waveform(np.random.default_rng(n).standard_normal(n) * 0.1)
            out = M.enhance(wave, self.params, self.pipeline)
            assert len(out) == n

    def test_silence_in_silence_out(self):
        wave = sig.Waveform(np.zeros(4096))
        out = M.enhance(wave, self.params, self.pipeline)
        assert np.all(out.samples == 0)

    def test_matches_public_op_composition_bitwise(self):
        wave = sig.Waveform(np.random.default_rng(12).standard_normal(4096) * 0.1)
        out = M.enhance(wave, self.params, self.pipeline)
        spec = sig.stft(wave, 512, 256, "sine")
        feats = sig.erb_features(spec, self.pipeline.filterbank, 0.3)
        mask = M.forward(feats, self.params)
        masked = sig.apply_erb_mask(spec, mask, self.pipeline.filterbank)
        manual = sig.istft(masked).samples[:4096]
        np.testing.assert_array_equal(out.samples, manual)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(13)
        waves = rng.standard_normal((3, 3000)) * 0.1
        batch = M.enhance_batch(waves, self.params, self.pipeline)
        for i in range(3):
            single = M.enhance(sig.Waveform(waves[i]), self.params, self.pipeline)
            np.testing.assert_array_equal(batch[i], single.samples)


class TestTapedForward:
    def test_mask_graph_matches_fast_path_bitwise(self):
        params = M.init_params(8, 8, seed=14)
        pipeline = M.Pipeline(8)
        rng = np.random.default_rng(15)
        waves = rng.standard_normal((2, 2048)) * 0.1
        _, feats = M.analyze_batch(waves, pipeline)
        fast = M.forward_masks_batch(feats, params)
        tape = Tape()
        node = M.mask_graph(tape, feats, params)
        taped = node.value.reshape(8, feats.shape[1], 2).transpose(2, 1, 0)
        np.testing.assert_array_equal(fast, taped)

    def test_fused_layer_gradients_match_primitive_composition(self):
        # Dual route: the fused BPTT layer against the same recurrence built
        # from tape primitives, plus central differences.
        hidden, n_batch, n_frames = 3, 2, 4
        layer = M.GruLayerParams(hidden, hidden, "t")
        rng = np.random.default_rng(16)
        for g in M.GATES:
            layer.w[g].value[...] = rng.uniform(-0.7, 0.7, (hidden, hidden))
            layer.u[g].value[...] = rng.uniform(-0.7, 0.7, (hidden, hidden))
            layer.b[g].value[...] = rng.uniform(-0.2, 0.2, (hidden, 1))
        x_data = rng.uniform(-1, 1, (hidden, n_frames * n_batch))
        params = layer.params()

        def fused_loss(tape):
            leaf = {id(p): tape.param(p) for p in params}
            x = tape.constant(x_data)
            out = M.gru_layer_graph(tape, x, layer, leaf, n_batch)
            return tape.mean(tape.multiply(out, out))

        def primitive_loss(tape):
            leaf = {id(p): tape.param(p) for p in params}
            x = tape.constant(x_data)
            h = tape.constant(np.zeros((hidden, n_batch)))
            outs = []
            for t in range(n_frames):
                x_t = tape.cols(x, t * n_batch, (t + 1) * n_batch)
                z = tape.sigmoid(tape.add(tape.add(
                    tape.matmul(leaf[id(layer.w["z"])], x_t),
                    tape.matmul(leaf[id(layer.u["z"])], h)),
                    leaf[id(layer.b["z"])]))
                r = tape.sigmoid(tape.add(tape.add(
                    tape.matmul(leaf[id(layer.w["r"])], x_t),
                    tape.matmul(leaf[id(layer.u["r"])], h)),
                    leaf[id(layer.b["r"])]))
                cand = tape.tanh(tape.add(tape.add(
                    tape.matmul(leaf[id(layer.w["n"])], x_t),
                    tape.matmul(leaf[id(layer.u["n"])], tape.multiply(r, h))),
                    leaf[id(layer.b["n"])]))
                h = tape.add(tape.multiply(z, h),
                             tape.multiply(tape.offset(tape.scale(z, -1.0), 1.0), cand))
                outs.append(h)
            return tape.mean(tape.multiply(tape.hstack(outs), tape.hstack(outs)))

        for p in params:
            p.zero_grad()
        t1 = Tape()
        t1.backward(fused_loss(t1))
        fused_grads = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        t2 = Tape()
        t2.backward(primitive_loss(t2))
        prim_grads = [p.grad.copy() for p in params]
        for fg, pg in zip(fused_grads, prim_grads):
            np.testing.assert_allclose(fg, pg, rtol=1e-10, atol=1e-12)
        assert grad_check(fused_loss, params, max_coords=30, seed=0) <= 1e-6

    def test_layer_forward_matches_repeated_cells(self):
        hidden, n_batch, n_frames = 4, 3, 5
        layer = M.GruLayerParams(hidden, hidden, "t")
        rng = np.random.default_rng(17)
        for g in M.GATES:
            layer.w[g].value[...] = rng.uniform(-0.7, 0.7, (hidden, hidden))
            layer.u[g].value[...] = rng.uniform(-0.7, 0.7, (hidden, hidden))
            layer.b[g].value[...] = rng.uniform(-0.2, 0.2, (hidden, 1))
        x_all = rng.uniform(-1, 1, (hidden, n_frames * n_batch))
        h_all, _ = M._gru_layer_run(x_all, layer, n_batch)
        h = np.zeros((hidden, n_batch))
        for t in range(n_frames):
            h = M.gru_cell(x_all[:, t * n_batch:(t + 1) * n_batch], h, layer)
            np.testing.assert_allclose(
                h_all[:, t * n_batch:(t + 1) * n_batch], h, rtol=1e-12, atol=1e-15)


class TestCheckpoint:
    def test_save_load_round_trip_bitwise(self, tmp_path):
        params = M.init_params(8, 8, seed=18)
        ckpt = M.save(params, note="unit")
        path = tmp_path / "model.ckpt"
        M.write_checkpoint(path, ckpt)
        back = M.read_checkpoint(path)
        assert back.note == "unit"
        restored = M.load(back)
        for a, b in zip(params.params(), restored.params()):
            assert a.value.tobytes() == b.value.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(InvalidConfigError):
            M.read_checkpoint(path)

    def test_payload_length_validated(self):
        with pytest.raises(InvalidConfigError):
            M.ModelCheckpoint(8, 8, np.zeros(10))

    def test_digest_changes_with_any_value(self):
        params = M.init_params(8, 8, seed=19)
        d0 = M.params_digest(params)
        params.gru2.u["n"].value[3, 3] += 1e-12
        assert M.params_digest(params) != d0


def test_stable_sigmoid_shared_between_paths():
    x = np.random.default_rng(20).uniform(-5, 5, (4, 4))
    assert np.array_equal(stable_sigmoid(x), 1.0 / (1.0 + np.exp(-x)))
