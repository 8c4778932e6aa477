from src.app.selfcheck import tiny_config
from src.core.nn import LSTMCell
from src.core.tensor import Tensor, no_grad
from src.model.recognizer import Direction, VlamdModel
from src.model.transd import causal_mask
from src.utils.constants import EOS_ID, MASK_NEG, PAD_ID
from src.utils.errors import AlignmentError, LengthError, ShapeError
from dataclasses import replace
import numpy as np
import math
import pytest


class TestBackbone:
    def test_feature_map_shape(self, model, image):
        fmap = model.encode(image)
        assert fmap.spatial == (4, 8)
        assert fmap.f.shape == (1, 32, 16)
        assert fmap.f_prime.shape == (1, 32, 16)
        assert fmap.grid().shape == (1, 16, 4, 8)

    def test_batch_matches_single_images(self, model, rng):
        images = rng.uniform(size=(2, 3, 16, 32))
        with no_grad():
            both = model.encode(images).f.data
            first = model.encode(images[0]).f.data
        np.testing.assert_allclose(both[0], first[0], atol=1e-12)

    def test_rejects_indivisible_size(self, model):
        with pytest.raises(ShapeError):
            model.encode(np.zeros((3, 18, 32)))

    def test_rejects_oversized_input(self, model):
        with pytest.raises(ShapeError):
            model.encode(np.zeros((3, 32, 32)))

    def test_zero_image_is_finite(self, model):
        fmap = model.encode(np.zeros((3, 16, 32)))
        assert np.all(np.isfinite(fmap.f.data))

    def test_every_backbone_parameter_gets_gradient(self, model, image):
        fmap = model.encode(image)
        ((fmap.f * fmap.f).sum() + fmap.f_prime.sum()).backward()
        for name, param in model.backbone.named_parameters():
            assert param.grad is not None and np.any(param.grad != 0), name

    def test_token_order_reaches_features(self, model, rng):
        backbone = model.backbone
        seq = Tensor(rng.normal(size=(1, 32, 16)))
        perm = rng.permutation(32)
        with no_grad():
            plain = backbone.encode_sequence(seq, (4, 8)).data[:, perm]
            permuted = backbone.encode_sequence(Tensor(seq.data[:, perm]), (4, 8)).data
            assert not np.allclose(plain, permuted)
            backbone.pos_embed.data[...] = 0.0
            plain = backbone.encode_sequence(seq, (4, 8)).data[:, perm]
            permuted = backbone.encode_sequence(Tensor(seq.data[:, perm]), (4, 8)).data
        np.testing.assert_allclose(plain, permuted, atol=1e-10)

    def test_column_flip_changes_features(self, model, image):
        with no_grad():
            f = model.encode(image).f.data
            flipped = model.encode(image[:, :, ::-1].copy()).f.data
        assert not np.allclose(f, flipped)

    def test_position_table_uses_top_left_cells(self, model):
        backbone = model.backbone
        table = backbone.position_table(backbone.pos_embed, (2, 3)).data
        np.testing.assert_array_equal(table, backbone.pos_embed.data[:2, :3].reshape(6, 16))

    def test_single_position_attention_returns_value(self, model, rng):
        attn = model.backbone.layer0.attn
        x = Tensor(rng.normal(size=(1, 1, 16)))
        source = rng.normal(size=(1, 1, 16))
        out, weights = attn(x, Tensor(source))
        np.testing.assert_array_equal(weights.data, 1.0)
        value = source @ attn.W_v.weight.data + attn.W_v.bias.data
        expected = value @ attn.W_o.weight.data + attn.W_o.bias.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestVlad:
    def _run(self, model, fmap, steps=4, tokens=(1, 2, 3, 0)):
        vlad, _ = model.branches(Direction.L2R)
        memory = vlad.prepare(fmap)
        state = vlad.initial_state(memory)
        outs = []
        for t in range(steps):
            out = vlad.decode_step(state, memory)
            outs.append(out)
            state = out.new_state.with_token([tokens[t]])
        return outs, state

    def test_normalization_and_coverage(self, model, fmap):
        outs, state = self._run(model, fmap)
        for t, out in enumerate(outs, start=1):
            np.testing.assert_allclose(out.dist.data.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(out.alpha.data.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(out.position_alpha.data.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(out.new_state.coverage.data.sum(axis=-1), t, atol=1e-5)
            assert np.all((out.gate.data > 0) & (out.gate.data < 1))
        assert state.t == 5

    def test_first_step_reads_zero_coverage(self, model, fmap):
        vlad, _ = model.branches(Direction.L2R)
        state = vlad.initial_state(vlad.prepare(fmap))
        assert state.t == 1
        np.testing.assert_array_equal(state.coverage.data, 0.0)
        assert state.y_prev[0] == vlad.bos_id

    def test_step_past_max_length(self, model, fmap):
        with pytest.raises(LengthError):
            self._run(model, fmap, steps=5, tokens=(1, 2, 3, 4, 0))

    def test_forced_decode_matches_steps(self, model, fmap):
        vlad, _ = model.branches(Direction.L2R)
        outs, _ = self._run(model, fmap)
        forced = vlad.forced_decode([1, 2, 3, 0], vlad.prepare(fmap)).data[0]
        stepped = np.stack([o.dist.data[0] for o in outs])
        np.testing.assert_allclose(forced, stepped, atol=1e-12)

    def test_forced_decode_requires_eos(self, model, fmap):
        vlad, _ = model.branches(Direction.L2R)
        with pytest.raises(AlignmentError):
            vlad.forced_decode([1, 2], vlad.prepare(fmap))

    @pytest.mark.parametrize('overrides', [
        {'vlad.use_paa': False},
        {'vlad.use_agf': False},
        {'vlad.lstm_uses_current_context': True},
        {'vlad.mlp_layers': 1},
    ])
    def test_ablation_variants_decode(self, overrides, image):
        model = VlamdModel(tiny_config(overrides))
        vlad, _ = model.branches(Direction.R2L)
        dists = vlad.forced_decode([3, EOS_ID], vlad.prepare(model.encode(image)))
        assert dists.shape == (1, 2, model.charset.num_classes)
        np.testing.assert_allclose(dists.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_position_attention_ignores_decoder_state(self, model, fmap, rng):
        vlad, _ = model.branches(Direction.L2R)
        memory = vlad.prepare(fmap)
        state = vlad.initial_state(memory)
        perturbed = replace(state, h=Tensor(rng.normal(size=state.h.shape)), y_prev=np.array([3]))
        with no_grad():
            a = vlad.decode_step(state, memory)
            b = vlad.decode_step(perturbed, memory)
        np.testing.assert_array_equal(a.position_alpha.data, b.position_alpha.data)
        assert not np.allclose(a.alpha.data, b.alpha.data)

    def test_visual_context_ignores_position_queries(self, model, fmap, rng):
        vlad, _ = model.branches(Direction.L2R)
        memory = vlad.prepare(fmap)
        state = vlad.initial_state(memory)
        with no_grad():
            before = vlad.decode_step(state, memory)
            vlad.paa.P.data[...] = rng.normal(size=vlad.paa.P.shape)
            after = vlad.decode_step(state, memory)
        np.testing.assert_array_equal(before.alpha.data, after.alpha.data)
        np.testing.assert_array_equal(before.new_state.a_prev.data, after.new_state.a_prev.data)
        assert not np.allclose(before.position_alpha.data, after.position_alpha.data)

    def test_visual_attention_is_explicit_weighted_sum(self, model, fmap, rng):
        vlad, _ = model.branches(Direction.L2R)
        memory = vlad.prepare(fmap)
        vaa = vlad.vaa
        query = rng.normal(size=(1, vaa.W_q.weight.shape[0]))
        coverage = rng.uniform(size=(1, fmap.length))
        context, alpha = vaa(Tensor(query), memory.keys, memory.fmap.f, Tensor(coverage))

        q = query[0] @ vaa.W_q.weight.data + vaa.W_q.bias.data
        keys, f = memory.keys.data[0], fmap.f.data[0]
        energies = np.array([vaa.v.weight.data[:, 0] @ np.tanh(q + keys[i] + coverage[0, i] * vaa.W_c.data)
                             for i in range(fmap.length)])
        weights = np.exp(energies - energies.max())
        weights /= weights.sum()
        np.testing.assert_allclose(alpha.data[0], weights, atol=1e-12)
        np.testing.assert_allclose(context.data[0], sum(weights[i] * f[i] for i in range(fmap.length)), atol=1e-12)

    def test_position_attention_is_explicit_weighted_sum(self, model, fmap):
        vlad, _ = model.branches(Direction.L2R)
        memory = vlad.prepare(fmap)
        paa = vlad.paa
        context, alpha = vlad.paa_attend(2, memory)

        pos_keys = fmap.f_prime.data[0] @ paa.W_k.weight.data
        q = paa.P.data[1] @ paa.W_q.weight.data + paa.W_q.bias.data
        energies = np.array([paa.v.weight.data[:, 0] @ np.tanh(q + k) for k in pos_keys])
        weights = np.exp(energies - energies.max())
        weights /= weights.sum()
        np.testing.assert_allclose(alpha.data[0], weights, atol=1e-12)
        np.testing.assert_allclose(context.data[0], weights @ fmap.f.data[0], atol=1e-12)

    def test_gate_is_half_without_mixing_weights(self, model, rng):
        vlad, _ = model.branches(Direction.R2L)
        agf = vlad.agf
        agf.W_m.weight.data[...] = 0.0
        agf.W_m.bias.data[...] = 0.0
        z = rng.normal(size=(2, agf.W_o.weight.shape[0]))
        out, gate = agf(Tensor(z))
        np.testing.assert_allclose(gate.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(out.data, (0.5 * z) @ agf.W_o.weight.data + agf.W_o.bias.data, atol=1e-12)

    def test_lstm_cell_matches_scalar_loop(self, rng):
        cell = LSTMCell(3, 2, rng)
        x, h, c = rng.normal(size=(1, 3)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
        h_next, c_next = cell(Tensor(x), Tensor(h), Tensor(c))
        W_x, W_h, b = cell.W_x.data, cell.W_h.data, cell.bias.data

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        for j in range(2):
            z = [sum(x[0, k] * W_x[k, 2 * g + j] for k in range(3))
                 + sum(h[0, k] * W_h[k, 2 * g + j] for k in range(2)) + b[2 * g + j] for g in range(4)]
            c_expected = sig(z[1]) * c[0, j] + sig(z[0]) * math.tanh(z[2])
            assert c_next.data[0, j] == pytest.approx(c_expected, abs=1e-12)
            assert h_next.data[0, j] == pytest.approx(sig(z[3]) * math.tanh(c_expected), abs=1e-12)

    def test_forced_targets_need_trailing_padding(self, model, fmap):
        vlad, transd = model.branches(Direction.L2R)
        for bad in ([[1, PAD_ID, 2, EOS_ID]], [[1, EOS_ID, 2, EOS_ID]], [[EOS_ID, 3, PAD_ID, PAD_ID]]):
            with pytest.raises(AlignmentError):
                vlad.forced_decode(bad, vlad.prepare(fmap))
            with pytest.raises(AlignmentError):
                transd.forced_decode_parallel(bad, transd.prepare(fmap))
        padded = vlad.forced_decode([[1, 2, EOS_ID, PAD_ID], [3, EOS_ID, PAD_ID, PAD_ID]], vlad.prepare(fmap))
        assert padded.shape == (2, 4, 8)


class TestTransD:
    def test_incremental_matches_parallel(self, model, fmap):
        _, transd = model.branches(Direction.L2R)
        memory = transd.prepare(fmap)
        tokens = [4, 1, 7, EOS_ID]
        parallel = transd.forced_decode_parallel(tokens, memory).data[0]
        cache = transd.initial_cache()
        prev = transd.bos_id
        for t, token in enumerate(tokens):
            dist, cache = transd.incremental_step(cache, [prev], memory)
            np.testing.assert_allclose(dist.data[0], parallel[t], atol=1e-6)
            prev = token
        assert cache.length == 4

    def test_prefix_independence_of_future(self, model, fmap):
        _, transd = model.branches(Direction.R2L)
        memory = transd.prepare(fmap)
        a = transd.forced_decode_parallel([2, 3, 5, EOS_ID], memory).data[0]
        b = transd.forced_decode_parallel([2, 6, EOS_ID], memory).data[0]
        np.testing.assert_allclose(a[:2], b[:2], atol=1e-12)

    def test_queries_only_variant_ignores_tokens(self, image):
        model = VlamdModel(tiny_config({'transd.autoregressive': False}))
        _, transd = model.branches(Direction.L2R)
        memory = transd.prepare(model.encode(image))
        a = transd.forced_decode_parallel([1, 2, EOS_ID], memory).data
        b = transd.forced_decode_parallel([5, 6, EOS_ID], memory).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_incremental_past_max_length(self, model, fmap):
        _, transd = model.branches(Direction.L2R)
        memory = transd.prepare(fmap)
        cache = transd.initial_cache()
        for _ in range(4):
            _, cache = transd.incremental_step(cache, [1], memory)
        with pytest.raises(LengthError):
            transd.incremental_step(cache, [1], memory)

    def test_causal_mask(self):
        mask = causal_mask(3)
        assert mask[0, 1] == MASK_NEG and mask[1, 0] == 0.0 and mask[2, 2] == 0.0


class TestRecognizer:
    def test_parameter_names_unique_and_assigned(self, model):
        names = [name for name, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert all(p.name == name for name, p in model.named_parameters())
        assert 'vlad.l2r.agf.W_m.weight' in names
        assert 'transd.r2l.queries' in names

    def test_without_transd(self, image):
        model = VlamdModel(tiny_config({'model.use_transd': False}))
        assert model.transd is None
        assert not any(name.startswith('transd.') for name, _ in model.named_parameters())
        heads = model.forward_teacher_forced(image, np.array([[1, 0]]), np.array([[1, 0]]))
        assert heads.transd_l2r is None and heads.vlad_r2l.shape == (1, 2, 8)

    def test_same_seed_same_weights(self, cfg):
        a, b = VlamdModel(cfg), VlamdModel(cfg)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_float32_model_encodes_float64_input(self, image):
        model = VlamdModel(tiny_config({'model.dtype': 'float32'}))
        fmap = model.encode(Tensor(image))
        assert fmap.f.dtype == np.float32
