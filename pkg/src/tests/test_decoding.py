from src.app.selfcheck import brute_force_joint, brute_force_mutual, enumeration_config, tiny_config
from src.core.tensor import no_grad
from src.decoding.beam import branch_scores, co_beam_search, force_score, joint_score, rank_key
from src.decoding.mutual import mutual_redecode, recognize
from src.model.recognizer import Direction, VlamdModel
from src.utils.constants import EOS_ID
from src.utils.errors import AlignmentError, InputError
from dataclasses import replace
import numpy as np
import pytest


def encode(model, seed=0):
    cfg = model.config
    image = np.random.default_rng(seed).uniform(0.0, 1.0, size=(3, cfg.backbone.input_h, cfg.backbone.input_w))
    with no_grad():
        return model.encode(image)


class TestRanking:
    def test_higher_score_first_then_smaller_tokens(self):
        ranked = sorted([(-1.0, (2,)), (-0.5, (3,)), (-1.0, (1,))], key=lambda s: rank_key(*s))
        assert [t for _, t in ranked] == [(3,), (1,), (2,)]

    def test_joint_score(self):
        assert joint_score(0.25, -4.0, -8.0) == pytest.approx(-7.0)


class TestCoBeamSearch:
    @pytest.mark.parametrize('seed', range(20))
    def test_matches_exhaustive_enumeration(self, seed):
        cfg = enumeration_config(seed)
        model = VlamdModel(cfg)
        fmap = encode(model, seed)
        for direction in Direction:
            found = co_beam_search(fmap, *model.branches(direction), cfg.decode, direction)
            assert found.entries[0].tokens == brute_force_joint(fmap, model, cfg.decode, direction)

    def test_scores_match_forced_scoring(self, enum_model):
        fmap = encode(enum_model)
        cfg = enum_model.config.decode
        vlad, transd = enum_model.branches(Direction.R2L)
        for hyp in co_beam_search(fmap, vlad, transd, cfg, Direction.R2L).entries:
            assert hyp.finished and hyp.tokens[-1] == EOS_ID
            sv, st = branch_scores(hyp.tokens, fmap, vlad, transd)
            assert sv == pytest.approx(hyp.logp_vlad, abs=1e-8)
            assert st == pytest.approx(hyp.logp_transd, abs=1e-8)
            assert force_score(hyp.tokens, fmap, vlad, transd, cfg) == pytest.approx(hyp.logp_joint, abs=1e-8)

    def test_entries_are_ranked(self, enum_model):
        fmap = encode(enum_model)
        cfg = enum_model.config.decode
        entries = co_beam_search(fmap, *enum_model.branches(Direction.L2R), cfg, Direction.L2R).entries
        keys = [rank_key(h.logp_joint, h.tokens) for h in entries]
        assert keys == sorted(keys)
        assert len(entries) == cfg.n_best

    def test_alpha_one_equals_vlad_only_model(self):
        with_transd = VlamdModel(tiny_config({'decode.alpha': 1.0}))
        vlad_only = VlamdModel(tiny_config({'decode.alpha': 1.0, 'model.use_transd': False}))
        cfg = with_transd.config.decode
        a = co_beam_search(encode(with_transd), *with_transd.branches(Direction.L2R), cfg, Direction.L2R)
        b = co_beam_search(encode(vlad_only), *vlad_only.branches(Direction.L2R), cfg, Direction.L2R)
        assert [h.tokens for h in a.entries] == [h.tokens for h in b.entries]
        assert [h.logp_joint for h in a.entries] == pytest.approx([h.logp_joint for h in b.entries])

    def test_eos_only_sequence(self, model, fmap):
        vlad, transd = model.branches(Direction.L2R)
        cfg = model.config.decode
        first_v = vlad.decode_step(vlad.initial_state(vlad.prepare(fmap)), vlad.prepare(fmap)).dist.data[0, EOS_ID]
        first_t = transd.incremental_step(transd.initial_cache(), [transd.bos_id], transd.prepare(fmap))[0].data[0, EOS_ID]
        expected = cfg.alpha * np.log(first_v) + (1 - cfg.alpha) * np.log(first_t)
        assert force_score([EOS_ID], fmap, vlad, transd, cfg) == pytest.approx(expected)

    def test_unfinished_fallback_when_nothing_terminates(self, model, fmap):
        cfg = replace(model.config.decode, max_len=1, beam_width=8, n_best=8)
        entries = co_beam_search(fmap, *model.branches(Direction.L2R), cfg, Direction.L2R).entries
        assert len(entries) == 8
        assert sum(h.finished for h in entries) == 1

    def test_rejects_batches(self, model, cfg, rng):
        with no_grad():
            fmap = model.encode(rng.uniform(size=(2, 3, cfg.backbone.input_h, cfg.backbone.input_w)))
        with pytest.raises(InputError):
            co_beam_search(fmap, *model.branches(Direction.L2R), cfg.decode, Direction.L2R)

    def test_forced_scoring_needs_eos(self, model, fmap):
        with pytest.raises(AlignmentError):
            branch_scores([1, 2], fmap, *model.branches(Direction.L2R))


class TestMutualRedecode:
    @pytest.mark.parametrize('seed', range(20))
    def test_matches_exhaustive_enumeration(self, seed):
        cfg = enumeration_config(seed)
        model = VlamdModel(cfg)
        fmap = encode(model, seed)
        best, _ = mutual_redecode(fmap, model, cfg.decode)
        assert best == brute_force_mutual(fmap, model, cfg.decode)

    def test_report_is_consistent(self, enum_model):
        fmap = encode(enum_model)
        cfg = enum_model.config.decode
        best, report = mutual_redecode(fmap, enum_model, cfg)
        assert best == report.best.tokens
        assert len({c.tokens for c in report.candidates}) == len(report.candidates)
        keys = [rank_key(c.combined, c.tokens) for c in report.candidates]
        assert keys == sorted(keys)
        for c in report.candidates:
            assert c.combined == pytest.approx(c.logp_l2r + c.logp_r2l_reversed)
            l2r = force_score(c.tokens + (EOS_ID,), fmap, *enum_model.branches(Direction.L2R), cfg)
            r2l = force_score(tuple(reversed(c.tokens)) + (EOS_ID,), fmap, *enum_model.branches(Direction.R2L), cfg)
            assert c.logp_l2r == pytest.approx(l2r, abs=1e-8)
            assert c.logp_r2l_reversed == pytest.approx(r2l, abs=1e-8)

    def test_rows_render_text(self, enum_model):
        _, report = mutual_redecode(encode(enum_model), enum_model, enum_model.config.decode)
        rows = report.rows()
        assert rows[0][0] == '1'
        assert rows[0][2] == enum_model.charset.decode(report.best.tokens)
        assert all(len(row) == 6 for row in rows)

    def test_candidates_from_truncated_fallbacks_fit(self, model, fmap):
        cfg = replace(model.config.decode, beam_width=2, n_best=2, max_len=model.max_steps)
        _, report = mutual_redecode(fmap, model, cfg)
        assert all(len(c.tokens) <= model.max_steps - 1 for c in report.candidates)

    @pytest.mark.parametrize('mutual', [True, False])
    def test_recognize_returns_charset_text(self, model, image, mutual):
        text = recognize(image, model, replace(model.config.decode, mutual=mutual))
        assert len(text) <= model.config.decode.max_len
        assert model.charset.covers(text)
