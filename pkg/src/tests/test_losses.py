from src.app.selfcheck import tiny_config, tiny_loss_fn
from src.core.tensor import Tensor, softmax
from src.model.recognizer import VlamdModel
from src.training.losses import (collate, main_loss, make_target_pair, mutual_kl_term, mutual_loss,
                                 reverse_index, total_loss)
from src.utils.constants import EOS_ID, PAD_ID
from src.utils.errors import AlignmentError
import numpy as np
import pytest

V = 8


def one_hot(ids, vocab=V):
    ids = np.atleast_2d(ids)
    out = np.zeros(ids.shape + (vocab,))
    for idx in np.ndindex(ids.shape):
        out[idx + (max(ids[idx], 0),)] = 1.0
    return Tensor(out)


def random_dist(rng, *shape, requires_grad=False):
    logits = Tensor(rng.normal(size=shape), requires_grad=requires_grad)
    return logits, softmax(logits, axis=-1)


class TestTargets:
    def test_pair_reverses_content_and_keeps_eos_last(self):
        pair = make_target_pair([1, 2, 3])
        np.testing.assert_array_equal(pair.s_l2r, [1, 2, 3, EOS_ID])
        np.testing.assert_array_equal(pair.s_r2l, [3, 2, 1, EOS_ID])

    def test_collate_pads_after_eos(self):
        pair = collate([make_target_pair([1, 2]), make_target_pair([5])])
        np.testing.assert_array_equal(pair.s_l2r, [[1, 2, 0], [5, 0, PAD_ID]])
        np.testing.assert_array_equal(pair.s_r2l, [[2, 1, 0], [5, 0, PAD_ID]])
        np.testing.assert_array_equal(pair.content_lengths, [2, 1])

    def test_reverse_index_keeps_eos_and_padding(self):
        np.testing.assert_array_equal(reverse_index(np.array([3, 1]), 5),
                                      [[2, 1, 0, 3, 4], [0, 1, 2, 3, 4]])


class TestMainLoss:
    def test_one_hot_targets_give_zero(self):
        pair = make_target_pair([1, 2, 3])
        y_l2r, y_r2l = one_hot(pair.s_l2r), one_hot(pair.s_r2l)
        loss, report = total_loss(y_l2r, y_r2l, y_l2r, y_r2l, pair, lam=0.4)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert report.kl_vlad == pytest.approx(0.0, abs=1e-12)

    def test_uniform_heads_give_four_log_v(self):
        pair = collate([make_target_pair([1, 2]), make_target_pair([4])])
        uniform = Tensor(np.full((2, 3, V), 1.0 / V))
        loss = main_loss(uniform, uniform, uniform, uniform, pair)
        assert loss.item() == pytest.approx(4 * np.log(V))

    def test_without_transd_heads(self):
        pair = make_target_pair([3])
        uniform = Tensor(np.full((1, 2, V), 1.0 / V))
        loss, report = total_loss(uniform, uniform, None, None, pair, lam=1.0)
        assert loss.item() == pytest.approx(2 * np.log(V))
        assert report.ce_transd_l2r == 0.0 and report.kl_transd == 0.0

    def test_length_mismatch_raises(self):
        pair = make_target_pair([1, 2])
        with pytest.raises(AlignmentError):
            main_loss(Tensor(np.full((1, 4, V), 1.0 / V)), Tensor(np.full((1, 3, V), 1.0 / V)), None, None, pair)


class TestMutualLoss:
    def test_reversed_copy_has_zero_divergence(self, rng):
        _, y = random_dist(rng, 1, 4, V)
        reversed_copy = Tensor(y.data[:, [2, 1, 0, 3]])
        assert mutual_loss(y, reversed_copy, np.array([3])).item() == pytest.approx(0.0, abs=1e-12)

    def test_eos_aligns_with_eos(self, rng):
        # Content positions agree after reversal; only the EOS rows differ.
        _, y_l2r = random_dist(rng, 1, 3, V)
        _, eos_other = random_dist(rng, 1, 1, V)
        y_r2l = Tensor(np.concatenate([y_l2r.data[:, [1, 0]], eos_other.data], axis=1))
        p, q = y_l2r.data[0, 2], eos_other.data[0, 0]
        expected = np.sum(p * (np.log(p) - np.log(q))) / 3
        assert mutual_kl_term(y_l2r, y_r2l, np.array([2])).item() == pytest.approx(expected)

    def test_padding_positions_are_excluded(self, rng):
        _, y_l2r = random_dist(rng, 1, 4, V)
        _, y_r2l = random_dist(rng, 1, 4, V)
        noisy = y_r2l.data.copy()
        noisy[0, 3] = np.roll(noisy[0, 3], 1)
        short = mutual_kl_term(y_l2r, y_r2l, np.array([2])).item()
        assert mutual_kl_term(y_l2r, Tensor(noisy), np.array([2])).item() == pytest.approx(short)

    def test_reversed_operand_gets_no_gradient(self, rng):
        live_logits, live = random_dist(rng, 1, 3, V, requires_grad=True)
        other_logits, other = random_dist(rng, 1, 3, V, requires_grad=True)
        mutual_kl_term(live, other, np.array([2])).backward()
        assert live_logits.grad is not None and np.any(live_logits.grad != 0)
        assert other_logits.grad is None or not np.any(other_logits.grad)

    def test_shape_mismatch_raises(self, rng):
        _, a = random_dist(rng, 1, 3, V)
        _, b = random_dist(rng, 1, 4, V)
        with pytest.raises(AlignmentError):
            mutual_loss(a, b)


class TestTotalLoss:
    def _heads(self, rng, steps=4, batch=2):
        return [random_dist(rng, batch, steps, V)[1] for _ in range(4)]

    def test_report_recombines_to_total(self, rng):
        pair = collate([make_target_pair([1, 2, 3]), make_target_pair([6, 7])])
        loss, report = total_loss(*self._heads(rng), pair, lam=0.4)
        parts = report.components()
        ces = parts['ce_vlad_l2r'] + parts['ce_vlad_r2l'] + parts['ce_transd_l2r'] + parts['ce_transd_r2l']
        assert report.total == pytest.approx(ces + 0.4 * (parts['kl_vlad'] + parts['kl_transd']))
        assert loss.item() == report.total

    def test_linear_in_lambda(self, rng):
        pair = collate([make_target_pair([1, 2, 3]), make_target_pair([6, 7])])
        heads = self._heads(rng)
        values = [total_loss(*heads, pair, lam)[0].item() for lam in (0.0, 0.5, 1.0)]
        assert values[1] - values[0] == pytest.approx(values[2] - values[1])

    def test_gradients_linear_in_lambda(self, rng):
        pair = collate([make_target_pair([1, 2, 3]), make_target_pair([6, 7])])
        raw = [rng.normal(size=(2, 4, V)) for _ in range(4)]

        def grads(lam):
            logits = [Tensor(r, requires_grad=True) for r in raw]
            total_loss(*(softmax(x, axis=-1) for x in logits), pair, lam)[0].backward()
            return np.concatenate([x.grad.ravel() for x in logits])

        g0, g1, g2 = grads(0.0), grads(0.5), grads(1.0)
        assert not np.allclose(g1, g0)
        np.testing.assert_allclose(g1 - g0, g2 - g1, atol=1e-10)

    def test_zero_lambda_gradients_match_main_loss(self):
        model_a = VlamdModel(tiny_config())
        model_b = VlamdModel(tiny_config())
        tiny_loss_fn(model_a, seed=3, lam=0.0)().backward()

        rng = np.random.default_rng(3)
        cfg = model_b.config
        images = rng.uniform(0.0, 1.0, size=(2, 3, cfg.backbone.input_h, cfg.backbone.input_w))
        chars = model_b.charset.chars
        pair = collate([make_target_pair(model_b.charset.encode(w)) for w in (chars[:cfg.data.max_len], chars[-1:])])
        heads = model_b.forward_teacher_forced(images, pair.s_l2r, pair.s_r2l)
        main_loss(*heads, pair).backward()

        for (name, pa), (_, pb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            np.testing.assert_array_equal(pa.grad, pb.grad, err_msg=name)
