"""
Built-in verification at tiny dimensions: finite-difference gradients for
every tensor primitive and for the full training loss, plus exhaustive
enumeration oracles for co-beam search and mutual re-decoding.
"""
from src.core import tensor as T
from src.core.gradcheck import check_gradients
from src.core.tensor import Tensor, no_grad
from src.decoding.beam import co_beam_search, force_score, rank_key
from src.decoding.mutual import mutual_redecode
from src.model.backbone import FeatureMap
from src.model.recognizer import Direction, VlamdModel
from src.training.losses import collate, make_target_pair, total_loss
from src.utils.config import Config, DecodeConfig
from src.utils.constants import EOS_ID
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple
from src.utils.logger import logger
import numpy as np
import itertools

GRAD_TOLERANCE = 1e-4
SELFCHECK_MODELS = 20


def tiny_config(overrides: Optional[Dict[str, Any]] = None) -> Config:
    """
    c_model 16, 8 output classes (7 characters + EOS), 16 x 32 images, words up to 3 characters.
    """
    flat = {
        'data.charset': 'abcdefg',
        'data.image_h': 16,
        'data.image_w': 32,
        'data.min_len': 1,
        'data.max_len': 3,
        'backbone.c_model': 16,
        'backbone.n_heads': 2,
        'backbone.n_enc_layers': 1,
        'transd.n_heads': 2,
        'transd.n_layers': 1,
        'model.max_len': 3,
        'model.dtype': 'float64',
    }
    flat.update(overrides or {})
    return Config().update(flat).finalize()


def enumeration_config(seed: int) -> Config:
    """
    4 characters + EOS, at most 3 decoded tokens: 21 terminated sequences.
    """
    return tiny_config({
        'data.charset': 'abcd',
        'data.max_len': 2,
        'model.max_len': 2,
        'model.seed': seed,
        'decode.beam_width': 125,
        'decode.n_best': 21,
        'decode.max_len': 3,
    })


def terminated_sequences(num_classes: int, max_tokens: int) -> List[Tuple[int, ...]]:
    """
    Every EOS-terminated sequence of at most max_tokens tokens.
    """
    chars = range(1, num_classes)
    out = []
    for length in range(max_tokens):
        out.extend(content + (EOS_ID,) for content in itertools.product(chars, repeat=length))
    return out


def brute_force_joint(fmap: FeatureMap, model: VlamdModel, cfg: DecodeConfig, direction: Direction) -> Tuple[int, ...]:
    vlad, transd = model.branches(direction)
    scored = [(force_score(seq, fmap, vlad, transd, cfg), seq)
              for seq in terminated_sequences(model.charset.num_classes, cfg.max_len)]
    return min(scored, key=lambda s: rank_key(*s))[1]


def brute_force_mutual(fmap: FeatureMap, model: VlamdModel, cfg: DecodeConfig) -> Tuple[int, ...]:
    scored = []
    for seq in terminated_sequences(model.charset.num_classes, cfg.max_len):
        content = seq[:-1]
        l2r = force_score(content + (EOS_ID,), fmap, *model.branches(Direction.L2R), cfg)
        r2l = force_score(tuple(reversed(content)) + (EOS_ID,), fmap, *model.branches(Direction.R2L), cfg)
        scored.append((l2r + r2l, content))
    return min(scored, key=lambda s: rank_key(*s))[1]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class SelfCheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> List[str]:
        return [f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.detail}" for r in self.results]


def _leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], Tensor], Dict[str, Tensor]]]:
    """
    (name, scalar function, tensors to differentiate) for each primitive.
    """
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    pos = _leaf(rng, 3, 4, low=0.5, high=2.0)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    away = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.2, 1.0, size=(3, 4)), requires_grad=True)
    gamma, beta = _leaf(rng, 4), _leaf(rng, 4)
    table = _leaf(rng, 6, 4)
    ids = rng.integers(0, 6, size=(2, 3))
    image, kernel, bias = _leaf(rng, 1, 2, 6, 6), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    logits = _leaf(rng, 2, 3, 5)
    targets = np.array([[1, 2, 0], [4, 0, -1]])
    other = Tensor(T.softmax(Tensor(rng.normal(size=(2, 3, 5))), axis=-1).data)
    weights = Tensor(rng.normal(size=(3, 4)))
    index = np.array([[2], [0], [3]])

    w34 = Tensor(rng.normal(size=(3, 4)))
    w3 = Tensor(rng.normal(size=3))
    w235 = Tensor(rng.normal(size=(2, 3, 5)))
    w_stack = Tensor(rng.normal(size=(2, 3, 4)))
    w_conv = Tensor(rng.normal(size=(1, 3, 3, 3)))
    w_emb = Tensor(rng.normal(size=(2, 3, 4)))
    w_mm = Tensor(rng.normal(size=(2, 3, 5)))
    w_cat = Tensor(rng.normal(size=(3, 8)))
    w_take = Tensor(rng.normal(size=(3, 1)))

    return [
        ('add', lambda: T.tsum((a + b) * w34), {'a': a, 'b': b}),
        ('sub', lambda: T.tsum((a - b) * w34), {'a': a, 'b': b}),
        ('mul', lambda: T.tsum(a * b * w34), {'a': a, 'b': b}),
        ('div', lambda: T.tsum(a / pos * w34), {'a': a, 'pos': pos}),
        ('power', lambda: T.tsum(T.power(pos, 1.5) * w34), {'pos': pos}),
        ('matmul', lambda: T.tsum(T.matmul(m1, m2) * w_mm), {'m1': m1, 'm2': m2}),
        ('sum', lambda: T.tsum(T.tsum(a, axis=1) * w3) * T.tsum(b), {'a': a, 'b': b}),
        ('mean', lambda: T.tsum(T.mean(a, axis=0) * T.mean(b, axis=0)), {'a': a, 'b': b}),
        ('exp', lambda: T.tsum(T.exp(a) * w34), {'a': a}),
        ('log', lambda: T.tsum(T.log(pos) * w34), {'pos': pos}),
        ('tanh', lambda: T.tsum(T.tanh(a) * w34), {'a': a}),
        ('sigmoid', lambda: T.tsum(T.sigmoid(a) * w34), {'a': a}),
        ('relu', lambda: T.tsum(T.relu(away) * w34), {'x': away}),
        ('softmax', lambda: T.tsum(T.softmax(logits, axis=-1) * w235), {'logits': logits}),
        ('layer_norm', lambda: T.tsum(T.layer_norm(a, gamma, beta) * weights), {'a': a, 'gamma': gamma, 'beta': beta}),
        ('transpose', lambda: T.tsum(T.transpose(logits, (2, 0, 1)) * Tensor(w235.data.transpose(2, 0, 1))), {'logits': logits}),
        ('getitem', lambda: T.tsum(a[1:, ::2] * Tensor(w34.data[1:, ::2])), {'a': a}),
        ('concat', lambda: T.tsum(T.concat([a, b], axis=1) * w_cat), {'a': a, 'b': b}),
        ('stack', lambda: T.tsum(T.stack([a, b], axis=0) * w_stack), {'a': a, 'b': b}),
        ('take_along_axis', lambda: T.tsum(T.take_along_axis(a, index, axis=1) * w_take), {'a': a}),
        ('embedding', lambda: T.tsum(T.embedding_lookup(table, ids) * w_emb), {'table': table}),
        ('conv2d_stride2', lambda: T.tsum(T.conv2d_stride2(image, kernel, bias) * w_conv),
         {'image': image, 'kernel': kernel, 'bias': bias}),
        ('cross_entropy', lambda: T.cross_entropy(T.softmax(logits, axis=-1), targets), {'logits': logits}),
        ('kl_div', lambda: T.kl_div(T.softmax(logits, axis=-1), other), {'logits': logits}),
    ]


def check_primitives(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, tensors in primitive_cases(rng):
        worst = max(r.relative_error for r in check_gradients(fn, tensors))
        results.append(CheckResult(f"grad:{name}", worst < GRAD_TOLERANCE, f"max relative error {worst:.2e}"))
    return results


def tiny_loss_fn(model: VlamdModel, seed: int = 0, lam: float = 0.4) -> Callable[[], Tensor]:
    """
    Total training loss of model on a fixed random batch of two words.
    """
    rng = np.random.default_rng(seed)
    cfg = model.config
    images = rng.uniform(0.0, 1.0, size=(2, 3, cfg.backbone.input_h, cfg.backbone.input_w))
    chars = model.charset.chars
    words = [chars[:cfg.data.max_len], chars[-1:]]
    pair = collate([make_target_pair(model.charset.encode(w)) for w in words])

    def loss() -> Tensor:
        heads = model.forward_teacher_forced(images, pair.s_l2r, pair.s_r2l)
        return total_loss(*heads, pair, lam)[0]

    return loss


def check_model_gradients(seed: int = 0, samples_per_tensor: int = 2) -> CheckResult:
    model = VlamdModel(tiny_config({'model.seed': seed}))
    results = check_gradients(tiny_loss_fn(model, seed), dict(model.named_parameters()),
                              samples_per_tensor=samples_per_tensor, rng=np.random.default_rng(seed))
    worst = max(results, key=lambda r: r.relative_error)
    return CheckResult('grad:total_loss', worst.relative_error < GRAD_TOLERANCE,
                       f"max relative error {worst.relative_error:.2e} at {worst.name}")


def check_beam_enumeration(n_models: int = SELFCHECK_MODELS) -> List[CheckResult]:
    results = []
    for seed in range(n_models):
        cfg = enumeration_config(seed)
        model = VlamdModel(cfg)
        image = np.random.default_rng(seed).uniform(0.0, 1.0, size=(3, cfg.backbone.input_h, cfg.backbone.input_w))
        with no_grad():
            fmap = model.encode(image)
        ok = True
        for direction in Direction:
            found = co_beam_search(fmap, *model.branches(direction), cfg.decode, direction).entries[0].tokens
            ok &= found == brute_force_joint(fmap, model, cfg.decode, direction)
        best, _ = mutual_redecode(fmap, model, cfg.decode)
        ok &= best == brute_force_mutual(fmap, model, cfg.decode)
        results.append(CheckResult(f"beam:model{seed}", bool(ok), 'co-beam and mutual winners match enumeration'
                                   if ok else 'winner differs from enumeration'))
    return results


def run_selfcheck(n_models: int = SELFCHECK_MODELS) -> SelfCheckReport:
    report = SelfCheckReport()
    report.results.extend(check_primitives())
    report.results.append(check_model_gradients())
    report.results.extend(check_beam_enumeration(n_models))
    for r in report.results:
        logger.log_event(f"{r.name}: {'pass' if r.passed else 'FAIL'} ({r.detail})", 'INFO' if r.passed else 'ERROR')
    return report
