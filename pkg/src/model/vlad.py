"""
Visual-linguistic attention decoder: an LSTM step driven by visual-aware
attention with coverage, positional-aware attention over position-enhanced
keys, and a gated fusion of the two contexts before the output classifier.
"""
from src.core.nn import Embedding, LSTMCell, Linear, Module, OutputMLP, Parameter
from src.core.tensor import Tensor, concat, matmul, sigmoid, softmax, stack, tanh
from src.model.backbone import FeatureMap
from src.model.targets import shifted_inputs
from src.utils.config import VladConfig
from src.utils.errors import AlignmentError, InputError, LengthError
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple
import numpy as np


@dataclass(frozen=True)
class VladState:
    """
    Recurrent state before step t. y_prev holds the token consumed at step t
    (BOS at t = 1); coverage is the running sum of past visual attention.
    """
    h: Tensor
    c_mem: Tensor
    a_prev: Tensor
    coverage: Tensor
    y_prev: Optional[np.ndarray]
    t: int

    def with_token(self, ids) -> 'VladState':
        return replace(self, y_prev=np.asarray(ids, dtype=np.int64).reshape(-1))


@dataclass(frozen=True)
class VladMemory:
    fmap: FeatureMap
    keys: Tensor
    pos_keys: Tensor


class RecurrentOutput(NamedTuple):
    h: Tensor
    c_mem: Tensor
    r: Tensor
    a: Tensor
    alpha: Tensor
    coverage: Tensor


class StepOutput(NamedTuple):
    dist: Tensor
    new_state: VladState
    gate: Optional[Tensor]
    alpha: Tensor
    position_alpha: Optional[Tensor]


def _weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    batch, length = weights.shape
    return matmul(weights.reshape(batch, 1, length), values).reshape(batch, values.shape[2])


class VisualAwareAttention(Module):
    """
    e_i = v^T tanh(W_q [emb; h] + W_k f_i + W_c cov_i)
    """

    def __init__(self, query_dim: int, c_model: int, attn_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.attn_dim = attn_dim
        self.W_q = Linear(query_dim, attn_dim, rng, dtype)
        self.W_k = Linear(c_model, attn_dim, rng, dtype, bias=False)
        self.W_c = Parameter(rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=attn_dim).astype(dtype))
        self.v = Linear(attn_dim, 1, rng, dtype, bias=False)

    def __call__(self, query: Tensor, keys: Tensor, values: Tensor, coverage: Tensor) -> Tuple[Tensor, Tensor]:
        batch, length, _ = keys.shape
        q = self.W_q(query).reshape(batch, 1, self.attn_dim)
        cov = coverage.reshape(batch, length, 1) * self.W_c
        energies = self.v(tanh(q + keys + cov)).reshape(batch, length)
        alpha = softmax(energies, axis=-1)
        return _weighted_sum(alpha, values), alpha


class PositionalAwareAttention(Module):
    """
    Attends with a learned per-step position query over position-enhanced keys
    f' and reads the plain features f.
    """

    def __init__(self, max_steps: int, c_model: int, attn_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.attn_dim = attn_dim
        self.P = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c_model), size=(max_steps, c_model)).astype(dtype))
        self.W_q = Linear(c_model, attn_dim, rng, dtype)
        self.W_k = Linear(c_model, attn_dim, rng, dtype, bias=False)
        self.v = Linear(attn_dim, 1, rng, dtype, bias=False)

    def __call__(self, t: int, pos_keys: Tensor, values: Tensor) -> Tuple[Tensor, Tensor]:
        if not 1 <= t <= self.P.shape[0]:
            raise LengthError(f"Step {t} outside the position table [1, {self.P.shape[0]}]")
        batch, length, _ = pos_keys.shape
        q = self.W_q(self.P[t - 1].reshape(1, -1)).reshape(1, 1, self.attn_dim)
        energies = self.v(tanh(q + pos_keys)).reshape(batch, length)
        alpha = softmax(energies, axis=-1)
        return _weighted_sum(alpha, values), alpha


class AdaptiveGatedFusion(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, gated: bool = True):
        super().__init__()
        self.gated = gated
        if gated:
            self.W_m = Linear(in_dim, in_dim, rng, dtype)
        self.W_o = Linear(in_dim, out_dim, rng, dtype)

    def __call__(self, z: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if not self.gated:
            return self.W_o(z), None
        g = sigmoid(self.W_m(z))
        return self.W_o(g * z), g


class VladDecoder(Module):
    """
    One direction of the attention decoder.

    :param num_classes: Output classes V (EOS plus characters); the input
        embedding holds V + 1 rows, the last being BOS.
    :param max_steps: T_max, the longest decodable sequence including EOS.
    """

    def __init__(self, c_model: int, num_classes: int, cfg: VladConfig, max_steps: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.c_model = c_model
        self.num_classes = num_classes
        self.bos_id = num_classes
        self.max_steps = max_steps
        hidden = cfg.hidden

        self.embed = Embedding(num_classes + 1, c_model, rng, dtype)
        self.vaa = VisualAwareAttention(c_model + hidden, c_model, cfg.attn_dim, rng, dtype)
        self.lstm = LSTMCell(2 * c_model, hidden, rng, dtype)
        if cfg.use_paa:
            self.paa = PositionalAwareAttention(max_steps, c_model, cfg.attn_dim, rng, dtype)
        fused = hidden + 2 * c_model + (c_model if cfg.use_paa else 0)
        self.agf = AdaptiveGatedFusion(fused, c_model, rng, dtype, gated=cfg.use_agf)
        self.mlp = OutputMLP(c_model, num_classes, cfg.mlp_layers, rng, dtype)

    def prepare(self, fmap: FeatureMap) -> VladMemory:
        """
        Projects the feature map once per image; hypotheses share the result.

        :raises InputError: If the feature map has no positions.
        """
        if fmap.length == 0:
            raise InputError("Feature map is empty")
        pos_keys = self.paa.W_k(fmap.f_prime) if self.cfg.use_paa else fmap.f_prime
        return VladMemory(fmap, self.vaa.W_k(fmap.f), pos_keys)

    def initial_state(self, memory: VladMemory) -> VladState:
        batch = memory.fmap.batch
        dtype = self.embed.table.dtype
        return VladState(
            h=Tensor(np.zeros((batch, self.cfg.hidden), dtype=dtype)),
            c_mem=Tensor(np.zeros((batch, self.cfg.hidden), dtype=dtype)),
            a_prev=Tensor(np.zeros((batch, self.c_model), dtype=dtype)),
            coverage=Tensor(np.zeros((batch, memory.fmap.length), dtype=dtype)),
            y_prev=np.full(batch, self.bos_id, dtype=np.int64),
            t=1,
        )

    def vaa_attend(self, emb: Tensor, h_prev: Tensor, coverage: Tensor, memory: VladMemory) -> Tuple[Tensor, Tensor]:
        return self.vaa(concat([emb, h_prev], axis=-1), memory.keys, memory.fmap.f, coverage)

    def recurrent_step(self, state: VladState, memory: VladMemory) -> RecurrentOutput:
        """
        Embeds y_prev, attends visually, and advances the LSTM. The LSTM reads
        the previous context a_{t-1} unless lstm_uses_current_context is set.
        """
        if state.t > self.max_steps:
            raise LengthError(f"Step {state.t} exceeds the maximum of {self.max_steps}")
        if state.y_prev is None:
            raise AlignmentError("State carries no previous token; call with_token() first")
        emb = self.embed(state.y_prev)
        a, alpha = self.vaa_attend(emb, state.h, state.coverage, memory)
        context = a if self.cfg.lstm_uses_current_context else state.a_prev
        h, c_mem = self.lstm(concat([emb, context], axis=-1), state.h, state.c_mem)
        r = concat([h, emb], axis=-1)
        return RecurrentOutput(h, c_mem, r, a, alpha, state.coverage + alpha)

    def paa_attend(self, t: int, memory: VladMemory) -> Tuple[Tensor, Tensor]:
        return self.paa(t, memory.pos_keys, memory.fmap.f)

    def adaptive_gated_fusion(self, r: Tensor, a: Tensor, q: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
        parts = [r, a] if q is None else [r, a, q]
        return self.agf(concat(parts, axis=-1))

    def decode_step(self, state: VladState, memory: VladMemory) -> StepOutput:
        """
        Consumes state.y_prev and returns the distribution over the next token.
        The returned state has y_prev cleared; the caller feeds the chosen
        token with with_token().
        """
        rec = self.recurrent_step(state, memory)
        q, position_alpha = self.paa_attend(state.t, memory) if self.cfg.use_paa else (None, None)
        o, gate = self.adaptive_gated_fusion(rec.r, rec.a, q)
        dist = softmax(self.mlp(o), axis=-1)
        new_state = VladState(rec.h, rec.c_mem, rec.a, rec.coverage, None, state.t + 1)
        return StepOutput(dist, new_state, gate, rec.alpha, position_alpha)

    def forced_decode(self, targets, memory: VladMemory) -> Tensor:
        """
        Teacher-forced decoding of EOS-terminated targets.

        :param targets: (T,) or (B, T) ids; rows may be right-padded with PAD_ID
            after their EOS.
        :return: (B, T, V) distributions.
        :raises LengthError: If T exceeds max_steps.
        :raises AlignmentError: If a row is not characters, EOS, then only PAD.
        """
        targets, inputs = shifted_inputs(targets, self.bos_id, self.max_steps)
        state = self.initial_state(memory)
        dists = []
        for t in range(targets.shape[1]):
            out = self.decode_step(state.with_token(inputs[:, t]), memory)
            dists.append(out.dist)
            state = out.new_state
        return stack(dists, axis=1)
