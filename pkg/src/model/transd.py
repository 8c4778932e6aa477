"""
Transformer decoder branch. Each step's input is the learned position query
q'_t plus the embedding of the previous token; decoding is either parallel
under a causal mask (teacher forcing) or incremental with a key/value cache.
"""
from src.core.nn import Embedding, FeedForward, LayerNorm, Module, OutputMLP, Parameter
from src.core.tensor import Tensor, concat, softmax
from src.model.attention import MultiHeadAttention
from src.model.backbone import FeatureMap
from src.model.targets import shifted_inputs
from src.utils.config import TransDConfig
from src.utils.constants import MASK_NEG
from src.utils.errors import InputError, LengthError
from dataclasses import dataclass
from typing import List, Optional, Tuple
import numpy as np


@dataclass(frozen=True)
class TransDMemory:
    fmap: FeatureMap
    cross_kv: Tuple[Tuple[Tensor, Tensor], ...]


@dataclass(frozen=True)
class TransDCache:
    """
    Per-layer self-attention keys and values of the decoded prefix.
    Immutable, so beam hypotheses can share it.
    """
    keys: Tuple[Optional[Tensor], ...]
    values: Tuple[Optional[Tensor], ...]
    length: int


def causal_mask(length: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_NEG, dtype=dtype), k=1)


class TransDLayer(Module):
    def __init__(self, dim: int, n_heads: int, ff_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff_dim, rng, dtype)

    def cross_and_ff(self, x: Tensor, cross_kv: Tuple[Tensor, Tensor]) -> Tensor:
        attended, _ = self.cross_attn.attend(self.norm2(x), *cross_kv)
        x = x + attended
        return x + self.ff(self.norm3(x))


class TransDecoder(Module):
    def __init__(self, c_model: int, num_classes: int, cfg: TransDConfig, max_steps: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.c_model = c_model
        self.num_classes = num_classes
        self.bos_id = num_classes
        self.max_steps = max_steps

        self.queries = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c_model), size=(max_steps, c_model)).astype(dtype))
        self.embed = Embedding(num_classes + 1, c_model, rng, dtype)
        self.layers: List[TransDLayer] = []
        for i in range(cfg.n_layers):
            layer = TransDLayer(c_model, cfg.n_heads, cfg.ff_dim, rng, dtype)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
        self.final_norm = LayerNorm(c_model, dtype)
        self.mlp = OutputMLP(c_model, num_classes, cfg.mlp_layers, rng, dtype)

    def prepare(self, fmap: FeatureMap) -> TransDMemory:
        if fmap.length == 0:
            raise InputError("Feature map is empty")
        return TransDMemory(fmap, tuple(layer.cross_attn.project_kv(fmap.f) for layer in self.layers))

    def initial_cache(self) -> TransDCache:
        empty = (None,) * len(self.layers)
        return TransDCache(empty, empty, 0)

    def step_inputs(self, y_prev: np.ndarray, start: int) -> Tensor:
        """
        (B, T) previous tokens -> (B, T, C) inputs for steps start+1 .. start+T.
        Without autoregression the inputs are the position queries alone.
        """
        batch, length = y_prev.shape
        q = self.queries[start:start + length]
        if not self.cfg.autoregressive:
            return q.reshape(1, length, self.c_model) + Tensor(np.zeros((batch, length, self.c_model), dtype=q.dtype))
        return self.embed(y_prev) + q

    def _head(self, x: Tensor) -> Tensor:
        return softmax(self.mlp(self.final_norm(x)), axis=-1)

    def forced_decode_parallel(self, targets, memory: TransDMemory) -> Tensor:
        """
        Teacher-forced decoding of all positions at once.

        :param targets: (T,) or (B, T) EOS-terminated ids, PAD_ID after EOS.
        :return: (B, T, V) distributions.
        """
        targets, y_prev = shifted_inputs(targets, self.bos_id, self.max_steps)
        x = self.step_inputs(y_prev, 0)
        mask = causal_mask(targets.shape[1], x.dtype)
        for layer, cross_kv in zip(self.layers, memory.cross_kv):
            attended, _ = layer.self_attn(layer.norm1(x), mask=mask)
            x = layer.cross_and_ff(x + attended, cross_kv)
        return self._head(x)

    def incremental_step(self, cache: TransDCache, y_prev, memory: TransDMemory) -> Tuple[Tensor, TransDCache]:
        """
        Decodes one position given the cached prefix.

        :param y_prev: (B,) ids of the previous token (BOS at the first step).
        :return: ((B, V) distribution, extended cache)
        """
        t = cache.length + 1
        if t > self.max_steps:
            raise LengthError(f"Step {t} exceeds the maximum of {self.max_steps}")
        y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1, 1)
        x = self.step_inputs(y_prev, cache.length)
        keys, values = [], []
        for i, (layer, cross_kv) in enumerate(zip(self.layers, memory.cross_kv)):
            normed = layer.norm1(x)
            k_new, v_new = layer.self_attn.project_kv(normed)
            k = k_new if cache.keys[i] is None else concat([cache.keys[i], k_new], axis=2)
            v = v_new if cache.values[i] is None else concat([cache.values[i], v_new], axis=2)
            keys.append(k)
            values.append(v)
            attended, _ = layer.self_attn.attend(normed, k, v)
            x = layer.cross_and_ff(x + attended, cross_kv)
        dist = self._head(x)
        return dist.reshape(dist.shape[0], self.num_classes), TransDCache(tuple(keys), tuple(values), t)
