from src.core.tensor import Tensor, matmul, softmax
from src.core.nn import Linear, Module
from typing import Optional, Tuple
import numpy as np


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with n_heads heads. Keys/values can be
    projected once (project_kv) and reused across queries, which is how the
    decoders cache cross-attention memory and self-attention prefixes.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.W_q = Linear(dim, dim, rng, dtype)
        self.W_k = Linear(dim, dim, rng, dtype, bias=False)
        self.W_v = Linear(dim, dim, rng, dtype)
        self.W_o = Linear(dim, dim, rng, dtype)

    def split_heads(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def merge_heads(self, x: Tensor) -> Tensor:
        batch, _, length, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(batch, length, self.dim)

    def project_kv(self, source: Tensor) -> Tuple[Tensor, Tensor]:
        return self.split_heads(self.W_k(source)), self.split_heads(self.W_v(source))

    def attend(self, x: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """
        :param x: B x Tq x dim queries (before projection).
        :param k: B x heads x Tk x head_dim projected keys.
        :param v: B x heads x Tk x head_dim projected values.
        :param mask: additive mask broadcastable to B x heads x Tq x Tk.
        :return: (B x Tq x dim output, B x heads x Tq x Tk weights)
        """
        q = self.split_heads(self.W_q(x))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + mask
        weights = softmax(scores, axis=-1)
        return self.W_o(self.merge_heads(matmul(weights, v))), weights

    def __call__(self, x: Tensor, source: Optional[Tensor] = None,
                 mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        k, v = self.project_kv(x if source is None else source)
        return self.attend(x, k, v, mask)
