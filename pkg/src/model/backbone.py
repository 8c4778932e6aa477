from src.core.nn import FeedForward, LayerNorm, Linear, Module, Parameter, uniform_init
from src.core.tensor import Tensor, conv2d_stride2, relu
from src.model.attention import MultiHeadAttention
from src.utils.config import BackboneConfig
from src.utils.errors import ShapeError
from dataclasses import dataclass
from typing import Tuple, Union
import numpy as np


@dataclass
class FeatureMap:
    """
    Encoded image feature. f and f_prime are stored flattened as B x N x C
    (N = H' * W', row-major); grid() restores the B x C x H' x W' layout.
    f_prime is the position-enhanced key used by positional attention.
    """
    f: Tensor
    f_prime: Tensor
    spatial: Tuple[int, int]

    @property
    def batch(self) -> int:
        return self.f.shape[0]

    @property
    def channels(self) -> int:
        return self.f.shape[2]

    @property
    def length(self) -> int:
        return self.f.shape[1]

    def grid(self, key: bool = False) -> Tensor:
        source = self.f_prime if key else self.f
        h, w = self.spatial
        return source.transpose(0, 2, 1).reshape(self.batch, self.channels, h, w)


class EncoderLayer(Module):
    """
    Pre-norm transformer encoder layer: self-attention and feed-forward, each
    wrapped in a residual connection.
    """

    def __init__(self, dim: int, n_heads: int, ff_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff = FeedForward(dim, ff_dim, rng, dtype)

    def __call__(self, x: Tensor, return_attention: bool = False):
        attended, weights = self.attn(self.norm1(x))
        x = x + attended
        x = x + self.ff(self.norm2(x))
        return (x, weights) if return_attention else x


class TextBackbone(Module):
    """
    Two stride-2 conv blocks (conv3x3 -> channel layer-norm -> relu), flatten,
    learned 2D position embedding, transformer encoder. Position embeddings hold
    one learned vector per grid cell, sized for cfg.input_hw; smaller grids use
    the top-left cells.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c = cfg.c_model
        half = c // 2
        rows, cols = cfg.input_h // 4, cfg.input_w // 4
        scale = 1.0 / np.sqrt(c)

        self.conv1_w = Parameter(uniform_init(rng, (half, 3, 3, 3), 27, dtype))
        self.conv1_b = Parameter(np.zeros(half, dtype=dtype))
        self.norm1 = LayerNorm(half, dtype)
        self.conv2_w = Parameter(uniform_init(rng, (c, half, 3, 3), half * 9, dtype))
        self.conv2_b = Parameter(np.zeros(c, dtype=dtype))
        self.norm2 = LayerNorm(c, dtype)

        self.pos_embed = Parameter(rng.normal(0.0, scale, size=(rows, cols, c)).astype(dtype))
        self.layers = []
        for i in range(cfg.n_enc_layers):
            layer = EncoderLayer(c, cfg.n_heads, cfg.ff_dim, rng, dtype)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
        self.final_norm = LayerNorm(c, dtype)

        self.key_embed = Parameter(rng.normal(0.0, scale, size=(rows, cols, c)).astype(dtype))
        self.key_proj = Linear(c, c, rng, dtype)

    def position_table(self, table: Parameter, spatial: Tuple[int, int]) -> Tensor:
        h, w = spatial
        rows, cols = table.shape[:2]
        if h > rows or w > cols:
            raise ShapeError(f"Feature grid {h}x{w} exceeds the position table {rows}x{cols}")
        return table[:h, :w].reshape(h * w, self.cfg.c_model)

    def downsample(self, images: Tensor) -> Tensor:
        """
        B x 3 x H x W -> B x H/4 x W/4 x C (channels last).
        """
        x = conv2d_stride2(images, self.conv1_w, self.conv1_b)
        x = relu(self.norm1(x.transpose(0, 2, 3, 1))).transpose(0, 3, 1, 2)
        x = conv2d_stride2(x, self.conv2_w, self.conv2_b)
        return relu(self.norm2(x.transpose(0, 2, 3, 1)))

    def encode_sequence(self, seq: Tensor, spatial: Tuple[int, int]) -> Tensor:
        x = seq + self.position_table(self.pos_embed, spatial)
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)

    def encode(self, image: Union[Tensor, np.ndarray]) -> FeatureMap:
        """
        Encodes 3 x H x W (or B x 3 x H x W) images into a FeatureMap of
        c_model x H/4 x W/4 per image.

        :raises ShapeError: If H or W is not divisible by 4 or exceeds the configured size.
        """
        images = image if isinstance(image, Tensor) else Tensor(image, dtype=self.conv1_w.dtype)
        if images.dtype != self.conv1_w.dtype:
            images = Tensor(images.data, dtype=self.conv1_w.dtype)
        if images.ndim == 3:
            images = images.reshape(1, *images.shape)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected 3 x H x W images, got {images.shape}")
        height, width = images.shape[2:]
        if height % 4 or width % 4:
            raise ShapeError(f"Image size {height}x{width} is not divisible by 4")

        spatial = (height // 4, width // 4)
        grid = self.downsample(images)
        batch = grid.shape[0]
        seq = grid.reshape(batch, spatial[0] * spatial[1], self.cfg.c_model)
        f = self.encode_sequence(seq, spatial)
        f_prime = self.key_proj(f + self.position_table(self.key_embed, spatial))
        return FeatureMap(f, f_prime, spatial)
