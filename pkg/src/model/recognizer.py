from src.core.nn import Module
from src.core.tensor import Tensor
from src.data.charset import Charset
from src.model.backbone import FeatureMap, TextBackbone
from src.model.transd import TransDecoder
from src.model.vlad import VladDecoder
from src.utils.config import Config
from src.utils.errors import ConfigError
from typing import NamedTuple, Optional, Tuple, Union
from enum import Enum
import numpy as np


class Direction(Enum):
    L2R = 'L2R'
    R2L = 'R2L'


class HeadOutputs(NamedTuple):
    """
    Teacher-forced (B, T, V) distributions of the four heads; the TransD pair
    is None when the model has no TransD branch.
    """
    vlad_l2r: Tensor
    vlad_r2l: Tensor
    transd_l2r: Optional[Tensor]
    transd_r2l: Optional[Tensor]


class BranchPair(Module):
    def __init__(self, l2r: Module, r2l: Module):
        super().__init__()
        self.l2r = l2r
        self.r2l = r2l

    def get(self, direction: Direction) -> Module:
        return self.l2r if direction is Direction.L2R else self.r2l


class VlamdModel(Module):
    """
    Shared backbone with VLAD and TransD decoders in both reading directions.
    Parameters are named by their attribute path, e.g. 'transd.r2l.layer0.ff.fc1.weight'.
    """

    def __init__(self, cfg: Config, charset: Optional[Charset] = None):
        super().__init__()
        self.config = cfg
        self.charset = charset or Charset(cfg.data.charset)
        if self.charset.chars != cfg.data.charset:
            raise ConfigError("Model charset differs from data.charset")
        self.dtype = np.dtype(cfg.model.dtype)
        self.max_steps = cfg.model.max_len + 1
        rng = np.random.default_rng(cfg.model.seed)
        c, v = cfg.backbone.c_model, self.charset.num_classes

        self.backbone = TextBackbone(cfg.backbone, rng, self.dtype)
        self.vlad = BranchPair(*(VladDecoder(c, v, cfg.vlad, self.max_steps, rng, self.dtype) for _ in range(2)))
        self.transd: Optional[BranchPair] = None
        if cfg.model.use_transd:
            self.transd = BranchPair(*(TransDecoder(c, v, cfg.transd, self.max_steps, rng, self.dtype) for _ in range(2)))
        self.assign_names()

    def branches(self, direction: Direction) -> Tuple[VladDecoder, Optional[TransDecoder]]:
        transd = self.transd.get(direction) if self.transd is not None else None
        return self.vlad.get(direction), transd

    def encode(self, images: Union[Tensor, np.ndarray]) -> FeatureMap:
        return self.backbone.encode(images)

    def forward_teacher_forced(self, images, l2r_targets: np.ndarray, r2l_targets: np.ndarray) -> HeadOutputs:
        """
        Runs all heads on padded EOS-terminated targets of both directions.
        """
        fmap = self.encode(images)
        outputs = []
        for direction, targets in ((Direction.L2R, l2r_targets), (Direction.R2L, r2l_targets)):
            vlad, _ = self.branches(direction)
            outputs.append(vlad.forced_decode(targets, vlad.prepare(fmap)))
        for direction, targets in ((Direction.L2R, l2r_targets), (Direction.R2L, r2l_targets)):
            _, transd = self.branches(direction)
            outputs.append(None if transd is None else transd.forced_decode_parallel(targets, transd.prepare(fmap)))
        return HeadOutputs(*outputs)
