from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints
from src.utils.constants import DEFAULT_CHARSET
from src.utils.errors import ConfigError
from pathlib import Path
import yaml


@dataclass
class DataConfig:
    root: str = 'data/synth'
    charset: str = DEFAULT_CHARSET
    n_iv: int = 512
    n_oov: int = 128
    min_len: int = 3
    max_len: int = 7
    n_train: int = 512
    n_eval_iv: int = 128
    n_eval_oov: int = 128
    image_h: int = 32
    image_w: int = 100
    noise_std: float = 0.03
    shift_jitter: int = 2
    scale_jitter: int = 1
    spacing_jitter: int = 1
    seed: int = 0
    filter_unknown_chars: bool = True


@dataclass
class BackboneConfig:
    c_model: int = 64
    n_enc_layers: int = 2
    n_heads: int = 4
    ff_dim: Optional[int] = None
    input_h: Optional[int] = None
    input_w: Optional[int] = None

    @property
    def input_hw(self):
        return self.input_h, self.input_w


@dataclass
class ModelConfig:
    max_len: int = 25
    dtype: str = 'float32'
    use_transd: bool = True
    seed: int = 0


@dataclass
class VladConfig:
    hidden: Optional[int] = None
    attn_dim: Optional[int] = None
    mlp_layers: int = 2
    use_paa: bool = True
    use_agf: bool = True
    lstm_uses_current_context: bool = False


@dataclass
class TransDConfig:
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: Optional[int] = None
    mlp_layers: int = 2
    autoregressive: bool = True


@dataclass
class TrainConfig:
    lambda_: float = field(default=0.4, metadata={'key': 'lambda'})
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_steps: int = 2000
    milestones: List[float] = field(default_factory=lambda: [0.6, 0.8])
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ckpt_every: int = 500
    prefetch: int = 4
    out_dir: str = 'runs/default'
    data: Optional[str] = None
    val_data: Optional[str] = None


@dataclass
class DecodeConfig:
    beam_width: int = 8
    n_best: int = 5
    alpha: float = 0.5
    max_len: Optional[int] = None
    length_norm: bool = False
    mutual: bool = True


@dataclass
class EvalConfig:
    workers: Optional[int] = None


SECTIONS = {
    'data': DataConfig,
    'backbone': BackboneConfig,
    'model': ModelConfig,
    'vlad': VladConfig,
    'transd': TransDConfig,
    'train': TrainConfig,
    'decode': DecodeConfig,
    'eval': EvalConfig,
}


def _key_of(f) -> str:
    return f.metadata.get('key', f.name)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        inner = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, inner[0])
    if origin in (list, List):
        (item_hint,) = get_args(hint)
        if isinstance(value, str):
            value = [v for v in value.split(',') if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"Config key '{key}' expects a list, got {value!r}")
        return [_coerce(key, v, item_hint) for v in value]
    if value is None:
        raise ConfigError(f"Config key '{key}' may not be null")
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false'):
            return value.lower() == 'true'
        raise ConfigError(f"Config key '{key}' expects a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"Config key '{key}' expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"Config key '{key}' expects an integer, got {value!r}")
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(f"Config key '{key}' expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"Config key '{key}' expects a number, got {value!r}")
    if hint is str:
        return str(value)
    return value


@dataclass
class Config:
    """
    Experiment configuration. Serialized as a flat mapping of dotted keys
    ('vlad.hidden: 64'); every key has a documented default.
    """
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vlad: VladConfig = field(default_factory=VladConfig)
    transd: TransDConfig = field(default_factory=TransDConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def update(self, new_values: Dict[str, Any]) -> 'Config':
        """
        Applies dotted-key overrides.

        :param new_values: Mapping of 'section.field' keys to values.
        :raises ConfigError: If a key is unknown or a value has the wrong type.
        """
        for dotted, value in new_values.items():
            if not isinstance(dotted, str) or dotted.count('.') != 1:
                raise ConfigError(f"Config key '{dotted}' is not of the form 'section.field'")
            section_name, key = dotted.split('.')
            if section_name not in SECTIONS:
                raise ConfigError(f"Unknown config key '{dotted}'")
            section = getattr(self, section_name)
            hints = get_type_hints(type(section))
            match = [f for f in fields(section) if _key_of(f) == key]
            if not match:
                raise ConfigError(f"Unknown config key '{dotted}'")
            f = match[0]
            setattr(section, f.name, _coerce(dotted, value, hints[f.name]))
        return self

    def finalize(self) -> 'Config':
        """
        Resolves derived defaults and checks cross-key constraints.
        """
        if self.backbone.input_h is None:
            self.backbone.input_h = self.data.image_h
        if self.backbone.input_w is None:
            self.backbone.input_w = self.data.image_w
        if self.backbone.ff_dim is None:
            self.backbone.ff_dim = 4 * self.backbone.c_model
        if self.vlad.hidden is None:
            self.vlad.hidden = self.backbone.c_model
        if self.vlad.attn_dim is None:
            self.vlad.attn_dim = self.backbone.c_model
        if self.transd.ff_dim is None:
            self.transd.ff_dim = 4 * self.backbone.c_model
        if self.decode.max_len is None:
            self.decode.max_len = self.model.max_len + 1

        checks = [
            (self.backbone.c_model % self.backbone.n_heads == 0, 'backbone.c_model must be divisible by backbone.n_heads'),
            (self.backbone.c_model % 2 == 0, 'backbone.c_model must be even'),
            (self.backbone.c_model % self.transd.n_heads == 0, 'backbone.c_model must be divisible by transd.n_heads'),
            (self.backbone.input_h % 4 == 0 and self.backbone.input_w % 4 == 0, 'backbone.input_h/input_w must be divisible by 4'),
            (self.vlad.mlp_layers in (1, 2), 'vlad.mlp_layers must be 1 or 2'),
            (self.transd.mlp_layers in (1, 2), 'transd.mlp_layers must be 1 or 2'),
            (self.model.dtype in ('float32', 'float64'), 'model.dtype must be float32 or float64'),
            (self.train.lambda_ >= 0, 'train.lambda must be >= 0'),
            (self.train.batch_size >= 1, 'train.batch_size must be >= 1'),
            (0.0 <= self.decode.alpha <= 1.0, 'decode.alpha must lie in [0, 1]'),
            (1 <= self.decode.n_best <= self.decode.beam_width, 'decode.n_best must lie in [1, decode.beam_width]'),
            (1 <= self.decode.max_len <= self.model.max_len + 1, 'decode.max_len must lie in [1, model.max_len + 1]'),
            (self.data.min_len <= self.data.max_len <= self.model.max_len, 'data.min_len <= data.max_len <= model.max_len required'),
            (len(set(self.data.charset)) == len(self.data.charset) > 0, 'data.charset must be nonempty without repeats'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_flat(self) -> Dict[str, Any]:
        """
        Returns every key as a sorted flat 'section.field' mapping.
        """
        flat = {}
        for section_name in SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                value = getattr(section, f.name)
                flat[f"{section_name}.{_key_of(f)}"] = list(value) if isinstance(value, list) else value
        return dict(sorted(flat.items()))

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> 'Config':
        return cls().update(flat).finalize()


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """
    Loads a flat dotted-key YAML config file on top of the defaults.

    :param path: Config file; None means defaults only.
    :param overrides: Extra dotted keys applied after the file.
    :raises ConfigError: On unreadable files, nested sections or unknown keys.
    """
    cfg = Config()
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"Config file {path} must contain a mapping of dotted keys")
        nested = [k for k, v in raw.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"Config file {path} uses nested section '{nested[0]}'; use dotted keys")
        cfg.update(raw)
    if overrides:
        cfg.update(overrides)
    return cfg.finalize()


def dump_config(cfg: Config, path: Union[str, Path]) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        yaml.safe_dump(cfg.to_flat(), fh, sort_keys=True, default_flow_style=False)
