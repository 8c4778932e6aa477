from src.app.selfcheck import enumeration_config, tiny_config
from src.core.tensor import no_grad
from src.data.synth import emit_dataset
from src.model.recognizer import VlamdModel
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    return VlamdModel(cfg)


@pytest.fixture
def image(cfg, rng):
    return rng.uniform(0.0, 1.0, size=(3, cfg.backbone.input_h, cfg.backbone.input_w))


@pytest.fixture
def fmap(model, image):
    with no_grad():
        return model.encode(image)


@pytest.fixture
def enum_model():
    return VlamdModel(enumeration_config(0))


def tiny_data_config(root, overrides=None):
    flat = {
        'data.root': str(root),
        'data.n_iv': 8,
        'data.n_oov': 4,
        'data.n_train': 6,
        'data.n_eval_iv': 2,
        'data.n_eval_oov': 2,
        'data.seed': 5,
        'train.batch_size': 4,
        'train.max_steps': 3,
        'train.ckpt_every': 2,
        'train.prefetch': 2,
        'train.lr': 1e-3,
        'train.out_dir': str(root / 'run'),
        'decode.beam_width': 3,
        'decode.n_best': 2,
    }
    flat.update(overrides or {})
    return tiny_config(flat)


@pytest.fixture
def tiny_dataset(tmp_path):
    cfg = tiny_data_config(tmp_path / 'synth')
    train, evals = emit_dataset(cfg.data, workers=2)
    return cfg, train, evals
