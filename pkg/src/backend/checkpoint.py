"""
Checkpoint directories: manifest.yaml (config snapshot, charset, step, seed,
tensor directory, blob hash) next to tensors.bin, the little-endian
concatenation of every tensor in directory order.
"""
from src.utils.constants import CKPT_BLOB, CKPT_MANIFEST
from src.model.recognizer import VlamdModel
from src.data.charset import Charset
from src.utils.errors import CheckpointError
from src.utils.config import Config
from dataclasses import dataclass, field
from typing import Dict, Union
from src.utils.logger import logger
from pathlib import Path
import numpy as np
import hashlib
import yaml

FORMAT = 'vlamd-checkpoint/1'
OPTIM_PREFIX = 'optim.'


@dataclass
class Checkpoint:
    config: Config
    charset: str
    step: int
    seed: int
    tensors: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder('<'))


def save_checkpoint(path: Union[str, Path], model, cfg: Config, step: int, optimizer=None) -> str:
    """
    Writes model parameters (and Adam moments when given) to the directory path.

    :return: The checkpoint digest.
    :raises CheckpointError: On write failure.
    """
    path = Path(path)
    entries = list(model.named_parameters())
    if optimizer is not None:
        entries += [(f"{OPTIM_PREFIX}{name}", value) for name, value in optimizer.state_dict().items()]
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("Duplicate tensor names in checkpoint")

    directory, chunks, offset = [], [], 0
    for name, value in entries:
        arr = _little_endian(value if isinstance(value, np.ndarray) else value.data)
        raw = arr.tobytes()
        directory.append({'name': name, 'shape': list(arr.shape), 'dtype': arr.dtype.str, 'offset': offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b''.join(chunks)

    manifest = {
        'format': FORMAT,
        'step': int(step),
        'seed': int(cfg.model.seed),
        'charset': cfg.data.charset,
        'optimizer_step': int(optimizer.step_count) if optimizer is not None else 0,
        'config': cfg.to_flat(),
        'tensors': directory,
        'blob_sha256': hashlib.sha256(blob).hexdigest(),
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / CKPT_BLOB).write_bytes(blob)
        with open(path / CKPT_MANIFEST, 'w', encoding='utf-8', newline='\n') as fh:
            yaml.safe_dump(manifest, fh, sort_keys=True, default_flow_style=False)
    except OSError as e:
        logger.log_event(f"Failed to write checkpoint {path}: {e}", "ERROR")
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    digest = checkpoint_digest(path)
    logger.log_event(f"Saved checkpoint {path} (step {step}, {digest[:12]})")
    return digest


def checkpoint_digest(path: Union[str, Path]) -> str:
    """
    sha256 over the manifest and blob bytes.
    """
    path = Path(path)
    h = hashlib.sha256()
    try:
        h.update((path / CKPT_MANIFEST).read_bytes())
        h.update((path / CKPT_BLOB).read_bytes())
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    return h.hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    :raises CheckpointError: On missing files, hash mismatch or a bad directory.
    """
    path = Path(path)
    try:
        with open(path / CKPT_MANIFEST, 'r', encoding='utf-8') as fh:
            manifest = yaml.safe_load(fh)
        blob = (path / CKPT_BLOB).read_bytes()
    except (OSError, yaml.YAMLError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if not isinstance(manifest, dict) or manifest.get('format') != FORMAT:
        raise CheckpointError(f"{path / CKPT_MANIFEST} is not a {FORMAT} manifest")
    if hashlib.sha256(blob).hexdigest() != manifest.get('blob_sha256'):
        raise CheckpointError(f"{path / CKPT_BLOB} does not match the manifest hash")

    tensors, optimizer = {}, {}
    for entry in manifest['tensors']:
        dtype = np.dtype(entry['dtype'])
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry['offset'])
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"Tensor '{entry['name']}' runs past the end of {CKPT_BLOB}")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape).copy()
        name = entry['name']
        if name.startswith(OPTIM_PREFIX):
            optimizer[name[len(OPTIM_PREFIX):]] = arr
        else:
            tensors[name] = arr

    cfg = Config.from_flat(manifest['config'])
    return Checkpoint(cfg, str(manifest['charset']), int(manifest['step']), int(manifest['seed']),
                      tensors, optimizer, int(manifest.get('optimizer_step', 0)))


def restore_model(ckpt: Checkpoint) -> VlamdModel:
    """
    Builds a model from the checkpoint's config and loads its parameters.
    """
    model = VlamdModel(ckpt.config, Charset(ckpt.charset))
    model.load_state_dict(ckpt.tensors)
    return model
