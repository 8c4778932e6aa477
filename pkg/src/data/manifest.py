from src.data.charset import Charset
from src.utils.constants import DATASET_META, TAG_IV, TAG_OOV
from src.utils.errors import DataError
from dataclasses import dataclass, field
from typing import List, Optional, Tuple
from src.utils.logger import logger
from pathlib import Path
from PIL import Image
import numpy as np
import yaml
import csv


@dataclass(frozen=True)
class Sample:
    path: str
    transcript: str
    tag: str


@dataclass
class DatasetManifest:
    """
    Word-image samples with transcripts and IV/OOV tags. Image paths are
    relative to root, the directory holding the manifest file.
    """
    samples: List[Sample]
    charset: str
    seed: int
    image_hw: Tuple[int, int]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def image_path(self, index: int) -> Path:
        return self.root / self.samples[index].path

    def load_image(self, index: int) -> np.ndarray:
        return load_image(self.image_path(index))

    def load_images(self) -> np.ndarray:
        """
        All images as an (n, 3, H, W) float64 array.
        """
        if not self.samples:
            return np.zeros((0, 3) + tuple(self.image_hw))
        return np.stack([self.load_image(i) for i in range(len(self))])


def save_image(image: np.ndarray, path: Path) -> None:
    """
    Writes a 3 x H x W image in [0, 1] as an 8-bit RGB PNG.

    :raises DataError: On write failure.
    """
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(pixels).save(path, format='PNG')
    except OSError as e:
        logger.log_event(f"Failed to write image {path}: {e}", "ERROR")
        raise DataError(f"Cannot write image {path}: {e}")


def load_image(path: Path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Reads an image file as a 3 x H x W float64 array in [0, 1].

    :param size: Optional (H, W) to resize to.
    :raises DataError: If the file cannot be read.
    """
    try:
        with Image.open(path) as img:
            img = img.convert('RGB')
            if size is not None and img.size != (size[1], size[0]):
                img = img.resize((size[1], size[0]), resample=Image.Resampling.BILINEAR)
            pixels = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        logger.log_event(f"Failed to read image {path}: {e}", "ERROR")
        raise DataError(f"Cannot read image {path}: {e}")
    return pixels.transpose(2, 0, 1).copy()


def write_manifest(path: Path, samples: List[Sample]) -> None:
    try:
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, delimiter='\t', lineterminator='\n', quoting=csv.QUOTE_NONE)
            for sample in samples:
                writer.writerow([sample.path, sample.transcript, sample.tag])
    except OSError as e:
        raise DataError(f"Cannot write manifest {path}: {e}")


def write_dataset_meta(root: Path, cfg, n_iv: int, n_oov: int) -> None:
    meta = {
        'charset': cfg.charset,
        'seed': cfg.seed,
        'image_h': cfg.image_h,
        'image_w': cfg.image_w,
        'n_iv': n_iv,
        'n_oov': n_oov,
    }
    try:
        with open(Path(root) / DATASET_META, 'w', encoding='utf-8') as fh:
            yaml.safe_dump(meta, fh, sort_keys=True)
    except OSError as e:
        raise DataError(f"Cannot write {Path(root) / DATASET_META}: {e}")


def load_manifest(path: Path, charset: Optional[Charset] = None, filter_unknown: bool = False,
                  image_hw: Optional[Tuple[int, int]] = None) -> DatasetManifest:
    """
    Reads a `relative_path<TAB>transcript<TAB>IV|OOV` manifest. Charset, seed
    and image size come from the dataset.yaml sidecar when present.

    :param charset: Charset to validate transcripts against; defaults to the sidecar's.
    :param filter_unknown: Drop samples with characters outside the charset
        instead of raising.
    :raises DataError: On missing files or malformed lines, naming path and line.
    """
    path = Path(path)
    root = path.parent
    meta = {}
    meta_path = root / DATASET_META
    if meta_path.exists():
        try:
            with open(meta_path, 'r', encoding='utf-8') as fh:
                meta = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as e:
            raise DataError(f"Cannot read {meta_path}: {e}")

    if charset is None:
        if 'charset' not in meta:
            raise DataError(f"No charset given and {meta_path} is missing")
        charset = Charset(str(meta['charset']))
    if image_hw is None:
        image_hw = (int(meta.get('image_h', 32)), int(meta.get('image_w', 100)))

    samples, dropped = [], 0
    try:
        with open(path, 'r', newline='', encoding='utf-8') as fh:
            reader = csv.reader(fh, delimiter='\t', quoting=csv.QUOTE_NONE)
            for line_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != 3 or row[2] not in (TAG_IV, TAG_OOV) or not row[1]:
                    raise DataError(f"{path}:{line_no}: expected 'path<TAB>transcript<TAB>IV|OOV'")
                if not charset.covers(row[1]):
                    if filter_unknown:
                        dropped += 1
                        continue
                    raise DataError(f"{path}:{line_no}: transcript {row[1]!r} has characters outside the charset")
                samples.append(Sample(row[0], row[1], row[2]))
    except OSError as e:
        raise DataError(f"Cannot read manifest {path}: {e}")

    if dropped:
        logger.log_event(f"Dropped {dropped} samples of {path} with characters outside the charset", "WARNING")
    return DatasetManifest(samples, charset.chars, int(meta.get('seed', 0)), tuple(image_hw), root)
