"""
Synthetic word images: disjoint IV/OOV lexicons rendered with the built-in
bitmap font, written as PNG files plus tab-separated manifests.
"""
from src.data.charset import Charset
from src.data.font import GLYPH_H, GLYPH_W, glyph, scaled_glyph
from src.data.manifest import DatasetManifest, Sample, save_image, write_dataset_meta, write_manifest
from src.utils.config import DataConfig
from src.utils.constants import EVAL_MANIFEST, TAG_IV, TAG_OOV, TRAIN_MANIFEST, WORKERS_ENV_VAR
from src.utils.errors import CapacityError, DataError, LayoutError
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple
from src.utils.logger import logger
from pathlib import Path
import numpy as np
import os

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass(frozen=True)
class RenderSpec:
    """
    Glyphs are 5x7 masks scaled by (scale_x, scale_y). Per character the
    vertical scale shrinks by up to scale_jitter, the baseline moves by up to
    shift_jitter pixels and the gap grows by up to spacing_jitter pixels.
    """
    height: int = 32
    width: int = 100
    scale_x: int = 2
    scale_y: int = 3
    spacing: int = 2
    scale_jitter: int = 1
    shift_jitter: int = 2
    spacing_jitter: int = 1
    noise_std: float = 0.03
    fg_range: Tuple[float, float] = (0.0, 0.3)
    bg_range: Tuple[float, float] = (0.7, 1.0)

    @classmethod
    def from_config(cls, cfg: DataConfig) -> 'RenderSpec':
        """
        Uses the default glyph scale where it fits and shrinks it for small canvases.
        """
        scale_y = max(1, min(cls.scale_y, (cfg.image_h - 2 * cfg.shift_jitter) // GLYPH_H))
        spec = cls(height=cfg.image_h, width=cfg.image_w, scale_y=scale_y, noise_std=cfg.noise_std,
                   shift_jitter=cfg.shift_jitter, scale_jitter=cfg.scale_jitter, spacing_jitter=cfg.spacing_jitter)
        if spec.max_word_width(cfg.max_len) > spec.width:
            spec = cls(height=cfg.image_h, width=cfg.image_w, scale_x=1, scale_y=scale_y, spacing=1,
                       noise_std=cfg.noise_std, shift_jitter=cfg.shift_jitter, scale_jitter=cfg.scale_jitter,
                       spacing_jitter=cfg.spacing_jitter)
        return spec

    def max_word_width(self, length: int) -> int:
        return length * GLYPH_W * self.scale_x + max(length - 1, 0) * (self.spacing + self.spacing_jitter)


def render_word(word: str, spec: RenderSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Renders word as a 3 x H x W float64 image with values in [0, 1].

    :raises LayoutError: If the word cannot fit the canvas under the worst-case jitter.
    """
    if not word:
        raise LayoutError("Cannot render an empty word")
    if spec.max_word_width(len(word)) > spec.width:
        raise LayoutError(f"Word {word!r} does not fit {spec.width} pixels")
    if GLYPH_H * spec.scale_y + 2 * spec.shift_jitter > spec.height:
        raise LayoutError(f"Glyph height does not fit {spec.height} pixels")
    for ch in word:
        glyph(ch)

    bg = rng.uniform(*spec.bg_range)
    fg = rng.uniform(*spec.fg_range)
    scales = spec.scale_y - rng.integers(0, spec.scale_jitter + 1, size=len(word))
    scales = np.maximum(scales, 1)
    shifts = rng.integers(-spec.shift_jitter, spec.shift_jitter + 1, size=len(word))
    gaps = spec.spacing + rng.integers(0, spec.spacing_jitter + 1, size=max(len(word) - 1, 0))

    total = len(word) * GLYPH_W * spec.scale_x + int(gaps.sum())
    slack = spec.width - total
    offset = int(rng.integers(-spec.shift_jitter, spec.shift_jitter + 1))
    x = int(np.clip(slack // 2 + offset, 0, slack))

    canvas = np.full((spec.height, spec.width), bg, dtype=np.float64)
    for i, ch in enumerate(word):
        mask = scaled_glyph(ch, spec.scale_x, int(scales[i]))
        gh, gw = mask.shape
        y = (spec.height - gh) // 2 + int(shifts[i])
        region = canvas[y:y + gh, x:x + gw]
        region[mask] = fg
        x += gw + (int(gaps[i]) if i < len(gaps) else 0)

    if spec.noise_std > 0:
        canvas = canvas + rng.normal(0.0, spec.noise_std, size=canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)
    return np.repeat(canvas[None, :, :], 3, axis=0)


def _lexicon_capacity(n_chars: int, len_range: Tuple[int, int]) -> int:
    lo, hi = len_range
    return sum(n_chars ** length for length in range(lo, hi + 1))


def build_lexicons(charset: Charset, n_iv: int, n_oov: int, len_range: Tuple[int, int],
                   seed: int) -> Tuple[List[str], List[str]]:
    """
    Draws two disjoint word lists. Each nonempty list starts with words that
    together cover every character of the charset.

    :raises CapacityError: If the counts cannot be met.
    """
    lo, hi = len_range
    chars = charset.chars
    if lo < 1 or hi < lo:
        raise CapacityError(f"Invalid word length range {len_range}")
    if n_iv < 0 or n_oov < 0:
        raise CapacityError("Lexicon sizes must be non-negative")
    if n_iv + n_oov > _lexicon_capacity(len(chars), len_range):
        raise CapacityError(f"{n_iv + n_oov} unique words requested, only "
                            f"{_lexicon_capacity(len(chars), len_range)} exist")
    cover = -(-len(chars) // hi)
    for name, n in (('IV', n_iv), ('OOV', n_oov)):
        if 0 < n < cover:
            raise CapacityError(f"{name} lexicon of {n} words cannot cover {len(chars)} characters")

    rng = np.random.default_rng(seed)
    used = set()
    max_attempts = 1000 * (n_iv + n_oov) + 1000

    def random_word() -> str:
        length = int(rng.integers(lo, hi + 1))
        return ''.join(chars[i] for i in rng.integers(0, len(chars), size=length))

    def make_list(n: int) -> List[str]:
        if n == 0:
            return []
        words = []
        pending = [chars[i] for i in rng.permutation(len(chars))]
        while pending:
            chunk, pending = pending[:hi], pending[hi:]
            while len(chunk) < lo:
                chunk.append(chars[int(rng.integers(0, len(chars)))])
            word = ''.join(chunk)
            for _ in range(100):
                if word not in used:
                    break
                word = ''.join(chunk[i] for i in rng.permutation(len(chunk)))
            else:
                raise CapacityError("Could not place a character-covering word")
            used.add(word)
            words.append(word)
        attempts = 0
        while len(words) < n:
            attempts += 1
            if attempts > max_attempts:
                raise CapacityError(f"Gave up drawing unique words after {max_attempts} attempts")
            word = random_word()
            if word not in used:
                used.add(word)
                words.append(word)
        return words

    iv_words = make_list(n_iv)
    oov_words = make_list(n_oov)
    return iv_words, oov_words


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def worker_count(requested: Optional[int] = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV_VAR, '1')))
    except ValueError:
        logger.log_event(f"Ignoring non-integer {WORKERS_ENV_VAR}", "WARNING")
        return 1


def emit_dataset(cfg: DataConfig, root: Optional[Path] = None,
                 workers: Optional[int] = None) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Renders the train split (IV words only) and the eval split (IV then OOV
    words) under root, with train.tsv, eval.tsv and dataset.yaml.

    :return: (train manifest, eval manifest)
    :raises DataError: On write failures, naming the path.
    """
    root = Path(root if root is not None else cfg.root)
    charset = Charset(cfg.charset)
    spec = RenderSpec.from_config(cfg)
    if spec.max_word_width(cfg.max_len) > spec.width:
        raise LayoutError(f"Words of {cfg.max_len} characters do not fit {spec.width} pixels")
    iv_words, oov_words = build_lexicons(charset, cfg.n_iv, cfg.n_oov, (cfg.min_len, cfg.max_len), cfg.seed)
    if cfg.n_train > 0 and not iv_words:
        raise CapacityError("Training split needs IV words")
    if cfg.n_eval_oov > 0 and not oov_words:
        raise CapacityError("Eval split asks for OOV samples but data.n_oov is 0")

    if cfg.n_eval_iv > 0 and cfg.n_train == 0:
        raise CapacityError("Eval split asks for IV samples but data.n_train is 0")

    train = [Sample(f"train/{i:06d}.png", iv_words[i % len(iv_words)], TAG_IV) for i in range(cfg.n_train)]
    trained = iv_words[:min(cfg.n_train, len(iv_words))]
    unseen = sorted(set(charset.chars) - set(''.join(trained)))
    if trained and unseen:
        raise CapacityError(f"data.n_train={cfg.n_train} leaves characters {unseen} out of training")
    evals = [Sample(f"eval/{i:06d}.png", trained[i % len(trained)], TAG_IV) for i in range(cfg.n_eval_iv)]
    evals += [Sample(f"eval/{cfg.n_eval_iv + i:06d}.png", oov_words[i % len(oov_words)], TAG_OOV)
              for i in range(cfg.n_eval_oov)]

    train_words = {s.transcript for s in train}
    leaked = {s.transcript for s in evals if s.tag == TAG_OOV} & train_words
    if leaked:
        raise DataError(f"OOV eval words appear in training: {sorted(leaked)[:5]}")
    untrained = {s.transcript for s in evals if s.tag == TAG_IV} - train_words
    if untrained:
        raise DataError(f"IV eval words missing from training: {sorted(untrained)[:5]}")

    try:
        for sub in ('train', 'eval'):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create dataset directory under {root}: {e}")

    jobs = [(s, TRAIN_STREAM, i) for i, s in enumerate(train)] + [(s, EVAL_STREAM, i) for i, s in enumerate(evals)]

    def render_job(job) -> None:
        sample, stream, index = job
        image = render_word(sample.transcript, spec, sample_rng(cfg.seed, stream, index))
        save_image(image, root / sample.path)

    n_workers = worker_count(workers)
    logger.log_event(f"Rendering {len(jobs)} images to {root} with {n_workers} workers")
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(render_job, jobs))

    write_manifest(root / TRAIN_MANIFEST, train)
    write_manifest(root / EVAL_MANIFEST, evals)
    write_dataset_meta(root, cfg, len(iv_words), len(oov_words))
    hw = (cfg.image_h, cfg.image_w)
    return (DatasetManifest(train, charset.chars, cfg.seed, hw, root),
            DatasetManifest(evals, charset.chars, cfg.seed, hw, root))
