from src.data.manifest import DatasetManifest, load_image
from src.data.synth import worker_count
from src.decoding.mutual import recognize
from src.model.recognizer import VlamdModel
from src.utils.config import DecodeConfig
from src.utils.constants import TAG_IV, TAG_OOV
from src.utils.errors import DataError
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional
from src.utils.logger import logger
from pathlib import Path
import csv


@dataclass(frozen=True)
class SampleRecord:
    index: int
    path: str
    gt: str
    pred: str
    tag: str

    @property
    def correct(self) -> bool:
        return self.pred == self.gt


@dataclass
class EvalReport:
    """
    Correctly-recognized-word rates overall and per IV/OOV bucket, with the
    underlying integer counts.
    """
    records: List[SampleRecord] = field(default_factory=list)

    def _count(self, tag: Optional[str] = None, correct: bool = False) -> int:
        return sum(1 for r in self.records if (tag is None or r.tag == tag) and (not correct or r.correct))

    @property
    def n_total(self) -> int:
        return len(self.records)

    @property
    def n_iv(self) -> int:
        return self._count(TAG_IV)

    @property
    def n_oov(self) -> int:
        return self._count(TAG_OOV)

    @property
    def correct_total(self) -> int:
        return self._count(correct=True)

    @property
    def correct_iv(self) -> int:
        return self._count(TAG_IV, correct=True)

    @property
    def correct_oov(self) -> int:
        return self._count(TAG_OOV, correct=True)

    @staticmethod
    def _rate(correct: int, n: int) -> float:
        return correct / n if n else 0.0

    @property
    def crw_total(self) -> float:
        return self._rate(self.correct_total, self.n_total)

    @property
    def crw_iv(self) -> float:
        return self._rate(self.correct_iv, self.n_iv)

    @property
    def crw_oov(self) -> float:
        return self._rate(self.correct_oov, self.n_oov)

    def summary(self) -> str:
        return (f"CRW total {100 * self.crw_total:.2f}% ({self.correct_total}/{self.n_total}), "
                f"IV {100 * self.crw_iv:.2f}% ({self.correct_iv}/{self.n_iv}), "
                f"OOV {100 * self.crw_oov:.2f}% ({self.correct_oov}/{self.n_oov})")

    def write_tsv(self, path: Path) -> None:
        """
        Per-sample rows followed by one summary row per bucket.
        """
        try:
            with open(path, 'w', newline='', encoding='utf-8') as fh:
                writer = csv.writer(fh, delimiter='\t', lineterminator='\n', quoting=csv.QUOTE_NONE, escapechar='\\')
                writer.writerow(['index', 'path', 'gt', 'pred', 'correct', 'tag'])
                for r in self.records:
                    writer.writerow([r.index, r.path, r.gt, r.pred, int(r.correct), r.tag])
                for name, correct, n in (('total', self.correct_total, self.n_total),
                                         ('IV', self.correct_iv, self.n_iv),
                                         ('OOV', self.correct_oov, self.n_oov)):
                    writer.writerow([f"# crw_{name}", correct, n, repr(self._rate(correct, n)), '', ''])
        except OSError as e:
            raise DataError(f"Cannot write report {path}: {e}")


def evaluate(model: VlamdModel, manifest: DatasetManifest, cfg: DecodeConfig,
             workers: Optional[int] = None) -> EvalReport:
    """
    Recognizes every sample with a worker pool and compares full strings
    (case-sensitive). Records come back in sample order whatever the pool does.
    """
    size = model.config.backbone.input_hw

    def run(index: int) -> SampleRecord:
        sample = manifest.samples[index]
        image = load_image(manifest.image_path(index), size=size)
        return SampleRecord(index, sample.path, sample.transcript, recognize(image, model, cfg), sample.tag)

    n_workers = worker_count(workers)
    logger.log_event(f"Evaluating {len(manifest)} samples with {n_workers} workers")
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        records = list(pool.map(run, range(len(manifest))))
    report = EvalReport(sorted(records, key=lambda r: r.index))
    logger.log_event(report.summary())
    return report
