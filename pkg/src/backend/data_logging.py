from src.utils.constants import TRAIN_LOG_FILE
from src.utils.errors import DataError
from src.utils.logger import logger
from dataclasses import dataclass, fields
from typing import List
from pathlib import Path
import threading
import csv

LOSS_FIELDS = ['ce_vlad_l2r', 'ce_vlad_r2l', 'ce_transd_l2r', 'ce_transd_r2l', 'kl_vlad', 'kl_transd', 'total']


@dataclass
class LossRecord:
    step: int
    lr: float
    ce_vlad_l2r: float
    ce_vlad_r2l: float
    ce_transd_l2r: float
    ce_transd_r2l: float
    kl_vlad: float
    kl_transd: float
    total: float


class TrainingLogWriter:
    """
    Writes one tab-separated row per optimizer step for post-run analysis.
    """
    def __init__(self, log_dir: Path):
        self.log_file_path = Path(log_dir) / TRAIN_LOG_FILE
        self._is_logging = False
        self._lock = threading.Lock()
        self._file = None
        self._csv_writer = None

    @property
    def is_logging(self) -> bool:
        return self._is_logging

    def start_logging(self, append: bool = False) -> None:
        """
        Opens the log. With append (resumed runs) an existing header is kept.
        """
        with self._lock:
            if self._is_logging:
                logger.log_event("Training log is already open.", "WARNING")
                return

            try:
                self.log_file_path.parent.mkdir(parents=True, exist_ok=True)
                keep_header = append and self.log_file_path.exists() and self.log_file_path.stat().st_size > 0
                self._file = open(self.log_file_path, mode='a' if append else 'w', newline='', encoding='utf-8')
                self._csv_writer = csv.DictWriter(
                    self._file,
                    fieldnames=[f.name for f in fields(LossRecord)],
                    delimiter='\t',
                    lineterminator='\n',
                )
                if not keep_header:
                    self._csv_writer.writeheader()
                self._is_logging = True
                logger.log_event(f"Started training log at {self.log_file_path}", "INFO")
            except OSError as e:
                logger.log_event(f"Failed to open training log: {str(e)}", "ERROR")
                raise DataError(f"Cannot write training log {self.log_file_path}: {e}")

    def stop_logging(self) -> None:
        with self._lock:
            if not self._is_logging:
                return
            if self._file:
                self._file.close()
            self._file = None
            self._csv_writer = None
            self._is_logging = False
            logger.log_event("Closed training log.", "INFO")

    def log_step(self, step: int, lr: float, report) -> None:
        """
        Appends the loss components of one step.

        :param report: LossReport of the step.
        """
        if not self._is_logging:
            return

        row = {'step': step, 'lr': repr(float(lr))}
        row.update({name: repr(float(value)) for name, value in report.to_dict().items()})
        with self._lock:
            self._csv_writer.writerow(row)
            self._file.flush()

    def __enter__(self) -> 'TrainingLogWriter':
        self.start_logging()
        return self

    def __exit__(self, *exc) -> None:
        self.stop_logging()


def read_training_log(path: Path) -> List[LossRecord]:
    """
    Loads a training log back into records.

    :raises DataError: If the file is missing or a row is malformed.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Training log {path} does not exist")

    records = []
    with open(path, mode='r', newline='', encoding='utf-8') as fh:
        reader = csv.DictReader(fh, delimiter='\t')
        for line_no, row in enumerate(reader, start=2):
            try:
                records.append(LossRecord(
                    step=int(row['step']),
                    lr=float(row['lr']),
                    **{name: float(row[name]) for name in LOSS_FIELDS},
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{line_no}: malformed training log row ({e})")
    logger.log_event(f"Loaded {len(records)} training records from {path}", "INFO")
    return records

