from src.backend.checkpoint import Checkpoint, save_checkpoint
from src.backend.data_logging import TrainingLogWriter
from src.data.manifest import DatasetManifest
from src.model.recognizer import VlamdModel
from src.training.losses import LossReport, TargetPair, collate, make_target_pair, total_loss
from src.training.optimizer import Adam
from src.utils.config import Config, dump_config
from src.utils.constants import TRAIN_LOG_EVERY
from src.utils.errors import DataError, NumericError
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional
from src.utils.logger import logger
from pathlib import Path
import numpy as np
import threading
import queue


@dataclass
class TrainingBatch:
    step: int
    indices: np.ndarray
    images: np.ndarray
    pair: TargetPair


def _first_non_finite(named: Dict[str, Optional[np.ndarray]]) -> Optional[str]:
    for name, value in named.items():
        if value is not None and not np.all(np.isfinite(value)):
            return name
    return None


def train_step(batch: TrainingBatch, model: VlamdModel, optimizer: Adam, cfg: Config) -> LossReport:
    """
    One teacher-forced forward over all heads, one backward, one Adam update.

    :raises NumericError: Naming the first head output, loss term or gradient
        that is not finite. Parameters are left untouched in that case.
    """
    optimizer.zero_grad()
    images = batch.images.astype(model.dtype, copy=False)
    heads = model.forward_teacher_forced(images, batch.pair.s_l2r, batch.pair.s_r2l)
    total, report = total_loss(*heads, batch.pair, cfg.train.lambda_)

    outputs = {f"{field} output": None if t is None else t.data for field, t in heads._asdict().items()}
    losses = {name: np.asarray(value) for name, value in report.to_dict().items()}
    bad = _first_non_finite({**outputs, **losses})
    if bad is not None:
        logger.log_event(f"Non-finite value in {bad} at step {batch.step}", "ERROR")
        raise NumericError(f"Step {batch.step}: {bad} is not finite")

    total.backward()
    bad = _first_non_finite({f"grad of {name}": p.grad for name, p in optimizer.params.items()})
    if bad is not None:
        logger.log_event(f"Non-finite {bad} at step {batch.step}", "ERROR")
        raise NumericError(f"Step {batch.step}: {bad} is not finite")

    optimizer.step()
    return report


class BatchPrefetcher:
    """
    Builds batches ahead of the optimizer on a background thread. Batch
    contents depend only on the step index, so prefetch depth never changes
    the stream.
    """

    _DONE = object()

    def __init__(self, make_batch: Callable[[int], TrainingBatch], start: int, stop: int, depth: int):
        self._make_batch = make_batch
        self._start = start
        self._stop = stop
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._halt = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._prefetch_loop, daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._halt.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _prefetch_loop(self) -> None:
        try:
            for step in range(self._start, self._stop):
                if not self._put(self._make_batch(step)):
                    return
            self._put(self._DONE)
        except Exception as e:
            logger.log_event(f"Error while preparing batches: {str(e)}", "ERROR")
            self._put(e)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def stop(self) -> None:
        self._halt.set()
        if self._thread and self._thread.is_alive():
            self._thread.join()
        self._thread = None


class Trainer:
    """
    Runs the optimizer for train.max_steps steps over a fixed, seed-determined
    batch order, writing the training log and periodic checkpoints to out_dir.

    :param validate: Called with the model after the last step; its result is
        logged and returned by run().
    """

    def __init__(self, cfg: Config, model: VlamdModel, train_set: DatasetManifest,
                 out_dir: Optional[Path] = None, validate: Optional[Callable[[VlamdModel], Any]] = None):
        if len(train_set) == 0:
            raise DataError("Training set is empty")
        self.cfg = cfg
        self.model = model
        self.out_dir = Path(out_dir if out_dir is not None else cfg.train.out_dir)
        self.validate = validate
        self.images = train_set.load_images().astype(model.dtype)
        self.pairs = [make_target_pair(model.charset.encode(s.transcript)) for s in train_set.samples]
        self.optimizer = Adam.from_config(dict(model.named_parameters()), cfg.train)
        self.step = 0
        self.batch_size = min(cfg.train.batch_size, len(self.pairs))
        if self.batch_size < cfg.train.batch_size:
            logger.log_event(f"Batch size reduced to {self.batch_size}, the training set size", "WARNING")
        self._orders: Dict[int, np.ndarray] = {}
        self._order_lock = threading.Lock()
        self.last_validation: Any = None

    def _epoch_order(self, epoch: int) -> np.ndarray:
        with self._order_lock:
            order = self._orders.get(epoch)
            if order is None:
                order = np.random.default_rng([self.cfg.train.seed, epoch]).permutation(len(self.pairs))
                self._orders[epoch] = order
                # a batch spans at most two epochs
                while len(self._orders) > 2:
                    del self._orders[next(iter(self._orders))]
            return order

    def batch_indices(self, step: int) -> np.ndarray:
        """
        Sample indices of batch `step`: consecutive slices of per-epoch
        permutations seeded by (train.seed, epoch).
        """
        n = len(self.pairs)
        positions = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        return np.array([self._epoch_order(p // n)[p % n] for p in positions], dtype=np.int64)

    def make_batch(self, step: int) -> TrainingBatch:
        indices = self.batch_indices(step)
        return TrainingBatch(step, indices, self.images[indices], collate([self.pairs[i] for i in indices]))

    def resume(self, ckpt: Checkpoint) -> None:
        self.model.load_state_dict(ckpt.tensors)
        if ckpt.optimizer:
            self.optimizer.load_state_dict(ckpt.optimizer, ckpt.optimizer_step)
        else:
            self.optimizer.step_count = ckpt.step
        self.step = ckpt.step
        logger.log_event(f"Resuming from step {ckpt.step}")

    def checkpoint_path(self, step: int) -> Path:
        return self.out_dir / f"ckpt_{step:06d}"

    def save(self) -> Path:
        path = self.checkpoint_path(self.step)
        save_checkpoint(path, self.model, self.cfg, self.step, self.optimizer)
        return path

    def run(self) -> Path:
        """
        :return: Directory of the final checkpoint.
        """
        train_cfg = self.cfg.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, self.out_dir / 'config.yaml')
        writer = TrainingLogWriter(self.out_dir)
        writer.start_logging(append=self.step > 0)
        prefetcher = BatchPrefetcher(self.make_batch, self.step, train_cfg.max_steps, train_cfg.prefetch)
        logger.log_event(f"Training steps {self.step}..{train_cfg.max_steps} with batch {self.batch_size}")
        final = None
        try:
            prefetcher.start()
            for batch in prefetcher:
                lr = self.optimizer.current_lr
                report = train_step(batch, self.model, self.optimizer, self.cfg)
                self.step = batch.step + 1
                writer.log_step(self.step, lr, report)
                if self.step == 1 or self.step % TRAIN_LOG_EVERY == 0 or self.step == train_cfg.max_steps:
                    logger.log_train_step({'step': self.step, 'lr': lr, **report.to_dict()})
                if train_cfg.ckpt_every > 0 and self.step % train_cfg.ckpt_every == 0:
                    final = self.save()
        finally:
            prefetcher.stop()
            writer.stop_logging()

        if final is None or final != self.checkpoint_path(self.step):
            final = self.save()
        if self.validate is not None:
            self.last_validation = self.validate(self.model)
            logger.log_event(f"Validation after step {self.step}: {self.last_validation}")
        return final
