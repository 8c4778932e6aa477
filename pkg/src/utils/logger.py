from src.utils.constants import EVENT_LOG_FILE, LOG_FORMAT, LOG_LEVEL
from typing import Any, Dict, Optional
from pathlib import Path
import logging


class Logger:
    def __init__(self):
        self.training_logger = self._setup_logger('vlamd.training')
        self.event_logger = self._setup_logger('vlamd.event')
        self._file_handler: Optional[logging.Handler] = None

    def _setup_logger(self, name: str) -> logging.Logger:
        logger = logging.getLogger(name)
        logger.setLevel(LOG_LEVEL)
        return logger

    def log_train_step(self, record: Dict[str, Any]) -> None:
        """
        Logs the loss components of one optimizer step.

        :param record: Mapping of loss names to values, including 'step' and 'lr'
        """
        parts = [f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}"
                 for key, value in record.items()]
        self.training_logger.info(' '.join(parts))

    def log_event(self, event: str, level: str = 'INFO') -> None:
        """
        Logs significant system events or errors.

        :param event: Description of the event
        :param level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        """
        log_method = getattr(self.event_logger, level.lower())
        log_method(event)

    def configure_logging(self, log_dir: Optional[Path] = None) -> None:
        """
        Adds a file handler under log_dir for both channels. Console output is
        left to the root logger configured by the entry point.
        """
        if log_dir is None:
            return
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)

        if self._file_handler is not None:
            self.training_logger.removeHandler(self._file_handler)
            self.event_logger.removeHandler(self._file_handler)
            self._file_handler.close()

        file_handler = logging.FileHandler(log_dir / EVENT_LOG_FILE)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self.training_logger.addHandler(file_handler)
        self.event_logger.addHandler(file_handler)
        self._file_handler = file_handler

        self.log_event(f"Logging to {log_dir / EVENT_LOG_FILE}")


# Global logger instance
logger = Logger()
