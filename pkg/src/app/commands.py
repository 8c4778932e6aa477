"""
Implementations of the command-line subcommands. Each returns its result so
tests can call them directly; main.py handles printing and exit codes.
"""
from src.app.evaluation import EvalReport, evaluate
from src.app.selfcheck import SELFCHECK_MODELS, SelfCheckReport, run_selfcheck
from src.backend.checkpoint import load_checkpoint, restore_model
from src.data.charset import Charset
from src.data.manifest import DatasetManifest, load_image, load_manifest
from src.data.synth import emit_dataset
from src.decoding.mutual import DecodeReport, recognize_with_candidates
from src.model.recognizer import VlamdModel
from src.training.trainer import Trainer
from src.utils.config import load_config
from src.utils.constants import EVAL_MANIFEST, TRAIN_MANIFEST
from dataclasses import replace
from typing import Optional, Tuple
from src.utils.logger import logger
from pathlib import Path


def cmd_gen_data(config_path: Optional[str]) -> Tuple[DatasetManifest, DatasetManifest]:
    cfg = load_config(config_path)
    train, evals = emit_dataset(cfg.data)
    logger.log_event(f"Wrote {len(train)} train and {len(evals)} eval samples to {cfg.data.root}")
    return train, evals


def cmd_train(config_path: Optional[str], resume: Optional[str] = None) -> Path:
    """
    Trains to train.max_steps, writing checkpoints and train_log.tsv to
    train.out_dir, then evaluates on the validation manifest if it exists.

    :return: Directory of the final checkpoint.
    """
    cfg = load_config(config_path)
    out_dir = Path(cfg.train.out_dir)
    logger.configure_logging(out_dir)
    charset = Charset(cfg.data.charset)
    train_path = Path(cfg.train.data or Path(cfg.data.root) / TRAIN_MANIFEST)
    val_path = Path(cfg.train.val_data or Path(cfg.data.root) / EVAL_MANIFEST)
    train_set = load_manifest(train_path, charset, filter_unknown=cfg.data.filter_unknown_chars)

    validate = None
    if val_path.exists():
        val_set = load_manifest(val_path, charset, filter_unknown=cfg.data.filter_unknown_chars)

        def validate(model: VlamdModel) -> str:
            return evaluate(model, val_set, cfg.decode, cfg.eval.workers).summary()
    else:
        logger.log_event(f"No validation manifest at {val_path}; skipping final evaluation", "WARNING")

    model = VlamdModel(cfg, charset)
    trainer = Trainer(cfg, model, train_set, out_dir, validate)
    if resume is not None:
        trainer.resume(load_checkpoint(resume))
    return trainer.run()


def cmd_eval(ckpt_path: str, data_path: str, report_path: Optional[str] = None) -> EvalReport:
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    manifest = load_manifest(Path(data_path), model.charset)
    report = evaluate(model, manifest, ckpt.config.decode, ckpt.config.eval.workers)
    if report_path is not None:
        report.write_tsv(Path(report_path))
        logger.log_event(f"Wrote evaluation report to {report_path}")
    return report


def cmd_decode(ckpt_path: str, image_path: str, nbest: Optional[int] = None) -> Tuple[str, Optional[DecodeReport]]:
    """
    :param nbest: Overrides decode.n_best (beam width grows to match if needed).
    :return: (transcript, candidate report when mutual decoding is on)
    """
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    cfg = ckpt.config.decode
    if nbest is not None:
        cfg = replace(cfg, n_best=nbest, beam_width=max(cfg.beam_width, nbest))
    image = load_image(Path(image_path), size=ckpt.config.backbone.input_hw)
    return recognize_with_candidates(image, model, cfg)


def cmd_selfcheck(n_models: int = SELFCHECK_MODELS) -> SelfCheckReport:
    return run_selfcheck(n_models)
