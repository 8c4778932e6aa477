"""
Joint co-beam search over a VLAD and a TransD decoder of the same reading
direction. Every extension is scored by
alpha * log P_vlad(token | prefix) + (1 - alpha) * log P_transd(token | prefix),
with both branches advanced on the shared prefix.
"""
from src.core.tensor import no_grad
from src.model.backbone import FeatureMap
from src.model.recognizer import Direction
from src.model.transd import TransDCache, TransDecoder
from src.model.vlad import VladDecoder, VladState
from src.utils.config import DecodeConfig
from src.utils.constants import EOS_ID, LOG_EPS
from src.utils.errors import AlignmentError, InputError
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import numpy as np


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    logp_joint: float
    logp_vlad: float
    logp_transd: float
    vlad_state: Optional[VladState]
    transd_cache: Optional[TransDCache]
    finished: bool

    @property
    def content(self) -> Tuple[int, ...]:
        return self.tokens[:-1] if self.finished else self.tokens


@dataclass
class NBestList:
    direction: Direction
    entries: List[Hypothesis]


def branch_alpha(cfg: DecodeConfig, transd: Optional[TransDecoder]) -> float:
    return cfg.alpha if transd is not None else 1.0


def joint_score(alpha: float, logp_vlad: float, logp_transd: float) -> float:
    return alpha * logp_vlad + (1.0 - alpha) * logp_transd


def _log_probs(dist: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(dist, LOG_EPS))


def rank_key(score: float, tokens: Tuple[int, ...]):
    """
    Higher scores first; ties go to the lexicographically smaller sequence.
    """
    return -score, tokens


def _rank_score(h: Hypothesis, cfg: DecodeConfig) -> float:
    return h.logp_joint / len(h.tokens) if cfg.length_norm and h.tokens else h.logp_joint


def co_beam_search(fmap: FeatureMap, vlad: VladDecoder, transd: Optional[TransDecoder],
                   cfg: DecodeConfig, direction: Direction) -> NBestList:
    """
    Beam search for one image (batch of 1) in one direction. Finished
    hypotheses are frozen; if fewer than n_best finish within cfg.max_len
    steps the best unfinished ones fill the list.

    :raises InputError: If the feature map is empty or holds more than one image.
    """
    if fmap.length == 0:
        raise InputError("Feature map is empty")
    if fmap.batch != 1:
        raise InputError(f"co_beam_search decodes one image at a time, got a batch of {fmap.batch}")
    alpha = branch_alpha(cfg, transd)

    with no_grad():
        vmem = vlad.prepare(fmap)
        tmem = transd.prepare(fmap) if transd is not None else None
        root = Hypothesis((), 0.0, 0.0, 0.0, vlad.initial_state(vmem),
                          transd.initial_cache() if transd is not None else None, False)
        alive, finished = [root], []
        for _ in range(cfg.max_len):
            candidates = []
            for hyp in alive:
                step = vlad.decode_step(hyp.vlad_state, vmem)
                lv = _log_probs(step.dist.data[0])
                if transd is not None:
                    prev = hyp.tokens[-1] if hyp.tokens else transd.bos_id
                    dist, cache = transd.incremental_step(hyp.transd_cache, [prev], tmem)
                    lt = _log_probs(dist.data[0])
                else:
                    cache, lt = None, np.zeros_like(lv)
                for token in range(len(lv)):
                    sv = hyp.logp_vlad + float(lv[token])
                    st = hyp.logp_transd + float(lt[token])
                    candidates.append((joint_score(alpha, sv, st), hyp.tokens + (token,), sv, st, step.new_state, cache))

            def score_of(c):
                return c[0] / len(c[1]) if cfg.length_norm else c[0]

            candidates.sort(key=lambda c: rank_key(score_of(c), c[1]))
            alive = []
            for joint, tokens, sv, st, state, cache in candidates[:cfg.beam_width]:
                done = tokens[-1] == EOS_ID
                hyp = Hypothesis(tokens, joint, sv, st, None if done else state.with_token(tokens[-1]), cache, done)
                (finished if done else alive).append(hyp)
            if not alive:
                break
            if not cfg.length_norm and len(finished) >= cfg.n_best:
                finished.sort(key=lambda h: rank_key(h.logp_joint, h.tokens))
                if finished[cfg.n_best - 1].logp_joint > max(h.logp_joint for h in alive):
                    break

    finished.sort(key=lambda h: rank_key(_rank_score(h, cfg), h.tokens))
    entries = finished[:cfg.n_best]
    if len(entries) < cfg.n_best:
        alive.sort(key=lambda h: rank_key(_rank_score(h, cfg), h.tokens))
        entries += alive[:cfg.n_best - len(entries)]
    return NBestList(direction, entries)


def branch_scores(tokens: Sequence[int], fmap: FeatureMap, vlad: VladDecoder,
                  transd: Optional[TransDecoder]) -> Tuple[float, float]:
    """
    Teacher-forced sequence log-probabilities (vlad, transd) of tokens.

    :raises AlignmentError: If tokens do not end with EOS.
    :raises LengthError: If tokens exceed the decoders' maximum length.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0 or tokens[-1] != EOS_ID:
        raise AlignmentError("Forced sequences must end with EOS")
    positions = np.arange(tokens.size)
    with no_grad():
        dists = vlad.forced_decode(tokens, vlad.prepare(fmap)).data[0]
        sv = float(_log_probs(dists[positions, tokens]).sum())
        st = 0.0
        if transd is not None:
            dists = transd.forced_decode_parallel(tokens, transd.prepare(fmap)).data[0]
            st = float(_log_probs(dists[positions, tokens]).sum())
    return sv, st


def force_score(tokens: Sequence[int], fmap: FeatureMap, vlad: VladDecoder, transd: Optional[TransDecoder],
                cfg: DecodeConfig) -> float:
    """
    Joint log score of an EOS-terminated sequence under one direction's branches.
    """
    sv, st = branch_scores(tokens, fmap, vlad, transd)
    return joint_score(branch_alpha(cfg, transd), sv, st)
