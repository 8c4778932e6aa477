"""
Mutual re-decoding: both directions propose N-best lists, every candidate is
teacher-forced through the opposite direction, and candidates are ranked by
the sum of their L2R and reversed-R2L sequence log-probabilities.
"""
from src.core.tensor import no_grad
from src.data.charset import Charset
from src.decoding.beam import NBestList, co_beam_search, force_score, rank_key
from src.model.backbone import FeatureMap
from src.model.recognizer import Direction, VlamdModel
from src.utils.config import DecodeConfig
from src.utils.constants import EOS_ID
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple
import numpy as np


@dataclass(frozen=True)
class ScoredCandidate:
    """
    A candidate in L2R orientation (EOS stripped) with both directional scores.
    """
    tokens: Tuple[int, ...]
    origin: Direction
    generation_score: float
    logp_l2r: float
    logp_r2l_reversed: float
    combined: float


@dataclass
class DecodeReport:
    candidates: List[ScoredCandidate]
    charset: Charset
    l2r: Optional[NBestList] = None
    r2l: Optional[NBestList] = None

    @property
    def best(self) -> ScoredCandidate:
        return self.candidates[0]

    def rows(self) -> List[List[str]]:
        """
        One row per candidate: rank, origin, text, logp_l2r, logp_r2l_reversed, combined.
        """
        return [[str(rank), c.origin.value, self.charset.decode(c.tokens), repr(c.logp_l2r),
                 repr(c.logp_r2l_reversed), repr(c.combined)]
                for rank, c in enumerate(self.candidates, start=1)]


def _orient(content: Tuple[int, ...], direction: Direction) -> Tuple[int, ...]:
    return content if direction is Direction.L2R else tuple(reversed(content))


def mutual_redecode(fmap: FeatureMap, model: VlamdModel, cfg: DecodeConfig) -> Tuple[Tuple[int, ...], DecodeReport]:
    """
    Decodes one image with both directions and rescoring.

    Candidates that appear in both N-best lists are merged, keeping the entry
    with the higher generation score. Scores from the generating direction are
    reused for finished hypotheses; every other term is recomputed by forced
    scoring of content + EOS.

    :return: (winning content tokens in L2R order, report ranked best first)
    """
    branches = {d: model.branches(d) for d in Direction}
    lists = {d: co_beam_search(fmap, *branches[d], cfg, d) for d in Direction}

    pool: Dict[Tuple[int, ...], Tuple[Direction, float]] = {}
    for direction in Direction:
        for hyp in lists[direction].entries:
            if hyp.finished:
                generated, score = hyp.content, hyp.logp_joint
            else:
                # an unfinished fallback is terminated, dropping tokens that leave no room for EOS
                generated = hyp.content[:model.max_steps - 1]
                score = force_score(generated + (EOS_ID,), fmap, *branches[direction], cfg)
            content = _orient(generated, direction)
            if content not in pool or score > pool[content][1]:
                pool[content] = (direction, score)

    candidates = []
    for content, (origin, generation) in pool.items():
        terms = {}
        for direction in Direction:
            if direction is origin:
                terms[direction] = generation
            else:
                sequence = _orient(content, direction) + (EOS_ID,)
                terms[direction] = force_score(sequence, fmap, *branches[direction], cfg)
        combined = terms[Direction.L2R] + terms[Direction.R2L]
        if cfg.length_norm:
            combined /= len(content) + 1
        candidates.append(ScoredCandidate(content, origin, generation, terms[Direction.L2R],
                                          terms[Direction.R2L], combined))

    candidates.sort(key=lambda c: rank_key(c.combined, c.tokens))
    report = DecodeReport(candidates, model.charset, lists[Direction.L2R], lists[Direction.R2L])
    return report.best.tokens, report


def recognize_with_candidates(image: np.ndarray, model: VlamdModel,
                              cfg: DecodeConfig) -> Tuple[str, Optional[DecodeReport]]:
    """
    Encodes one 3 x H x W image and returns its transcript, plus the candidate
    report when decode.mutual is on. Without it the L2R co-beam top-1 is used.
    """
    with no_grad():
        fmap = model.encode(image)
    if not cfg.mutual:
        best = co_beam_search(fmap, *model.branches(Direction.L2R), cfg, Direction.L2R).entries[0]
        return model.charset.decode(best.content), None
    tokens, report = mutual_redecode(fmap, model, cfg)
    return model.charset.decode(tokens), report


def recognize(image: np.ndarray, model: VlamdModel, cfg: DecodeConfig) -> str:
    return recognize_with_candidates(image, model, cfg)[0]
