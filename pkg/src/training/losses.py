"""
Target construction and the training objective: four cross-entropy heads
plus the cross-direction KL terms with a stop-gradient on the reversed side.
"""
from src.core.tensor import Tensor, cross_entropy, kl_div, no_grad, stop_gradient, take_along_axis
from src.utils.constants import EOS_ID, PAD_ID
from src.utils.errors import AlignmentError
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple
import numpy as np


@dataclass(frozen=True)
class TargetPair:
    """
    EOS-terminated targets of both reading directions. Arrays are (T,) for one
    word or (B, T) for a batch right-padded with PAD_ID.
    """
    s_l2r: np.ndarray
    s_r2l: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.s_l2r != PAD_ID

    @property
    def content_lengths(self) -> np.ndarray:
        """
        Characters per row, EOS excluded.
        """
        return np.atleast_1d(self.mask.sum(axis=-1) - 1)


def make_target_pair(content_ids: Sequence[int]) -> TargetPair:
    content = np.asarray(content_ids, dtype=np.int64)
    eos = np.array([EOS_ID], dtype=np.int64)
    return TargetPair(np.concatenate([content, eos]), np.concatenate([content[::-1], eos]))


def collate(pairs: Sequence[TargetPair]) -> TargetPair:
    """
    Stacks single-word pairs into a PAD-padded batch pair.
    """
    length = max(len(p.s_l2r) for p in pairs)
    l2r = np.full((len(pairs), length), PAD_ID, dtype=np.int64)
    r2l = np.full((len(pairs), length), PAD_ID, dtype=np.int64)
    for i, pair in enumerate(pairs):
        l2r[i, :len(pair.s_l2r)] = pair.s_l2r
        r2l[i, :len(pair.s_r2l)] = pair.s_r2l
    return TargetPair(l2r, r2l)


def reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """
    Per-row gather index reversing the first L content positions; EOS and
    padding positions map to themselves.
    """
    positions = np.arange(steps)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(positions < lengths, lengths - 1 - positions, positions)


def reverse_sequence(y: Tensor, lengths: np.ndarray) -> Tensor:
    """
    RS without the stop-gradient: (B, T, V) -> content-reversed (B, T, V).
    """
    index = reverse_index(lengths, y.shape[1])
    return take_along_axis(y, index[:, :, None], axis=1)


def _batched(y: Tensor) -> Tensor:
    return y.reshape(1, *y.shape) if y.ndim == 2 else y


def _check_aligned(y: Tensor, targets: np.ndarray, name: str) -> None:
    if y.shape[:-1] != targets.shape:
        raise AlignmentError(f"{name} covers {y.shape[:-1]} positions, targets have {targets.shape}")


@dataclass
class LossReport:
    ce_vlad_l2r: float
    ce_vlad_r2l: float
    ce_transd_l2r: float
    ce_transd_r2l: float
    kl_vlad: float
    kl_transd: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def components(self) -> Dict[str, float]:
        return {k: v for k, v in self.to_dict().items() if k != 'total'}


def head_losses(y_l2r: Tensor, y_r2l: Tensor, yp_l2r: Optional[Tensor], yp_r2l: Optional[Tensor],
                pair: TargetPair) -> Tuple[Optional[Tensor], ...]:
    l2r, r2l = np.atleast_2d(pair.s_l2r), np.atleast_2d(pair.s_r2l)
    losses = []
    for y, targets, name in ((y_l2r, l2r, 'Y_l2r'), (y_r2l, r2l, 'Y_r2l'),
                             (yp_l2r, l2r, "Y'_l2r"), (yp_r2l, r2l, "Y'_r2l")):
        if y is None:
            losses.append(None)
            continue
        y = _batched(y)
        _check_aligned(y, targets, name)
        losses.append(cross_entropy(y, targets))
    return tuple(losses)


def main_loss(y_l2r: Tensor, y_r2l: Tensor, yp_l2r: Optional[Tensor], yp_r2l: Optional[Tensor],
              pair: TargetPair) -> Tensor:
    """
    Sum of the per-head cross entropies, each averaged over non-PAD positions.
    The TransD pair may be None for models without that branch.

    :raises AlignmentError: If a head's length differs from the targets.
    """
    terms = [t for t in head_losses(y_l2r, y_r2l, yp_l2r, yp_r2l, pair) if t is not None]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def mutual_kl_term(live: Tensor, other: Tensor, lengths: Optional[np.ndarray] = None) -> Tensor:
    """
    KL(live || RS(other)). RS reverses the content positions of other, keeps
    EOS last and blocks its gradient.
    """
    live, other = _batched(live), _batched(other)
    if live.shape != other.shape:
        raise AlignmentError(f"Mutual operands differ in shape: {live.shape} and {other.shape}")
    batch, steps, _ = live.shape
    if lengths is None:
        lengths = np.full(batch, steps - 1)
    lengths = np.asarray(lengths).reshape(-1)
    if np.any(lengths + 1 > steps):
        raise AlignmentError(f"Content lengths {lengths.tolist()} do not fit {steps} positions")
    mask = np.arange(steps)[None, :] <= lengths[:, None]
    frozen = stop_gradient(reverse_sequence(other, lengths))
    return kl_div(live, frozen, mask)


def mutual_loss(y_l2r: Tensor, y_r2l: Tensor, lengths: Optional[np.ndarray] = None) -> Tensor:
    """
    KL(Y_l2r || RS(Y_r2l)) + KL(Y_r2l || RS(Y_l2r)), averaged over positions.

    :param lengths: Content length per row; every position but the last is
        content when None.
    """
    return mutual_kl_term(y_l2r, y_r2l, lengths) + mutual_kl_term(y_r2l, y_l2r, lengths)


def total_loss(y_l2r: Tensor, y_r2l: Tensor, yp_l2r: Optional[Tensor], yp_r2l: Optional[Tensor],
               pair: TargetPair, lam: float) -> Tuple[Tensor, LossReport]:
    """
    main + lam * (kl_vlad + kl_transd). With lam == 0 the KL terms are only
    evaluated for the report and stay out of the graph.
    """
    ces = head_losses(y_l2r, y_r2l, yp_l2r, yp_r2l, pair)
    terms = [t for t in ces if t is not None]
    total = terms[0]
    for term in terms[1:]:
        total = total + term

    lengths = pair.content_lengths
    pairs = [(y_l2r, y_r2l), (yp_l2r, yp_r2l)]
    kls = []
    for live, other in pairs:
        if live is None:
            kls.append(None)
        elif lam == 0:
            with no_grad():
                kls.append(mutual_loss(live, other, lengths))
        else:
            kls.append(mutual_loss(live, other, lengths))
    if lam != 0:
        for kl in kls:
            if kl is not None:
                total = total + kl * lam

    def value(t: Optional[Tensor]) -> float:
        return 0.0 if t is None else t.item()

    report = LossReport(*(value(t) for t in ces), value(kls[0]), value(kls[1]), total.item())
    return total, report
