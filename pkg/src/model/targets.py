from src.utils.constants import EOS_ID, PAD_ID
from src.utils.errors import AlignmentError, LengthError
import numpy as np


def shifted_inputs(targets, bos_id: int, max_steps: int):
    """
    Checks teacher-forcing targets and builds the decoder inputs.

    Each row is characters, one EOS, then only PAD_ID. The inputs are BOS
    followed by the targets shifted right, with PAD positions fed EOS.

    :param targets: (T,) or (B, T) ids.
    :return: ((B, T) targets, (B, T) inputs)
    :raises LengthError: If T exceeds max_steps.
    :raises AlignmentError: If a row lacks EOS, repeats it, or has tokens after it.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    batch, length = targets.shape
    if length > max_steps:
        raise LengthError(f"Target length {length} exceeds the maximum of {max_steps}")
    for row in targets:
        eos = np.flatnonzero(row == EOS_ID)
        if len(eos) != 1:
            raise AlignmentError(f"Target row {row.tolist()} must hold exactly one EOS")
        if np.any(row[:eos[0]] == PAD_ID) or np.any(row[eos[0] + 1:] != PAD_ID):
            raise AlignmentError(f"Target row {row.tolist()} may only have PAD after its EOS")

    filled = np.where(targets == PAD_ID, EOS_ID, targets)
    inputs = np.concatenate([np.full((batch, 1), bos_id, dtype=np.int64), filled[:, :-1]], axis=1)
    return targets, inputs
