from typing import Callable, Dict, List, NamedTuple, Optional
from src.core.tensor import Tensor, no_grad
import numpy as np


class GradCheckResult(NamedTuple):
    name: str
    relative_error: float
    n_entries: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    ||a - n|| / max(||a||, ||n||); zero when both vanish.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5,
                       indices: Optional[List[tuple]] = None) -> np.ndarray:
    """
    Central finite differences of the scalar fn() w.r.t. entries of tensor.

    :param indices: Entries to probe; all entries when None.
    :return: Full-shape gradient when indices is None, else one value per index.
    """
    probe = list(np.ndindex(tensor.shape)) if indices is None else indices
    values = np.zeros(len(probe))
    with no_grad():
        for i, idx in enumerate(probe):
            original = tensor.data[idx]
            tensor.data[idx] = original + h
            plus = fn().item()
            tensor.data[idx] = original - h
            minus = fn().item()
            tensor.data[idx] = original
            values[i] = (plus - minus) / (2.0 * h)
    if indices is None:
        return values.reshape(tensor.shape)
    return values


def check_gradients(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], h: float = 1e-5,
                    samples_per_tensor: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> List[GradCheckResult]:
    """
    Compares backward() gradients of fn() with central differences for each named tensor.

    :param samples_per_tensor: Probe this many random entries per tensor (all when None).
    """
    rng = rng or np.random.default_rng(0)
    for tensor in tensors.values():
        tensor.zero_grad()
    fn().backward()

    results = []
    for name, tensor in tensors.items():
        all_indices = list(np.ndindex(tensor.shape))
        if samples_per_tensor is not None and samples_per_tensor < len(all_indices):
            chosen = rng.choice(len(all_indices), size=samples_per_tensor, replace=False)
            indices = [all_indices[i] for i in sorted(chosen)]
        else:
            indices = all_indices
        numeric = numerical_gradient(fn, tensor, h, indices)
        analytic = np.array([tensor.grad[idx] for idx in indices])
        results.append(GradCheckResult(name, relative_error(analytic, numeric), len(indices)))
    return results
