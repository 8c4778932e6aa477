"""
Parameters, a module container with dotted parameter naming, and the layers
the recognizer is assembled from.
"""
from src.core.tensor import Tensor, embedding_lookup, layer_norm, matmul, relu, sigmoid, tanh
from typing import Dict, Iterator, List, Optional, Tuple
from src.utils.constants import LAYER_NORM_EPS
from src.utils.errors import CheckpointError
import numpy as np


class Parameter(Tensor):
    """
    A trainable leaf tensor. Its name is the dotted path assigned by the owning
    model (e.g. 'vlad.l2r.agf.W_m.weight') and determines checkpoint placement.
    """

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(np.array(data), requires_grad=True, name=name)


class Module:
    def __init__(self):
        object.__setattr__(self, '_parameters', {})
        object.__setattr__(self, '_modules', {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, param in self.named_parameters():
            param.name = name

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copies arrays into the parameters of the same name.

        :raises CheckpointError: On missing, unexpected or misshaped entries.
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, param in own.items():
            value = state[name]
            if value.shape != param.shape:
                raise CheckpointError(f"Parameter '{name}' has shape {param.shape}, checkpoint holds {value.shape}")
            param.data = np.array(value, dtype=param.dtype)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__()
        self.weight = Parameter(uniform_init(rng, (in_dim, out_dim), in_dim, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight) if x.ndim >= 2 else matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(count, dim)).astype(dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding_lookup(self.table, ids)


class LSTMCell(Module):
    """
    Gate order: input, forget, candidate, output.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        self.W_x = Parameter(uniform_init(rng, (in_dim, 4 * hidden), hidden, dtype))
        self.W_h = Parameter(uniform_init(rng, (hidden, 4 * hidden), hidden, dtype))
        self.bias = Parameter(np.zeros(4 * hidden, dtype=dtype))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        n = self.hidden
        z = matmul(x, self.W_x) + matmul(h, self.W_h) + self.bias
        i = sigmoid(z[:, 0:n])
        f = sigmoid(z[:, n:2 * n])
        g = tanh(z[:, 2 * n:3 * n])
        o = sigmoid(z[:, 3 * n:4 * n])
        c_next = f * c + i * g
        h_next = o * tanh(c_next)
        return h_next, c_next


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(dim, ff_dim, rng, dtype)
        self.fc2 = Linear(ff_dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class OutputMLP(Module):
    """
    Classifier head: one linear layer, or linear-tanh-linear.
    """

    def __init__(self, in_dim: int, n_classes: int, layers: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.layers = layers
        if layers == 2:
            self.hidden = Linear(in_dim, in_dim, rng, dtype)
        self.out = Linear(in_dim, n_classes, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.layers == 2:
            x = tanh(self.hidden(x))
        return self.out(x)
