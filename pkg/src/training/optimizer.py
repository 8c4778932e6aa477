from src.core.nn import Parameter
from src.utils.config import TrainConfig
from src.utils.errors import CheckpointError
from typing import Dict, List, Sequence
import numpy as np


class MultiStepSchedule:
    """
    Piecewise-constant learning rate: base_lr * factor^k after the k-th milestone.
    """

    def __init__(self, base_lr: float, milestones: Sequence[int], factor: float):
        self.base_lr = base_lr
        self.milestones: List[int] = sorted(int(m) for m in milestones)
        self.factor = factor

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> 'MultiStepSchedule':
        return cls(cfg.lr, [int(round(m * cfg.max_steps)) for m in cfg.milestones], cfg.lr_decay)

    def lr_at(self, step: int) -> float:
        """
        :param step: Zero-based optimizer step.
        """
        passed = sum(1 for m in self.milestones if step >= m)
        return self.base_lr * self.factor ** passed


class Adam:
    """
    Adam with decoupled weight decay. Parameters without a gradient are skipped.
    """

    def __init__(self, params: Dict[str, Parameter], schedule: MultiStepSchedule, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params: Dict[str, Parameter], cfg: TrainConfig) -> 'Adam':
        return cls(params, MultiStepSchedule.from_config(cfg), (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)

    @property
    def current_lr(self) -> float:
        return self.schedule.lr_at(self.step_count)

    def step(self) -> float:
        """
        Applies one update at the scheduled rate and returns that rate.
        """
        lr = self.current_lr
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            if param.grad is None:
                continue
            g = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            decayed = param.data - lr * self.weight_decay * param.data
            param.data = (decayed - lr * update).astype(param.dtype, copy=False)
        return lr

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        """
        :raises CheckpointError: If a moment is missing or misshaped.
        """
        for name, param in self.params.items():
            for prefix, store in (('m', self.m), ('v', self.v)):
                key = f"{prefix}.{name}"
                if key not in state or state[key].shape != param.shape:
                    raise CheckpointError(f"Optimizer state '{key}' missing or misshaped")
                store[name] = np.array(state[key], dtype=param.dtype)
        self.step_count = step_count
