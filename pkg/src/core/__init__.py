from .tensor import Tensor, backward, no_grad, stop_gradient
from .nn import Module, Parameter
