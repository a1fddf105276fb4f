"""最適化アルゴリズム（SGD と Adam）"""
from enum import Enum
from typing import Dict
import numpy as np
from pyequicpi.helper import SysLog, ArgumentError
from pyequicpi.difftrain.params import ParameterStore

logger = SysLog.logger


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"

    @classmethod
    def from_name(cls, name) -> "OptimizerKind":
        if isinstance(name, cls):
            return name
        for kind in cls:
            if str(name).lower() in (kind.value, kind.name.lower()):
                return kind
        raise ArgumentError(f"unknown optimizer {name!r}")


class Optimizer:
    def __init__(self, learning_rate: float):
        if not learning_rate >= 0:
            raise ArgumentError(f"learning rate must be >= 0, got {learning_rate}")
        self.learning_rate = float(learning_rate)
        self.step_count = 0

    def step(self, params: ParameterStore, grads: Dict[str, np.ndarray]):
        self.step_count += 1
        for name in sorted(grads):
            tensor = params[name]
            tensor.value = tensor.value - self._update(name, grads[name])

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        return self.learning_rate * grad


class Adam(Optimizer):
    """Adam (β1=0.9, β2=0.999, ε=1e−8)"""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        m = self._m.get(name, np.zeros_like(grad))
        v = self._v.get(name, np.zeros_like(grad))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self._m[name], self._v[name] = m, v
        m_hat = m / (1.0 - self.beta1**self.step_count)
        v_hat = v / (1.0 - self.beta2**self.step_count)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Optimizer:
    kind = OptimizerKind.from_name(kind)
    if kind == OptimizerKind.SGD:
        return SGD(learning_rate)
    return Adam(learning_rate, beta1=beta1, beta2=beta2, eps=eps)
