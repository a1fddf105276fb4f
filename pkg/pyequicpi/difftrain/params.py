"""名前付きパラメータの保管"""
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Tuple
import numpy as np
from pyequicpi.helper import SysLog, ConfigurationError, NumericalError
from pyequicpi.difftrain.tape import Tensor

logger = SysLog.logger


class ParameterStore:
    """学習パラメータとバッファ（バッチ正規化の移動平均など）を名前で保持する

    バッファは ``trainable=False`` で登録し、勾配計算と最適化の対象から外れる。
    名前は登録順ではなく辞書順で列挙する。
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = OrderedDict()
        self._trainable: Dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConfigurationError(f"parameter {name} already registered")
        tensor = Tensor(np.array(value, dtype=np.float64))
        self._tensors[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ConfigurationError(f"parameter {name} is missing from the store") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> List[str]:
        return sorted(self._tensors)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable(self) -> Dict[str, Tensor]:
        return {k: self._tensors[k] for k in self.names() if self._trainable[k]}

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(k, self._tensors[k]) for k in self.names()]

    def assign(self, name: str, value: np.ndarray):
        """値を上書きする（形状は一致していること）"""
        tensor = self[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != tensor.value.shape:
            raise ConfigurationError(f"{name}: shape {value.shape} does not match {tensor.value.shape}")
        tensor.value = value.copy()

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, tensor in self.items():
            other.add(name, tensor.value, trainable=self._trainable[name])
        return other

    def values(self) -> Dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.items()}

    def count(self, trainable_only: bool = True) -> int:
        return int(sum(t.value.size for k, t in self.items() if self._trainable[k] or not trainable_only))

    def check_finite(self):
        for name, tensor in self.items():
            if not np.all(np.isfinite(tensor.value)):
                raise NumericalError(f"parameter {name} holds non-finite values")

    def check_shapes(self, expected: Mapping[str, Tuple[int, ...]]):
        """期待する名前と形状の集合に一致するか検証する"""
        missing = sorted(set(expected) - set(self._tensors))
        extra = sorted(set(self._tensors) - set(expected))
        if missing or extra:
            raise ConfigurationError(f"parameter names differ from the model: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self[name].value.shape != tuple(shape):
                raise ConfigurationError(f"{name}: shape {self[name].value.shape} differs from model shape {shape}")

    def equals(self, other: "ParameterStore") -> bool:
        """名前・形状・値がビット単位で等しいか"""
        if self.names() != other.names():
            return False
        return all(
            self.is_trainable(k) == other.is_trainable(k)
            and self[k].value.shape == other[k].value.shape
            and self[k].value.tobytes() == other[k].value.tobytes()
            for k in self.names()
        )
