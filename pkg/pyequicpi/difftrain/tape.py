"""
リバースモード自動微分

:class:`Tape` をコンテキストマネージャとして有効化すると、追跡対象の :class:`Tensor` を入力に持つ
全ての演算が記録される。 :meth:`Tape.gradient` は記録と正確に逆順に随伴を伝播する。
テープが無い場合、演算は値だけを計算する（推論）。
"""
from contextlib import contextmanager
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import numpy as np
from pyequicpi.helper import SysLog, DifferentiationError

logger = SysLog.logger

ArrayLike = Union["Tensor", np.ndarray, float, int]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPES: List["Tape"] = []


class Tensor:
    """float64 配列のラッパー"""

    __slots__ = ("value", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        return f"Tensor({self.value!r})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class Tape:
    """演算の記録

    Examples:
        >>> w = Tensor(np.ones(3))
        >>> with Tape() as tape:
        ...     tape.watch(w)
        ...     loss = (w * w).sum()
        >>> tape.gradient(loss, [w])[0]
        array([2., 2., 2.])
    """

    def __init__(self):
        self._tracked: Dict[int, Tensor] = {}
        self._records: List[Tuple[Tensor, Tuple, Backward]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def watch(self, *tensors: Tensor):
        for t in tensors:
            self._tracked[id(t)] = t

    def is_tracked(self, x) -> bool:
        return isinstance(x, Tensor) and id(x) in self._tracked

    def record(self, output: Tensor, inputs: Tuple, backward: Backward):
        self._records.append((output, inputs, backward))
        self._tracked[id(output)] = output

    @contextmanager
    def paused(self):
        """ブロック内の演算を記録しない"""
        _ACTIVE_TAPES.remove(self)
        try:
            yield self
        finally:
            _ACTIVE_TAPES.append(self)

    def gradient(self, target: Tensor, sources: Union[Sequence[Tensor], Mapping[str, Tensor]]):
        """target のスカラー値に対する sources の勾配

        Args:
            target(Tensor): 要素数1のテンソル
            sources: テンソルのリストまたは名前付き辞書

        Return:
            sources と同じ構造の ndarray。テープ上で到達しないソースの勾配はゼロ

        Raises:
            DifferentiationError: target がスカラーでない
        """
        if not isinstance(target, Tensor) or target.value.size != 1:
            shape = getattr(target, "shape", None)
            raise DifferentiationError(f"gradient target must be a scalar tensor, got shape {shape}")
        adjoints: Dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for output, inputs, backward in reversed(self._records):
            g = adjoints.get(id(output))
            if g is None:
                continue
            grads = backward(g)
            for x, gx in zip(inputs, grads):
                if gx is None or not self.is_tracked(x):
                    continue
                if id(x) in adjoints:
                    adjoints[id(x)] = adjoints[id(x)] + gx
                else:
                    adjoints[id(x)] = gx
        if isinstance(sources, Mapping):
            return {k: adjoints.get(id(t), np.zeros_like(t.value)) for k, t in sources.items()}
        return [adjoints.get(id(t), np.zeros_like(t.value)) for t in sources]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _emit(value: np.ndarray, inputs: Tuple, backward: Backward) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(x) for x in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    va, vb = value_of(a), value_of(b)
    return _emit(va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    va, vb = value_of(a), value_of(b)
    return _emit(va - vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    va, vb = value_of(a), value_of(b)
    return _emit(va * vb, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    va, vb = value_of(a), value_of(b)
    return _emit(
        va / vb, (a, b), lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * va / (vb * vb), vb.shape))
    )


def neg(a: ArrayLike) -> Tensor:
    return _emit(-value_of(a), (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """2次元同士の行列積"""
    va, vb = value_of(a), value_of(b)
    if va.ndim != 2 or vb.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {va.shape} and {vb.shape}")
    return _emit(va @ vb, (a, b), lambda g: (g @ vb.T, va.T @ g))


def exp(a: ArrayLike) -> Tensor:
    out = np.exp(value_of(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    va = value_of(a)
    return _emit(np.log(va), (a,), lambda g: (g / va,))


def sqrt(a: ArrayLike) -> Tensor:
    out = np.sqrt(value_of(a))
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: ArrayLike) -> Tensor:
    va = value_of(a)
    return _emit(va * va, (a,), lambda g: (2.0 * g * va,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    va = value_of(a)
    return _emit(va**exponent, (a,), lambda g: (g * exponent * va ** (exponent - 1),))


def sigmoid(a: ArrayLike) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-value_of(a)))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: ArrayLike) -> Tensor:
    va = value_of(a)
    s = 1.0 / (1.0 + np.exp(-va))
    return _emit(va * s, (a,), lambda g: (g * (s + va * s * (1.0 - s)),))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    va = value_of(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _emit(np.sum(va, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    va = value_of(a)
    count = va.size if axis is None else int(np.prod([va.shape[k] for k in np.atleast_1d(axis)]))
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a: ArrayLike, shape) -> Tensor:
    va = value_of(a)
    return _emit(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def getitem(a: ArrayLike, index) -> Tensor:
    va = value_of(a)

    def backward(g):
        out = np.zeros_like(va)
        np.add.at(out, index, g)
        return (out,)

    return _emit(va[index], (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    values = [value_of(t) for t in tensors]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit(
        np.concatenate(values, axis=axis), tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    values = [value_of(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(values)))

    return _emit(np.stack(values, axis=axis), tuple(tensors), backward)


def einsum(subscripts: str, *operands: ArrayLike) -> Tensor:
    """明示的な ``->`` を持つ einsum（省略記号・単一オペランド内の重複添字は不可）"""
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum subscripts must be explicit without ellipsis: {subscripts!r}")
    inputs, output = subscripts.replace(" ", "").split("->")
    in_subs = inputs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError(f"einsum expects {len(in_subs)} operands, got {len(operands)}")
    for sub_k in in_subs:
        if len(set(sub_k)) != len(sub_k):
            raise ValueError(f"repeated index within operand {sub_k!r} is not supported")
    values = [value_of(t) for t in operands]

    def backward(g):
        grads = []
        for k, sub_k in enumerate(in_subs):
            if not isinstance(operands[k], Tensor):
                grads.append(None)
                continue
            others = [s for m, s in enumerate(in_subs) if m != k]
            available = set(output).union(*others) if others else set(output)
            target = "".join(c for c in sub_k if c in available)
            expr = ",".join([output] + others) + "->" + target
            gk = np.einsum(expr, g, *[v for m, v in enumerate(values) if m != k])
            shape = [values[k].shape[p] if c in target else 1 for p, c in enumerate(sub_k)]
            grads.append(np.broadcast_to(gk.reshape(shape), values[k].shape).copy())
        return tuple(grads)

    return _emit(np.einsum(subscripts, *values), tuple(operands), backward)


def take(a: ArrayLike, indices: np.ndarray, axis: int = 0) -> Tensor:
    va = value_of(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(va)
        np.add.at(out, (slice(None),) * axis + (indices,), g)
        return (out,)

    return _emit(np.take(va, indices, axis=axis), (a,), backward)


def scatter_add(values: ArrayLike, index: np.ndarray, size: int) -> Tensor:
    """``out[index[e]] += values[e]`` を e の昇順で加算する"""
    vv = value_of(values)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((size,) + vv.shape[1:])
    np.add.at(out, index, vv)
    return _emit(out, (values,), lambda g: (g[index],))
