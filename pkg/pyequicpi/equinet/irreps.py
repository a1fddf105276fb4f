"""
既約表現（l = 0, 1, 2）の道具一式

- 実球面調和関数（物理正規化、ブロック順 l = 0..lmax、成分順 m = −l..l）
- 実基底での Clebsch–Gordan 結合テンソル（自前の調和関数から数値的に求める）
- Wigner D 行列
- 特徴ベクトルのレイアウト :class:`IrrepLayout` と :class:`IrrepFeature`
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple
import numpy as np
from pyequicpi.helper import SysLog, ArgumentError, ConfigurationError
from pyequicpi.difftrain.tape import ArrayLike, Tensor, getitem, mul, sub, add, stack, value_of

logger = SysLog.logger

LMAX = 2
Path = Tuple[int, int, int]

_C00 = 0.5 / math.sqrt(math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2_OFF = 0.5 * math.sqrt(15.0 / math.pi)
_C2_ZERO = 0.25 * math.sqrt(5.0 / math.pi)
_C2_DIFF = 0.25 * math.sqrt(15.0 / math.pi)

# row a of the l=1 harmonic block picks cartesian axis k: (y, z, x)
L1_TO_XYZ = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def sh_blocks(unit: ArrayLike, lmax: int = LMAX) -> List[Tensor]:
    """単位ベクトル群 (n, 3) の実球面調和関数をブロックごとに返す

    テープ上の演算で構成しているため、入力が追跡対象なら微分できる。

    Return:
        List[Tensor]: ``[Y0 (n,1), Y1 (n,3), Y2 (n,5)][:lmax+1]``
    """
    if not 0 <= lmax <= LMAX:
        raise ArgumentError(f"lmax must be within 0..{LMAX}, got {lmax}")
    x = getitem(unit, (slice(None), 0))
    y = getitem(unit, (slice(None), 1))
    z = getitem(unit, (slice(None), 2))
    n = value_of(x).shape[0]
    blocks = [Tensor(np.full((n, 1), _C00))]
    if lmax >= 1:
        blocks.append(mul(stack([y, z, x], axis=1), _C1))
    if lmax >= 2:
        xx, yy, zz = mul(x, x), mul(y, y), mul(z, z)
        blocks.append(
            stack(
                [
                    mul(mul(x, y), _C2_OFF),
                    mul(mul(y, z), _C2_OFF),
                    mul(sub(mul(zz, 2.0), add(xx, yy)), _C2_ZERO),
                    mul(mul(x, z), _C2_OFF),
                    mul(sub(xx, yy), _C2_DIFF),
                ],
                axis=1,
            )
        )
    return blocks


def _sh_numpy(points: np.ndarray, l: int) -> np.ndarray:
    return sh_blocks(np.asarray(points, dtype=np.float64).reshape(-1, 3), l)[l].value


def real_spherical_harmonics(unit_vec: Sequence[float], lmax: int = LMAX) -> np.ndarray:
    """単位ベクトル1本の実球面調和関数（長さ (lmax+1)²）

    Raises:
        ArgumentError: ノルムが 1 から 1e−6 を超えてずれる
    """
    v = np.asarray(unit_vec, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ArgumentError(f"expected a unit vector, got norm {np.linalg.norm(v)}")
    return np.concatenate([b.value[0] for b in sh_blocks(v[None, :], lmax)])


def _sh_gradient(points: np.ndarray, l: int) -> np.ndarray:
    """∂Y_l/∂(x,y,z) の解析式。形状 (n, 2l+1, 3)"""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    zero = np.zeros_like(x)
    if l == 0:
        return np.zeros((len(points), 1, 3))
    if l == 1:
        one = np.ones_like(x) * _C1
        rows = [(zero, one, zero), (zero, zero, one), (one, zero, zero)]
        return np.stack([np.stack(r, -1) for r in rows], 1)
    a, b, d = _C2_OFF, _C2_ZERO, _C2_DIFF
    rows = [
        (a * y, a * x, zero),
        (zero, a * z, a * y),
        (-2 * b * x, -2 * b * y, 4 * b * z),
        (a * z, zero, a * x),
        (2 * d * x, -2 * d * y, zero),
    ]
    return np.stack([np.stack(r, -1) for r in rows], 1)


def _sphere_samples(n: int = 64, seed: int = 7) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@lru_cache(maxsize=None)
def rotation_generators(l: int) -> np.ndarray:
    """表現 D^l の無限小生成子 L_k （k = x, y, z）。形状 (3, 2l+1, 2l+1)

    ``L_k Y_l(v) = ∇Y_l(v)·(e_k × v)`` を球面上の標本点で最小二乗に解く。
    """
    points = _sphere_samples()
    basis = _sh_numpy(points, l)
    grad = _sh_gradient(points, l)
    generators = np.zeros((3, 2 * l + 1, 2 * l + 1))
    for k in range(3):
        tangent = np.cross(np.eye(3)[k], points)
        rhs = np.einsum("nac,nc->na", grad, tangent)
        solution, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
        generators[k] = solution.T
    generators.setflags(write=False)
    return generators


def _quadrature(n_theta: int = 8, n_phi: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    cos_t, w_t = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    ct, pp = np.meshgrid(cos_t, phi, indexing="ij")
    st = np.sqrt(1.0 - ct**2)
    points = np.stack([st * np.cos(pp), st * np.sin(pp), ct], -1).reshape(-1, 3)
    weights = (w_t[:, None] * np.full(n_phi, 2.0 * np.pi / n_phi)[None, :]).ravel()
    return points, weights


def is_parity_even(path: Path) -> bool:
    return sum(path) % 2 == 0


def is_allowed_path(path: Path, lmax: int = LMAX) -> bool:
    l1, l2, l3 = path
    return max(l1, l2, l3) <= lmax and abs(l1 - l2) <= l3 <= l1 + l2


@lru_cache(maxsize=None)
def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """実基底の結合テンソル C[a, b, c]（形状 (2l1+1, 2l2+1, 2l3+1)）

    ``Σ_ab C[a,b,c] C[a,b,c'] = δ_cc'`` に正規化してある。
    l1+l2+l3 が偶数の経路は調和関数3つの積分（Gaunt 係数）、奇数の経路は回転生成子から構成する。
    (1,1→0) は ``δ_ab/√3``、(1,1→1) は外積に比例する。

    Raises:
        ArgumentError: 三角不等式を満たさない、または l > 2
    """
    if not is_allowed_path((l1, l2, l3)):
        raise ArgumentError(f"coupling ({l1}, {l2} -> {l3}) is not allowed for lmax={LMAX}")
    if is_parity_even((l1, l2, l3)):
        points, weights = _quadrature()
        tensor = np.einsum(
            "q,qa,qb,qc->abc", weights, _sh_numpy(points, l1), _sh_numpy(points, l2), _sh_numpy(points, l3)
        )
    elif l1 == 1:
        # vector input, output c: Σ_k v_k (L_k Y)_c
        tensor = np.einsum("ak,kcb->abc", L1_TO_XYZ, rotation_generators(l2))
    elif l2 == 1:
        tensor = np.transpose(clebsch_gordan(l2, l1, l3), (1, 0, 2)).copy()
    else:
        # vector output: (Y^T L_k Y')_k
        tensor = np.einsum("ck,kab->abc", L1_TO_XYZ, rotation_generators(l1))
    gram = np.einsum("abc,abd->cd", tensor, tensor)
    scale = math.sqrt(np.trace(gram) / (2 * l3 + 1))
    tensor = tensor / scale
    tensor[np.abs(tensor) < 1e-13] = 0.0
    tensor.setflags(write=False)
    return tensor


def tensor_product_paths(lmax: int = LMAX, include_odd: bool = False) -> List[Path]:
    """許される (l_in, l_sh, l_out) の一覧（辞書順）"""
    paths = []
    for l1 in range(lmax + 1):
        for l2 in range(lmax + 1):
            for l3 in range(lmax + 1):
                path = (l1, l2, l3)
                if is_allowed_path(path, lmax) and (include_odd or is_parity_even(path)):
                    paths.append(path)
    return paths


def check_rotation(R: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ArgumentError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ArgumentError("rotation matrix is not orthogonal")
    if np.linalg.det(R) <= 0:
        raise ArgumentError("rotation matrix must have determinant +1")
    return R


def wigner_d(R: np.ndarray, l: int) -> np.ndarray:
    """回転 R の次数 l の実 Wigner 行列。 ``D^l(R)·Y_l(v) = Y_l(R·v)``"""
    R = check_rotation(R)
    if l == 0:
        return np.ones((1, 1))
    d1 = L1_TO_XYZ @ R @ L1_TO_XYZ.T
    if l == 1:
        return d1
    if l == 2:
        q = clebsch_gordan(1, 1, 2).reshape(9, 5).T
        return q @ np.kron(d1, d1) @ q.T
    raise ArgumentError(f"Wigner matrices are implemented up to l={LMAX}, got {l}")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """一様ランダムな回転（QR 分解、det = +1）"""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass(frozen=True)
class IrrepLayout:
    """次数 l ごとのチャネル数

    Args:
        multiplicities(Tuple[int, int, int]): (l=0, l=1, l=2) のチャネル数
    """

    multiplicities: Tuple[int, ...] = (32, 8, 4)

    def __post_init__(self):
        mult = tuple(int(m) for m in self.multiplicities)
        if len(mult) != LMAX + 1 or min(mult) < 0:
            raise ConfigurationError(f"layout needs {LMAX + 1} non-negative multiplicities, got {self.multiplicities}")
        object.__setattr__(self, "multiplicities", mult)

    def mult(self, l: int) -> int:
        return self.multiplicities[l]

    @property
    def width(self) -> int:
        return sum(m * (2 * l + 1) for l, m in enumerate(self.multiplicities))

    def block_slice(self, l: int) -> slice:
        start = sum(m * (2 * k + 1) for k, m in enumerate(self.multiplicities[:l]))
        return slice(start, start + self.multiplicities[l] * (2 * l + 1))


@dataclass(frozen=True)
class IrrepFeature:
    """ノードごとの既約表現特徴

    ``data`` の各行は [l=0 チャネル][l=1 チャネル×3][l=2 チャネル×5] の連続ブロック（チャネル優先）。
    """

    layout: IrrepLayout
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.shape[1] != self.layout.width:
            raise ConfigurationError(f"feature width {data.shape[1]} does not match layout width {self.layout.width}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "IrrepFeature":
        """``blocks[l]`` の形状は (n, mult_l, 2l+1)"""
        blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        layout = IrrepLayout(tuple(b.shape[1] for b in blocks))
        n = blocks[0].shape[0]
        return cls(layout=layout, data=np.concatenate([b.reshape(n, b.shape[1] * b.shape[2]) for b in blocks], axis=1))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def block(self, l: int) -> np.ndarray:
        return self.data[:, self.layout.block_slice(l)].reshape(self.n, self.layout.mult(l), 2 * l + 1)

    @property
    def blocks(self) -> List[np.ndarray]:
        return [self.block(l) for l in range(LMAX + 1)]

    @property
    def scalars(self) -> np.ndarray:
        return self.block(0)[:, :, 0]

    def rotated(self, R: np.ndarray) -> "IrrepFeature":
        """各ブロックに D^l(R) を作用させた特徴"""
        return IrrepFeature.from_blocks([b @ wigner_d(R, l).T for l, b in enumerate(self.blocks)])
