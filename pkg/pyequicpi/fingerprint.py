"""
フィンガープリントと類似度

Morgan (ECFP) 型の円形フィンガープリントを化学ライブラリ無しで計算する。
ハッシュは FNV-1a 64bit（整数列を 64bit リトルエンディアンで連結したバイト列に対して適用）で固定しており、
実装間でビット単位に再現できる。
"""
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple
import numpy as np
from bitarray import bitarray
from bitarray.util import ba2hex, hex2ba
from pyequicpi.helper import SysLog, ArgumentError
from pyequicpi.chemio import ATOMIC_NUMBER, LigandMolecule

logger = SysLog.logger

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

PROTEIN_ALPHABET = frozenset("ACDEFGHIKLMNPQRSTVWYX")


def fnv1a_64(values: Sequence[int]) -> int:
    """整数列の FNV-1a 64bit ハッシュ

    各整数は 2^64 の剰余（負数は2の補数）として ``<Q`` でパックする。
    """
    data = struct.pack(f"<{len(values)}Q", *(v & _MASK64 for v in values))
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Fingerprint:
    """固定長ビット列のフィンガープリント

    Args:
        bits(bitarray): 長さ nbits のビット列
        nbits(int): ビット長
        radius(int): 近傍半径
    """

    bits: bitarray = field(hash=False)
    nbits: int = 2048
    radius: int = 2

    def __post_init__(self):
        if len(self.bits) != self.nbits:
            raise ArgumentError(f"bitset length {len(self.bits)} differs from nbits {self.nbits}")

    @classmethod
    def from_indices(cls, indices: Iterable[int], nbits: int = 2048, radius: int = 2) -> "Fingerprint":
        bits = bitarray(nbits, endian="big")
        bits.setall(0)
        for i in indices:
            bits[i] = 1
        return cls(bits=bits, nbits=nbits, radius=radius)

    @classmethod
    def from_hex(cls, text: str, nbits: int = 2048, radius: int = 2) -> "Fingerprint":
        bits = hex2ba(text, endian="big")
        if len(bits) < nbits:
            raise ArgumentError(f"hex string encodes {len(bits)} bits, expected {nbits}")
        return cls(bits=bits[:nbits], nbits=nbits, radius=radius)

    def to_hex(self) -> str:
        padded = self.bits.copy()
        padded.extend([0] * (-len(padded) % 4))
        return ba2hex(padded)

    @property
    def on_bits(self) -> Tuple[int, ...]:
        return tuple(self.bits.search(bitarray("1")))

    @property
    def popcount(self) -> int:
        return self.bits.count(1)

    def as_array(self) -> np.ndarray:
        """0/1 の float64 ベクトル（ネットワーク入力用）"""
        return np.frombuffer(self.bits.unpack(), dtype=np.uint8).astype(np.float64)


@dataclass(frozen=True)
class KmerSet:
    kmers: frozenset
    k: int = 3


def _initial_invariant(mol: LigandMolecule, index: int, degree: int) -> Tuple[int, int, int, int]:
    atom = mol.atoms[index]
    return (ATOMIC_NUMBER.get(atom.element, 0), degree, atom.formal_charge, int(atom.aromatic))


def morgan_codes(mol: LigandMolecule, radius: int = 2) -> List[List[int]]:
    """各ラウンドの原子コード。 ``result[r][i]`` がラウンド r の原子 i のコード"""
    if radius < 0:
        raise ArgumentError(f"radius must be >= 0, got {radius}")
    neighbors = mol.neighbors()
    codes = [fnv1a_64(_initial_invariant(mol, i, len(neighbors[i]))) for i in range(len(mol.atoms))]
    rounds = [codes]
    for r in range(1, radius + 1):
        previous = rounds[-1]
        current = []
        for i, own in enumerate(previous):
            if len(neighbors[i]) == 0:
                current.append(own)
                continue
            environment = sorted((int(order), previous[j]) for j, order in neighbors[i])
            values = [r, own]
            for order, code in environment:
                values.extend((order, code))
            current.append(fnv1a_64(values))
        rounds.append(current)
    return rounds


def morgan_fingerprint(mol: LigandMolecule, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """Morgan フィンガープリント（バイナリ）

    Args:
        mol(LigandMolecule): 重原子1個以上の分子
        radius(int): 近傍半径
        nbits(int): ビット長

    Return:
        Fingerprint: 全ラウンドの全コードについて ``code % nbits`` を立てたビット列
    """
    if nbits <= 0:
        raise ArgumentError(f"nbits must be positive, got {nbits}")
    if len(mol.atoms) == 0:
        raise ArgumentError(f"molecule {mol.id} has no atoms")
    indices = {code % nbits for codes in morgan_codes(mol, radius) for code in codes}
    return Fingerprint.from_indices(indices, nbits=nbits, radius=radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits:
        raise ArgumentError(f"fingerprint lengths differ: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).count(1)
    if union == 0:
        return 1.0
    return (a.bits & b.bits).count(1) / union


def tanimoto_matrix(fingerprints: Sequence[Fingerprint]) -> np.ndarray:
    """全ペアの Tanimoto 類似度行列（:func:`tanimoto` と同じ値）"""
    if len(fingerprints) == 0:
        return np.zeros((0, 0))
    nbits = {fp.nbits for fp in fingerprints}
    if len(nbits) != 1:
        raise ArgumentError(f"fingerprint lengths differ: {sorted(nbits)}")
    x = np.stack([np.frombuffer(fp.bits.unpack(), dtype=np.uint8) for fp in fingerprints]).astype(np.int64)
    inter = x @ x.T
    counts = x.sum(axis=1)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return sim


def protein_kmer_set(sequence: str, k: int = 3) -> KmerSet:
    """配列のスライディングウィンドウ k-mer 集合"""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(sequence) < k:
        raise ArgumentError(f"sequence of length {len(sequence)} is shorter than k={k}")
    unknown = set(sequence) - PROTEIN_ALPHABET
    if unknown:
        raise ArgumentError(f"sequence contains letters outside the amino-acid alphabet: {sorted(unknown)}")
    return KmerSet(kmers=frozenset(sequence[i : i + k] for i in range(len(sequence) - k + 1)), k=k)


def jaccard(a: KmerSet, b: KmerSet) -> float:
    if a.k != b.k:
        raise ArgumentError(f"k-mer lengths differ: {a.k} vs {b.k}")
    union = len(a.kmers | b.kmers)
    if union == 0:
        return 1.0
    return len(a.kmers & b.kmers) / union


def jaccard_matrix(sets: Sequence[KmerSet]) -> np.ndarray:
    n = len(sets)
    sim = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = jaccard(sets[i], sets[j])
    return sim
