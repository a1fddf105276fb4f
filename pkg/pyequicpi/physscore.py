"""
Vina 型の経験的分子間スコアと再ランキング

リガンド重原子とタンパク質重原子の 8 Å 以内の全ペアについて、表面間距離 d = r − R_i − R_j の関数
（gauss1, gauss2, repulsion, hydrophobic, hbond）を重み付きで合計し、回転可能結合数で割る。
各項の合計は ``math.fsum`` で行うため、原子の並び順に依存しない。
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from scipy.spatial import cKDTree
from pyequicpi.helper import SysLog, ArgumentError, ValidationError
from pyequicpi.chemio import BondOrder, ComplexRecord, LigandMolecule, ProteinStructure

logger = SysLog.logger

INTERACTION_CUTOFF = 8.0

VDW_RADII: Dict[str, float] = {
    "C": 1.9,
    "N": 1.8,
    "O": 1.7,
    "S": 2.0,
    "P": 2.1,
    "F": 1.5,
    "Cl": 1.8,
    "Br": 2.0,
    "I": 2.2,
}
DEFAULT_VDW_RADIUS = 1.9

COVALENT_RADII: Dict[str, float] = {"C": 0.76, "N": 0.71, "O": 0.66, "S": 1.05, "P": 1.07, "Se": 1.20}
DEFAULT_COVALENT_RADIUS = 0.80
BOND_TOLERANCE = 0.45

# (residue, atom) -> (donor, acceptor)
PROTEIN_POLAR_ATOMS: Dict[Tuple[str, str], Tuple[bool, bool]] = {
    ("SER", "OG"): (True, True),
    ("THR", "OG1"): (True, True),
    ("TYR", "OH"): (True, True),
    ("ASN", "OD1"): (False, True),
    ("ASN", "ND2"): (True, False),
    ("GLN", "OE1"): (False, True),
    ("GLN", "NE2"): (True, False),
    ("ASP", "OD1"): (False, True),
    ("ASP", "OD2"): (False, True),
    ("GLU", "OE1"): (False, True),
    ("GLU", "OE2"): (False, True),
    ("LYS", "NZ"): (True, False),
    ("ARG", "NE"): (True, False),
    ("ARG", "NH1"): (True, False),
    ("ARG", "NH2"): (True, False),
    ("HIS", "ND1"): (True, True),
    ("HIS", "NE2"): (True, True),
    ("TRP", "NE1"): (True, False),
    ("PRO", "N"): (False, False),
}

_VALENCE = {"N": 3, "O": 2}


@dataclass(frozen=True)
class VinaWeights:
    """スコア関数の重み（kcal/mol）"""

    w_gauss1: float = -0.0356
    w_gauss2: float = -0.00516
    w_repulsion: float = 0.840
    w_hydrophobic: float = -0.0351
    w_hbond: float = -0.587
    w_rot: float = 0.0585

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value):
                raise ValidationError(f"vina weight {name} must be finite, got {value}")


@dataclass(frozen=True)
class AtomTyping:
    """重原子ごとの型情報（配列は原子順）"""

    positions: np.ndarray
    radii: np.ndarray
    hydrophobic: np.ndarray
    donor: np.ndarray
    acceptor: np.ndarray

    def __len__(self):
        return len(self.radii)


@dataclass(frozen=True)
class VinaTerms:
    """重み付け前の各項と最終スコア"""

    gauss1: float
    gauss2: float
    repulsion: float
    hydrophobic: float
    hbond: float
    n_torsional: int
    e_inter: float
    score: float
    n_pairs: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ScoredPose:
    """再ランキング結果の1ポーズ

    Args:
        pose_index(int): 入力順の番号
        e_vina(float): Vina スコア (kcal/mol)
        upstream_confidence(float): 学習側スコア（無ければ None）
        fused(float): 融合スコア。大きいほど良い。upstream_confidence がある場合のみ
        rank(int): 0 が最良
    """

    pose_index: int
    e_vina: float
    upstream_confidence: Optional[float] = None
    fused: Optional[float] = None
    rank: int = 0


def ramp(d: np.ndarray, a: float, b: float) -> np.ndarray:
    """d ≤ a で 1、d ≥ b で 0、その間は線形"""
    return np.clip((b - np.asarray(d, dtype=np.float64)) / (b - a), 0.0, 1.0)


def _vdw_radius(element: str) -> float:
    return VDW_RADII.get(element, DEFAULT_VDW_RADIUS)


def ligand_typing(mol: LigandMolecule) -> AtomTyping:
    """リガンドの型付け

    疎水性: 炭素で、隣接重原子が全て炭素。H 結合: N/O。原子価から暗黙水素を推定し、水素を持てばドナー。
    O は常にアクセプター、N は水素を持たず正電荷でない場合にアクセプター。
    """
    neighbors = mol.neighbors()
    n = len(mol.atoms)
    hydrophobic = np.zeros(n, dtype=bool)
    donor = np.zeros(n, dtype=bool)
    acceptor = np.zeros(n, dtype=bool)
    for i, atom in enumerate(mol.atoms):
        if atom.element == "C":
            hydrophobic[i] = all(mol.atoms[j].element == "C" for j, _ in neighbors[i])
        elif atom.element in _VALENCE:
            bond_sum = sum(1.5 if order == BondOrder.AROMATIC else float(order) for _, order in neighbors[i])
            implicit_h = int(math.floor(_VALENCE[atom.element] + atom.formal_charge - bond_sum + 1e-9))
            donor[i] = implicit_h > 0
            if atom.element == "O":
                acceptor[i] = True
            else:
                acceptor[i] = implicit_h <= 0 and atom.formal_charge <= 0
    return AtomTyping(
        positions=mol.positions,
        radii=np.array([_vdw_radius(a.element) for a in mol.atoms]),
        hydrophobic=hydrophobic,
        donor=donor,
        acceptor=acceptor,
    )


def _covalent_radius(element: str) -> float:
    return COVALENT_RADII.get(element, DEFAULT_COVALENT_RADIUS)


def receptor_typing(protein: ProteinStructure) -> AtomTyping:
    """タンパク質重原子の型付け

    結合は共有結合半径の和 + 0.45 Å 以内の原子対とみなす（cKDTree で探索）。
    疎水性は炭素で隣接重原子が全て炭素のもの。極性原子は残基・原子名の表で決め、表に無い N はドナー、O はアクセプター。

    Raises:
        ArgumentError: 重原子が無い
    """
    if len(protein.atoms) == 0:
        raise ArgumentError(f"{protein.id}: protein has no heavy atoms for scoring")
    positions = protein.atom_positions
    elements = [a.element for a in protein.atoms]
    radii_cov = np.array([_covalent_radius(e) for e in elements])
    tree = cKDTree(positions)
    pairs = tree.query_pairs(r=2.0 * float(radii_cov.max()) + BOND_TOLERANCE, output_type="ndarray")
    heteroatom_neighbor = np.zeros(len(elements), dtype=bool)
    if len(pairs):
        d = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]], axis=1)
        bonded = pairs[d <= radii_cov[pairs[:, 0]] + radii_cov[pairs[:, 1]] + BOND_TOLERANCE]
        for i, j in bonded:
            if elements[j] != "C":
                heteroatom_neighbor[i] = True
            if elements[i] != "C":
                heteroatom_neighbor[j] = True
    hydrophobic = np.array([e == "C" for e in elements]) & ~heteroatom_neighbor
    donor = np.zeros(len(elements), dtype=bool)
    acceptor = np.zeros(len(elements), dtype=bool)
    for i, atom in enumerate(protein.atoms):
        if atom.element not in _VALENCE:
            continue
        key = (atom.residue_name, atom.name)
        if key in PROTEIN_POLAR_ATOMS:
            donor[i], acceptor[i] = PROTEIN_POLAR_ATOMS[key]
        elif atom.element == "N":
            donor[i] = True
        else:
            acceptor[i] = True
    return AtomTyping(
        positions=positions,
        radii=np.array([_vdw_radius(e) for e in elements]),
        hydrophobic=hydrophobic,
        donor=donor,
        acceptor=acceptor,
    )


def _in_ring(mol: LigandMolecule, i: int, j: int, neighbors) -> bool:
    """結合 i–j を除いても i から j へ到達できれば環の一部"""
    seen = {i}
    stack = [i]
    while stack:
        a = stack.pop()
        for b, _ in neighbors[a]:
            if (a, b) in ((i, j), (j, i)) or b in seen:
                continue
            if b == j:
                return True
            seen.add(b)
            stack.append(b)
    return False


def rotatable_bonds(mol: LigandMolecule) -> List[Tuple[int, int]]:
    """単結合・非環・両端とも重原子次数 2 以上の結合"""
    neighbors = mol.neighbors()
    result = []
    for bond in mol.bonds:
        if bond.order != BondOrder.SINGLE:
            continue
        if len(neighbors[bond.i]) < 2 or len(neighbors[bond.j]) < 2:
            continue
        if _in_ring(mol, bond.i, bond.j, neighbors):
            continue
        result.append((bond.i, bond.j))
    return result


def vina_terms(
    ligand: LigandMolecule, protein: Union[ProteinStructure, AtomTyping], weights: Optional[VinaWeights] = None
) -> VinaTerms:
    """項ごとの合計とスコア

    Args:
        ligand: リガンドのポーズ
        protein: タンパク質（:func:`receptor_typing` 済みの ``AtomTyping`` も可）
        weights: 重み

    Raises:
        ArgumentError: 空のポーズ
    """
    if len(ligand.atoms) == 0:
        raise ArgumentError(f"pose {ligand.id!r} has no heavy atoms")
    weights = weights or VinaWeights()
    rec = protein if isinstance(protein, AtomTyping) else receptor_typing(protein)
    lig = ligand_typing(ligand)
    r = np.linalg.norm(lig.positions[:, None, :] - rec.positions[None, :, :], axis=2)
    li, ri = np.nonzero(r < INTERACTION_CUTOFF)
    d = r[li, ri] - lig.radii[li] - rec.radii[ri]
    hydrophobic_pair = lig.hydrophobic[li] & rec.hydrophobic[ri]
    hbond_pair = (lig.donor[li] & rec.acceptor[ri]) | (lig.acceptor[li] & rec.donor[ri])

    gauss1 = math.fsum(np.exp(-((d / 0.5) ** 2)))
    gauss2 = math.fsum(np.exp(-(((d - 3.0) / 2.0) ** 2)))
    repulsion = math.fsum(np.where(d < 0.0, d * d, 0.0))
    hydrophobic = math.fsum(ramp(d[hydrophobic_pair], 0.5, 1.5))
    hbond = math.fsum(ramp(d[hbond_pair], -0.7, 0.0))
    e_inter = math.fsum(
        [
            weights.w_gauss1 * gauss1,
            weights.w_gauss2 * gauss2,
            weights.w_repulsion * repulsion,
            weights.w_hydrophobic * hydrophobic,
            weights.w_hbond * hbond,
        ]
    )
    n_torsional = len(rotatable_bonds(ligand))
    score = e_inter / (1.0 + weights.w_rot * n_torsional)
    return VinaTerms(gauss1, gauss2, repulsion, hydrophobic, hbond, n_torsional, e_inter, score, int(len(d)))


def vina_score(
    ligand: LigandMolecule, protein: Union[ProteinStructure, AtomTyping], weights: Optional[VinaWeights] = None
) -> float:
    """Vina 型スコア (kcal/mol)。低いほど良い"""
    return vina_terms(ligand, protein, weights).score


def zscore(values: Sequence[float]) -> np.ndarray:
    """標本標準偏差 (ddof=1) による標準化。要素数 1 や分散ゼロでは 0"""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        return np.zeros_like(x)
    std = float(np.std(x, ddof=1))
    if std == 0.0 or not math.isfinite(std):
        return np.zeros_like(x)
    return (x - x.mean()) / std


def fuse_scores(
    confidences: Sequence[float],
    energies: Sequence[float],
    lambda_: float = 1.0,
    alpha: float = 1.0,
    check_range: bool = True,
) -> np.ndarray:
    """fused = λ·p − α·z(e_vina)

    エネルギーはポーズ集合内で標準化し、符号を反転して「大きいほど良い」に揃える。

    Raises:
        ArgumentError: 長さ不一致、または信頼度が [0, 1] 外（``check_range`` 時）
    """
    p = np.asarray(confidences, dtype=np.float64)
    e = np.asarray(energies, dtype=np.float64)
    if p.shape != e.shape or p.ndim != 1:
        raise ArgumentError(f"confidences {p.shape} and energies {e.shape} must be 1-D of equal length")
    if check_range and np.any((p < 0.0) | (p > 1.0)):
        raise ArgumentError("confidences must be within [0, 1]")
    return lambda_ * p - alpha * zscore(e)


def score_poses(
    poses: Sequence[LigandMolecule],
    protein: Union[ProteinStructure, AtomTyping],
    weights: Optional[VinaWeights] = None,
    map_fn: Callable = map,
) -> List[float]:
    """ポーズごとの Vina スコア（``map_fn`` に executor.map を渡せば並列化、順序は入力順）"""
    rec = protein if isinstance(protein, AtomTyping) else receptor_typing(protein)
    return list(map_fn(lambda pose: vina_score(pose, rec, weights), poses))


def rerank_poses(
    poses: Sequence[LigandMolecule],
    protein: Union[ProteinStructure, AtomTyping],
    weights: Optional[VinaWeights] = None,
    lambda_: float = 1.0,
    alpha: float = 1.0,
    confidences: Optional[Sequence[Optional[float]]] = None,
    learned_scores: Optional[Sequence[float]] = None,
    map_fn: Callable = map,
) -> List[ScoredPose]:
    """ポーズを Vina スコアで評価し、良い順に並べる

    学習側スコアは ``learned_scores`` （任意の実数、例えば符号を反転した予測値）、``confidences``、
    各ポーズの SDF 項目 ``confidence`` の順に探す。全ポーズにスコアがあれば融合スコアの降順、
    無ければ e_vina の昇順。同点は pose_index の昇順。

    Raises:
        ArgumentError: ポーズが無い、または一部のポーズだけに信頼度がある
    """
    if len(poses) == 0:
        raise ArgumentError("no poses to rerank")
    energies = score_poses(poses, protein, weights, map_fn)
    check_range = learned_scores is None
    if learned_scores is not None:
        scores = list(learned_scores)
    elif confidences is not None:
        scores = list(confidences)
    else:
        scores = [pose.confidence for pose in poses]
    if len(scores) != len(poses):
        raise ArgumentError(f"{len(scores)} scores given for {len(poses)} poses")
    present = [s is not None for s in scores]
    if any(present) and not all(present):
        raise ArgumentError("upstream confidence is present for some poses only")

    if all(present):
        fused = fuse_scores(scores, energies, lambda_, alpha, check_range=check_range)
        order = sorted(range(len(poses)), key=lambda i: (-fused[i], i))
        scored = {i: ScoredPose(i, energies[i], float(scores[i]), float(fused[i])) for i in order}
    else:
        order = sorted(range(len(poses)), key=lambda i: (energies[i], i))
        scored = {i: ScoredPose(i, energies[i]) for i in order}
    ranked = []
    for rank, i in enumerate(order):
        pose = scored[i]
        ranked.append(ScoredPose(pose.pose_index, pose.e_vina, pose.upstream_confidence, pose.fused, rank))
    logger.debug(f"reranked {len(poses)} poses; best pose {ranked[0].pose_index} (e_vina {ranked[0].e_vina:.3f})")
    return ranked


def select_pose(
    record: ComplexRecord, weights: Optional[VinaWeights] = None, lambda_: float = 1.0, alpha: float = 1.0
) -> LigandMolecule:
    """複数ポーズを持つ記録から、再ランキングの最上位ポーズを返す"""
    if len(record.poses) <= 1:
        return record.ligand
    ranked = rerank_poses(record.poses, record.protein, weights, lambda_, alpha)
    return record.poses[ranked[0].pose_index]
