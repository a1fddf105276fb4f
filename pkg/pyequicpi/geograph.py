"""
ヘテロ幾何グラフの構築

ノードはリガンド重原子（先頭）とタンパク質残基 Cα（後続）。エッジは種類ごとのカットオフ
（cc: リガンド-リガンド, pp: 残基-残基, pc: 残基-リガンド）以内の全ペアを両方向で持ち、
相対ベクトル・距離・RBF 埋め込みを属性とする。
"""
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from scipy.spatial import cKDTree
from pyequicpi.helper import SysLog, ArgumentError
from pyequicpi.chemio import ComplexRecord, LigandMolecule, ProteinStructure, RESIDUE_CLASSES

logger = SysLog.logger

LIGAND_ELEMENTS = ("C", "N", "O", "S", "P", "F", "Cl", "Br", "I")
MAX_DEGREE = 5
CHARGE_RANGE = (-2, 2)
LIGAND_FEATURE_WIDTH = len(LIGAND_ELEMENTS) + 1 + (MAX_DEGREE + 1) + (CHARGE_RANGE[1] - CHARGE_RANGE[0] + 1) + 1
RESIDUE_FEATURE_WIDTH = len(RESIDUE_CLASSES)
NODE_FEATURE_WIDTH = LIGAND_FEATURE_WIDTH + RESIDUE_FEATURE_WIDTH

WARNING_NO_PC_EDGES = "no_pc_edges"


class NodeKind(IntEnum):
    LIGAND_ATOM = 0
    RESIDUE = 1


class EdgeKind(IntEnum):
    CC = 0
    PP = 1
    PC = 2

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class CutoffConfig:
    """エッジのカットオフと RBF の設定

    Args:
        cc(float): リガンド原子間カットオフ (Å)
        pp(float): 残基間カットオフ (Å)
        pc(float): 残基-リガンド間カットオフ (Å)
        rbf_k(int): 基底関数の数
        rbf_gamma(float): 幅 γ。None の場合 10 / ν_max
        rbf_nu_min(float): 最初の中心
        rbf_nu_max(float): 最後の中心。None の場合カットオフの最大値
    """

    cc: float = 5.0
    pp: float = 15.0
    pc: float = 10.0
    rbf_k: int = 32
    rbf_gamma: Optional[float] = None
    rbf_nu_min: float = 0.0
    rbf_nu_max: Optional[float] = None

    def __post_init__(self):
        if min(self.cc, self.pp, self.pc) <= 0:
            raise ArgumentError(f"cutoffs must be positive: cc={self.cc} pp={self.pp} pc={self.pc}")
        if self.rbf_k < 2:
            raise ArgumentError(f"rbf_k must be >= 2, got {self.rbf_k}")
        if not self.rbf_nu_min < self.nu_max:
            raise ArgumentError(f"rbf_nu_min ({self.rbf_nu_min}) must be below rbf_nu_max ({self.nu_max})")
        if self.gamma <= 0:
            raise ArgumentError(f"rbf_gamma must be positive, got {self.gamma}")

    @property
    def nu_max(self) -> float:
        return float(self.rbf_nu_max) if self.rbf_nu_max is not None else float(max(self.cc, self.pp, self.pc))

    @property
    def gamma(self) -> float:
        return float(self.rbf_gamma) if self.rbf_gamma is not None else 10.0 / self.nu_max

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.rbf_nu_min, self.nu_max, self.rbf_k)

    def cutoff(self, kind: EdgeKind) -> float:
        return {EdgeKind.CC: self.cc, EdgeKind.PP: self.pp, EdgeKind.PC: self.pc}[kind]


def rbf_embed(dist: Union[float, np.ndarray], cfg: CutoffConfig) -> np.ndarray:
    """μ_i = exp(−γ (d − ν_i)²)

    スカラーなら長さ k、配列なら末尾に k 次元を追加した配列を返す。
    """
    d = np.asarray(dist, dtype=np.float64)
    if np.any(d < 0):
        raise ArgumentError("distance must be non-negative")
    return np.exp(-cfg.gamma * (d[..., None] - cfg.centers) ** 2)


def rbf_derivative(dist: Union[float, np.ndarray], cfg: CutoffConfig) -> np.ndarray:
    """∂μ_i/∂d = −2γ (d − ν_i) μ_i"""
    d = np.asarray(dist, dtype=np.float64)
    return -2.0 * cfg.gamma * (d[..., None] - cfg.centers) * rbf_embed(d, cfg)


def ligand_atom_features(mol: LigandMolecule) -> np.ndarray:
    """元素 one-hot (C,N,O,S,P,F,Cl,Br,I,other) ⊕ 次数 0–5 ⊕ 形式電荷 −2..2 ⊕ 芳香族"""
    features = np.zeros((len(mol.atoms), LIGAND_FEATURE_WIDTH))
    neighbors = mol.neighbors()
    degree_offset = len(LIGAND_ELEMENTS) + 1
    charge_offset = degree_offset + MAX_DEGREE + 1
    for i, atom in enumerate(mol.atoms):
        element = LIGAND_ELEMENTS.index(atom.element) if atom.element in LIGAND_ELEMENTS else len(LIGAND_ELEMENTS)
        features[i, element] = 1.0
        features[i, degree_offset + min(len(neighbors[i]), MAX_DEGREE)] = 1.0
        charge = min(max(atom.formal_charge, CHARGE_RANGE[0]), CHARGE_RANGE[1])
        features[i, charge_offset + charge - CHARGE_RANGE[0]] = 1.0
        features[i, -1] = float(atom.aromatic)
    return features


def residue_features(protein: ProteinStructure) -> np.ndarray:
    features = np.zeros((len(protein.residues), RESIDUE_FEATURE_WIDTH))
    for i, residue in enumerate(protein.residues):
        features[i, RESIDUE_CLASSES.index(residue.aa)] = 1.0
    return features


def _distances(pa: np.ndarray, pb: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    diff = pb[j] - pa[i]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def neighbor_pairs(
    pa: np.ndarray, pb: Optional[np.ndarray], cutoff: float, method: str = "brute"
) -> Tuple[np.ndarray, np.ndarray]:
    """カットオフ以内の点ペア

    ``pb`` が None の場合は ``pa`` 内部の i < j ペア、それ以外は ``pa`` × ``pb`` の全ペア。
    ``method`` が ``"kdtree"`` でも、最終判定は総当たりと同じ距離式で行うため結果は一致する。

    Return:
        Tuple[ndarray, ndarray]: (i, j) を辞書順に並べたインデックス配列
    """
    same = pb is None
    pb = pa if same else pb
    if len(pa) == 0 or len(pb) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if method == "brute":
        i, j = np.meshgrid(np.arange(len(pa)), np.arange(len(pb)), indexing="ij")
        i, j = i.ravel(), j.ravel()
    elif method == "kdtree":
        radius = cutoff * (1.0 + 1e-9) + 1e-9
        candidates = cKDTree(pa).query_ball_tree(cKDTree(pb), radius)
        i = np.array([a for a, hits in enumerate(candidates) for _ in hits], dtype=np.int64)
        j = np.array([b for hits in candidates for b in sorted(hits)], dtype=np.int64)
    else:
        raise ArgumentError(f"unknown neighbour search method {method!r}")
    if same:
        keep = i < j
        i, j = i[keep], j[keep]
    keep = _distances(pa, pb, i, j) <= cutoff
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    return i[order].astype(np.int64), j[order].astype(np.int64)


@dataclass(frozen=True)
class HeteroGraph:
    """複合体のヘテロ幾何グラフ

    エッジは (a, b) の辞書順で並び、``r_vec = position_b − position_a`` 。
    メッセージは b から a へ流れる（a の近傍 N_a に b が属する）。
    """

    complex_id: str
    node_kind: np.ndarray
    features: np.ndarray
    positions: np.ndarray
    edge_index: np.ndarray
    edge_kind: np.ndarray
    r_vec: np.ndarray
    dist: np.ndarray
    rbf: np.ndarray
    cutoff: CutoffConfig = field(default_factory=CutoffConfig)
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("node_kind", "features", "positions", "edge_index", "edge_kind", "r_vec", "dist", "rbf"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_kind)

    @property
    def n_edges(self) -> int:
        return len(self.edge_kind)

    @property
    def n_ligand(self) -> int:
        return int(np.sum(self.node_kind == NodeKind.LIGAND_ATOM))

    def edge_count(self, kind: EdgeKind) -> int:
        return int(np.sum(self.edge_kind == kind))

    def with_positions(self, positions: np.ndarray) -> "HeteroGraph":
        """同じエッジ集合のまま、位置を差し替えて幾何属性を再計算する"""
        positions = np.array(positions, dtype=np.float64)
        r_vec, dist, rbf = _edge_geometry(positions, self.edge_index, self.cutoff)
        return HeteroGraph(
            complex_id=self.complex_id,
            node_kind=self.node_kind.copy(),
            features=self.features.copy(),
            positions=positions,
            edge_index=self.edge_index.copy(),
            edge_kind=self.edge_kind.copy(),
            r_vec=r_vec,
            dist=dist,
            rbf=rbf,
            cutoff=self.cutoff,
            warnings=self.warnings,
        )

    def to_dict(self) -> Dict:
        """デバッグ用 JSON ダンプ"""
        return {
            "complex_id": self.complex_id,
            "warnings": list(self.warnings),
            "nodes": [
                {
                    "kind": NodeKind(int(kind)).name,
                    "position": [float(c) for c in pos],
                    "features": [int(k) for k in np.flatnonzero(feat)],
                }
                for kind, pos, feat in zip(self.node_kind, self.positions, self.features)
            ],
            "edges": [
                {
                    "a": int(a),
                    "b": int(b),
                    "kind": EdgeKind(int(kind)).label,
                    "r_vec": [float(c) for c in r],
                    "dist": float(d),
                    "rbf": [float(v) for v in mu],
                }
                for (a, b), kind, r, d, mu in zip(self.edge_index, self.edge_kind, self.r_vec, self.dist, self.rbf)
            ],
        }


def _edge_geometry(positions: np.ndarray, edge_index: np.ndarray, cfg: CutoffConfig):
    a, b = edge_index[:, 0], edge_index[:, 1]
    r_vec = positions[b] - positions[a]
    dist = np.sqrt(np.sum(r_vec * r_vec, axis=-1))
    return r_vec, dist, rbf_embed(dist, cfg).reshape(len(dist), cfg.rbf_k)


def build_graph(
    record: ComplexRecord,
    cfg: Optional[CutoffConfig] = None,
    ligand: Optional[LigandMolecule] = None,
    method: str = "brute",
) -> HeteroGraph:
    """ComplexRecord からヘテロ幾何グラフを構築する

    Args:
        record(ComplexRecord): 複合体
        cfg(CutoffConfig): カットオフ設定
        ligand(LigandMolecule): 使用するポーズ。省略時は ``record.ligand``
        method(str): 近傍探索 ``"brute"`` または ``"kdtree"``

    Return:
        HeteroGraph: pc エッジが無い場合は ``warnings`` に ``no_pc_edges`` を含む
    """
    cfg = cfg or CutoffConfig()
    ligand = ligand or record.ligand
    if len(ligand.atoms) == 0:
        raise ArgumentError(f"{record.complex_id}: ligand has no heavy atoms")
    n_lig = len(ligand.atoms)
    lig_pos = ligand.positions
    res_pos = record.protein.ca_positions
    positions = np.concatenate([lig_pos, res_pos], axis=0)

    features = np.zeros((len(positions), NODE_FEATURE_WIDTH))
    features[:n_lig, :LIGAND_FEATURE_WIDTH] = ligand_atom_features(ligand)
    features[n_lig:, LIGAND_FEATURE_WIDTH:] = residue_features(record.protein)
    node_kind = np.array([NodeKind.LIGAND_ATOM] * n_lig + [NodeKind.RESIDUE] * len(res_pos), dtype=np.int64)

    sources: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    kinds: List[np.ndarray] = []
    for kind, pa, pb, off_a, off_b in (
        (EdgeKind.CC, lig_pos, None, 0, 0),
        (EdgeKind.PP, res_pos, None, n_lig, n_lig),
        (EdgeKind.PC, lig_pos, res_pos, 0, n_lig),
    ):
        i, j = neighbor_pairs(pa, pb, cfg.cutoff(kind), method=method)
        i, j = i + off_a, j + off_b
        sources.extend((i, j))
        targets.extend((j, i))
        kinds.append(np.full(2 * len(i), int(kind), dtype=np.int64))
    a = np.concatenate(sources)
    b = np.concatenate(targets)
    edge_kind = np.concatenate(kinds)
    order = np.lexsort((b, a))
    edge_index = np.stack([a[order], b[order]], axis=1).astype(np.int64).reshape(-1, 2)
    edge_kind = edge_kind[order]
    r_vec, dist, rbf = _edge_geometry(positions, edge_index, cfg)

    warnings: Tuple[str, ...] = ()
    if not np.any(edge_kind == EdgeKind.PC):
        logger.warning(f"{record.complex_id}: no protein-ligand edges within {cfg.pc} Å (ligand outside pocket?)")
        warnings = (WARNING_NO_PC_EDGES,)
    logger.debug(f"{record.complex_id}: graph with {len(positions)} nodes and {len(edge_kind)} edges")
    return HeteroGraph(
        complex_id=record.complex_id,
        node_kind=node_kind,
        features=features,
        positions=positions,
        edge_index=edge_index,
        edge_kind=edge_kind,
        r_vec=r_vec,
        dist=dist,
        rbf=rbf,
        cutoff=cfg,
        warnings=warnings,
    )


@dataclass(frozen=True)
class GraphBatch:
    """複数グラフの非連結和（ノード・エッジを連結し、エッジ添字をずらしたもの）"""

    graphs: Tuple[HeteroGraph, ...]
    node_kind: np.ndarray
    features: np.ndarray
    positions: np.ndarray
    edge_index: np.ndarray
    edge_kind: np.ndarray
    graph_of_node: np.ndarray

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    @property
    def n_nodes(self) -> int:
        return len(self.node_kind)


def merge_graphs(graphs: Sequence[HeteroGraph]) -> GraphBatch:
    if len(graphs) == 0:
        raise ArgumentError("cannot batch zero graphs")
    rbf_k = {g.rbf.shape[1] for g in graphs}
    if len(rbf_k) != 1:
        raise ArgumentError(f"graphs use different RBF sizes: {sorted(rbf_k)}")
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs[:-1]])
    return GraphBatch(
        graphs=tuple(graphs),
        node_kind=np.concatenate([g.node_kind for g in graphs]),
        features=np.concatenate([g.features for g in graphs], axis=0),
        positions=np.concatenate([g.positions for g in graphs], axis=0),
        edge_index=np.concatenate([g.edge_index + off for g, off in zip(graphs, offsets)], axis=0).reshape(-1, 2),
        edge_kind=np.concatenate([g.edge_kind for g in graphs]),
        graph_of_node=np.concatenate([np.full(g.n_nodes, k, dtype=np.int64) for k, g in enumerate(graphs)]),
    )
