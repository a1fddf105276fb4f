"""
ラベル正規化とデータ分割

EC50 (nM) を log10 モル濃度へ正規化し、化合物（Tanimoto）・タンパク質（k-mer Jaccard）の階層クラスタリングに基づく
k-fold cross-cluster 分割を作る。同じクラスタの記録は必ず同じ fold に入る。
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, TypeVar
import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from pyequicpi.helper import SysLog, ArgumentError, ValidationError
from pyequicpi.chemio import ComplexRecord
from pyequicpi.fingerprint import Fingerprint, KmerSet, jaccard_matrix, morgan_fingerprint, protein_kmer_set, tanimoto_matrix

logger = SysLog.logger

T = TypeVar("T")

LINKAGE_METHODS = ("complete", "single", "average")
_FIXED_POINT_ROUNDS = 100


def normalize_label(ec50_nm: float) -> float:
    """p = log10(EC50[nM] · 1e−9)

    Raises:
        ValidationError: EC50 が正の有限値でない
    """
    if not (ec50_nm > 0 and math.isfinite(ec50_nm)):
        raise ValidationError(f"ec50_nm must be a positive finite value, got {ec50_nm}")
    return math.log10(ec50_nm * 1e-9)


def denormalize_label(p: float) -> float:
    """:func:`normalize_label` の逆変換 10^(p+9)"""
    return 10.0 ** (p + 9.0)


class SplitSetting(Enum):
    NOVEL_PAIR = "novel_pair"
    NOVEL_COMPOUND = "novel_compound"
    NOVEL_PROTEIN = "novel_protein"

    @classmethod
    def from_name(cls, name) -> "SplitSetting":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for setting in cls:
            if key == setting.value:
                return setting
        raise ArgumentError(f"unknown split setting {name!r}; choose from {[s.value for s in cls]}")

    @property
    def uses_compounds(self) -> bool:
        return self in (SplitSetting.NOVEL_PAIR, SplitSetting.NOVEL_COMPOUND)

    @property
    def uses_proteins(self) -> bool:
        return self in (SplitSetting.NOVEL_PAIR, SplitSetting.NOVEL_PROTEIN)


@dataclass(frozen=True)
class SplitConfig:
    """分割設定

    Args:
        compound_threshold(float): 化合物クラスタの Tanimoto 閾値
        protein_threshold(float): タンパク質クラスタの Jaccard 閾値
        kmer(int): タンパク質 k-mer の長さ
        folds(int): fold 数
        linkage(str): ``complete`` / ``single`` / ``average``
    """

    compound_threshold: float = 0.4
    protein_threshold: float = 0.5
    kmer: int = 3
    folds: int = 5
    linkage: str = "complete"

    def __post_init__(self):
        for name in ("compound_threshold", "protein_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} must be within (0, 1), got {value}")
        if self.kmer < 1:
            raise ValidationError(f"kmer must be >= 1, got {self.kmer}")
        if self.folds < 2:
            raise ValidationError(f"folds must be >= 2, got {self.folds}")
        if self.linkage not in LINKAGE_METHODS:
            raise ValidationError(f"linkage must be one of {LINKAGE_METHODS}, got {self.linkage!r}")


@dataclass(frozen=True)
class SplitItem:
    """分割対象の1記録（化合物フィンガープリントとタンパク質 k-mer 集合）"""

    record_id: str
    fingerprint: Fingerprint
    kmers: KmerSet


def split_items_from_records(
    records: Sequence[ComplexRecord], cfg: Optional[SplitConfig] = None, radius: int = 2, nbits: int = 2048
) -> List[SplitItem]:
    cfg = cfg or SplitConfig()
    return [
        SplitItem(
            record_id=r.complex_id,
            fingerprint=morgan_fingerprint(r.ligand, radius=radius, nbits=nbits),
            kmers=protein_kmer_set(r.protein.sequence, cfg.kmer),
        )
        for r in records
    ]


def cluster_similarity_matrix(similarity: np.ndarray, threshold: float, method: str = "complete") -> List[int]:
    """類似度行列の凝集型クラスタリング

    距離 1 − 類似度 で併合し、クラスタ間距離が 1 − threshold を超えた時点で止める。
    クラスタ番号は最初に現れる要素の順に 0 から振り直す。

    Args:
        similarity: (n, n) 対称行列
        threshold(float): 類似度閾値 (0, 1)
        method(str): 連結法

    Return:
        List[int]: 要素ごとのクラスタ番号
    """
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must be within (0, 1), got {threshold}")
    if method not in LINKAGE_METHODS:
        raise ArgumentError(f"unknown linkage {method!r}")
    sim = np.asarray(similarity, dtype=np.float64)
    n = sim.shape[0] if sim.ndim == 2 else 0
    if sim.ndim != 2 or sim.shape != (n, n):
        raise ArgumentError(f"similarity must be a square matrix, got shape {sim.shape}")
    if n == 0:
        return []
    if n == 1:
        return [0]
    dist = np.clip(1.0 - (sim + sim.T) / 2.0, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    tree = linkage(squareform(dist, checks=False), method=method)
    raw = fcluster(tree, t=1.0 - threshold, criterion="distance")
    relabel: Dict[int, int] = {}
    return [relabel.setdefault(int(c), len(relabel)) for c in raw]


def hierarchical_cluster(
    items: Sequence[T], similarity: Callable[[T, T], float], threshold: float, method: str = "complete"
) -> List[int]:
    """任意の類似度関数による凝集型クラスタリング（:func:`cluster_similarity_matrix` を参照）"""
    n = len(items)
    sim = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = similarity(items[i], items[j])
    return cluster_similarity_matrix(sim, threshold, method)


def _cluster_unique(keys: Sequence[Hashable], matrix_of: Callable[[List[int]], np.ndarray], threshold, method):
    """同一キーの要素は1つにまとめてからクラスタリングする"""
    first: Dict[Hashable, int] = {}
    for i, key in enumerate(keys):
        first.setdefault(key, i)
    representatives = list(first.values())
    labels = cluster_similarity_matrix(matrix_of(representatives), threshold, method)
    label_of_key = {keys[i]: labels[n] for n, i in enumerate(representatives)}
    return [label_of_key[key] for key in keys]


def compound_clusters(items: Sequence[SplitItem], threshold: float, method: str = "complete") -> Dict[str, int]:
    keys = [it.fingerprint.bits.tobytes() for it in items]
    labels = _cluster_unique(keys, lambda idx: tanimoto_matrix([items[i].fingerprint for i in idx]), threshold, method)
    return {it.record_id: label for it, label in zip(items, labels)}


def protein_clusters(items: Sequence[SplitItem], threshold: float, method: str = "complete") -> Dict[str, int]:
    keys = [it.kmers.kmers for it in items]
    labels = _cluster_unique(keys, lambda idx: jaccard_matrix([items[i].kmers for i in idx]), threshold, method)
    return {it.record_id: label for it, label in zip(items, labels)}


@dataclass
class FoldAssignment:
    """fold 分割の結果

    Args:
        setting(SplitSetting): 分割設定
        folds(List[Tuple[str]]): fold ごとの記録ID（入力順）
        compound_cluster_of(Dict[str, int]): 記録 → 化合物クラスタ
        protein_cluster_of(Dict[str, int]): 記録 → タンパク質クラスタ
    """

    setting: SplitSetting
    folds: List[Tuple[str, ...]]
    compound_cluster_of: Dict[str, int] = field(default_factory=dict)
    protein_cluster_of: Dict[str, int] = field(default_factory=dict)

    @property
    def sizes(self) -> List[int]:
        return [len(f) for f in self.folds]

    @property
    def balance(self) -> float:
        """最小 fold と最大 fold の大きさの比（1.0 が均等）"""
        largest = max(self.sizes) if self.folds else 0
        return min(self.sizes) / largest if largest > 0 else 1.0

    def fold_of(self) -> Dict[str, int]:
        return {rid: k for k, fold in enumerate(self.folds) for rid in fold}

    def spanning_clusters(self, cluster_of: Dict[str, int]) -> List[int]:
        """複数の fold にまたがるクラスタ番号"""
        folds_of_cluster: Dict[int, set] = {}
        for rid, k in self.fold_of().items():
            if rid in cluster_of:
                folds_of_cluster.setdefault(cluster_of[rid], set()).add(k)
        return sorted(c for c, ks in folds_of_cluster.items() if len(ks) > 1)

    def to_dict(self) -> Dict:
        return {
            "setting": self.setting.value,
            "folds": [list(f) for f in self.folds],
            "sizes": self.sizes,
            "balance": self.balance,
            "compound_cluster_of": dict(sorted(self.compound_cluster_of.items())),
            "protein_cluster_of": dict(sorted(self.protein_cluster_of.items())),
        }


def _greedy_folds(groups: List[List[int]], k: int, rng: np.random.Generator) -> List[int]:
    """クラスタを大きい順（同じ大きさは乱数順）に、その時点で最小の fold へ置く。戻り値はグループごとの fold"""
    tiebreak = rng.permutation(len(groups))
    order = sorted(range(len(groups)), key=lambda g: (-len(groups[g]), tiebreak[g]))
    sizes = [0] * k
    fold_of_group = [0] * len(groups)
    for g in order:
        target = min(range(k), key=lambda f: (sizes[f], f))
        fold_of_group[g] = target
        sizes[target] += len(groups[g])
    return fold_of_group


def _groups(labels: Sequence[Hashable]) -> List[List[int]]:
    index: Dict[Hashable, int] = {}
    groups: List[List[int]] = []
    for i, label in enumerate(labels):
        if label not in index:
            index[label] = len(groups)
            groups.append([])
        groups[index[label]].append(i)
    return groups


def _majority_pass(fold: List[int], labels: Sequence[int]) -> bool:
    """各クラスタの全記録を、そのクラスタの最多 fold（同数は小さい番号）へ移す。変化があれば True"""
    changed = False
    for members in _groups(labels):
        counts = np.bincount([fold[i] for i in members])
        target = int(np.argmax(counts))
        for i in members:
            if fold[i] != target:
                fold[i] = target
                changed = True
    return changed


def _components(compound: Sequence[int], protein: Sequence[int]) -> List[int]:
    """化合物クラスタとタンパク質クラスタを辺とみなした連結成分の番号"""
    parent = list(range(len(compound)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for labels in (compound, protein):
        for members in _groups(labels):
            root = find(members[0])
            for i in members[1:]:
                parent[find(i)] = root
    return [find(i) for i in range(len(compound))]


def assign_folds(
    record_ids: Sequence[str],
    setting,
    k: int = 5,
    seed: int = 0,
    compound_cluster_of: Optional[Dict[str, int]] = None,
    protein_cluster_of: Optional[Dict[str, int]] = None,
) -> FoldAssignment:
    """クラスタ単位の k-fold 割り当て

    NOVEL_PAIR では化合物クラスタで割り当てた後、タンパク質クラスタ・化合物クラスタの順に多数派 fold への移動を
    不動点まで繰り返す。収束しなければ両クラスタの連結成分単位で割り当て直す。

    Raises:
        ArgumentError: k < 2、記録IDの重複、必要なクラスタ情報が無い
    """
    setting = SplitSetting.from_name(setting)
    if k < 2:
        raise ArgumentError(f"k must be >= 2, got {k}")
    ids = list(record_ids)
    if len(set(ids)) != len(ids):
        raise ArgumentError("record ids must be unique")
    for needed, mapping, name in (
        (setting.uses_compounds, compound_cluster_of, "compound"),
        (setting.uses_proteins, protein_cluster_of, "protein"),
    ):
        if needed and (mapping is None or any(rid not in mapping for rid in ids)):
            raise ArgumentError(f"{setting.value} requires a {name} cluster for every record")
    compound = [compound_cluster_of[rid] for rid in ids] if setting.uses_compounds else []
    protein = [protein_cluster_of[rid] for rid in ids] if setting.uses_proteins else []
    rng = np.random.default_rng(seed)
    n = len(ids)
    if n < k:
        logger.warning(f"{n} records cannot fill {k} folds; some folds stay empty")

    primary = compound if setting.uses_compounds else protein
    groups = _groups(primary)
    fold_of_group = _greedy_folds(groups, k, rng)
    fold = [0] * n
    for g, members in enumerate(groups):
        for i in members:
            fold[i] = fold_of_group[g]

    if setting == SplitSetting.NOVEL_PAIR:
        converged = False
        for _ in range(_FIXED_POINT_ROUNDS):
            changed = _majority_pass(fold, protein)
            changed = _majority_pass(fold, compound) or changed
            if not changed:
                converged = True
                break
        if not converged:
            logger.warning("novel-pair reassignment did not reach a fixed point; assigning connected components")
            groups = _groups(_components(compound, protein))
            fold_of_group = _greedy_folds(groups, k, np.random.default_rng(seed))
            for g, members in enumerate(groups):
                for i in members:
                    fold[i] = fold_of_group[g]

    limit = math.ceil(n / k) * 2
    for members in _groups(primary):
        if len(members) > limit:
            logger.warning(f"cluster of {len(members)} records exceeds {limit}; fold sizes will be unbalanced")

    assignment = FoldAssignment(
        setting=setting,
        folds=[tuple(ids[i] for i in range(n) if fold[i] == f) for f in range(k)],
        compound_cluster_of={rid: c for rid, c in zip(ids, compound)},
        protein_cluster_of={rid: c for rid, c in zip(ids, protein)},
    )
    logger.info(f"{setting.value}: fold sizes {assignment.sizes} (balance {assignment.balance:.3f})")
    return assignment


@dataclass
class FoldPairLeakage:
    folds: Tuple[int, int]
    max_compound_tanimoto: Optional[float]
    max_protein_jaccard: Optional[float]
    passed: bool

    def to_dict(self) -> Dict:
        return {
            "folds": list(self.folds),
            "max_compound_tanimoto": self.max_compound_tanimoto,
            "max_protein_jaccard": self.max_protein_jaccard,
            "passed": self.passed,
        }


@dataclass
class LeakageReport:
    """fold 間の類似度漏洩の検査結果"""

    setting: SplitSetting
    compound_threshold: float
    protein_threshold: float
    pairs: List[FoldPairLeakage] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.pairs)

    def to_dict(self) -> Dict:
        return {
            "setting": self.setting.value,
            "compound_threshold": self.compound_threshold,
            "protein_threshold": self.protein_threshold,
            "passed": self.passed,
            "pairs": [p.to_dict() for p in self.pairs],
        }


def _block_max(sim: np.ndarray, a: List[int], b: List[int]) -> Optional[float]:
    if not a or not b:
        return None
    return float(sim[np.ix_(a, b)].max())


def leakage_report(
    assignment: FoldAssignment,
    items: Sequence[SplitItem],
    compound_threshold: float = 0.4,
    protein_threshold: float = 0.5,
) -> LeakageReport:
    """fold の組ごとに化合物 Tanimoto とタンパク質 Jaccard の最大値を求め、分割設定に応じて合否を判定する

    NOVEL_COMPOUND は化合物、NOVEL_PROTEIN はタンパク質、NOVEL_PAIR は両方が閾値以下であれば合格。
    """
    position = {it.record_id: i for i, it in enumerate(items)}
    missing = [rid for fold in assignment.folds for rid in fold if rid not in position]
    if missing:
        raise ArgumentError(f"records without split items: {missing[:5]}")
    compound_sim = tanimoto_matrix([it.fingerprint for it in items])
    protein_sim = jaccard_matrix([it.kmers for it in items])
    members = [[position[rid] for rid in fold] for fold in assignment.folds]
    report = LeakageReport(assignment.setting, compound_threshold, protein_threshold)
    for a in range(len(members)):
        for b in range(a + 1, len(members)):
            max_c = _block_max(compound_sim, members[a], members[b])
            max_p = _block_max(protein_sim, members[a], members[b])
            passed = True
            if assignment.setting.uses_compounds and max_c is not None:
                passed = passed and max_c <= compound_threshold
            if assignment.setting.uses_proteins and max_p is not None:
                passed = passed and max_p <= protein_threshold
            report.pairs.append(FoldPairLeakage((a, b), max_c, max_p, passed))
    if not report.passed:
        logger.warning(f"{assignment.setting.value}: cross-fold similarity above threshold")
    return report


def make_split(
    items: Sequence[SplitItem], setting, cfg: Optional[SplitConfig] = None, seed: int = 0
) -> Tuple[FoldAssignment, LeakageReport]:
    """クラスタリング、fold 割り当て、漏洩検査を続けて行う"""
    cfg = cfg or SplitConfig()
    setting = SplitSetting.from_name(setting)
    compound = compound_clusters(items, cfg.compound_threshold, cfg.linkage) if setting.uses_compounds else None
    protein = protein_clusters(items, cfg.protein_threshold, cfg.linkage) if setting.uses_proteins else None
    assignment = assign_folds(
        [it.record_id for it in items], setting, cfg.folds, seed, compound_cluster_of=compound, protein_cluster_of=protein
    )
    return assignment, leakage_report(assignment, items, cfg.compound_threshold, cfg.protein_threshold)
