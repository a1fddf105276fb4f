"""
回帰・バーチャルスクリーニングの評価指標

スコアは「大きいほど活性らしい」。順位は降順の安定ソート（同点は入力順）で決める。
"""
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
from scipy.stats import rankdata
from pyequicpi.helper import SysLog, ArgumentError, MetricUndefinedError

logger = SysLog.logger

DEFAULT_BEDROC_ALPHA = 80.5
REGRESSION_METRICS = ("ci", "spearman", "pearson", "mse")
_METRIC_PATTERN = re.compile(r"^(ci|spearman|pearson|mse|ef|bedroc)([0-9]*\.?[0-9]*)$")


@dataclass(frozen=True)
class ScreenEntry:
    """
    Args:
        id(str): 化合物・複合体 ID
        score(float): 予測スコア（大きいほど活性らしい）
        label(float): 回帰ラベル（無ければ None）
        active(bool): 活性ラベル（無ければ None）
        group(str): 集計キー（標的名など）
    """

    id: str
    score: float
    label: Optional[float] = None
    active: Optional[bool] = None
    group: Optional[str] = None


@dataclass
class ScreenResult:
    entries: List[ScreenEntry]

    def __post_init__(self):
        if len(self.entries) == 0:
            raise ArgumentError("screen result has no entries")
        if not all(math.isfinite(e.score) for e in self.entries):
            raise ArgumentError("scores must be finite")

    @classmethod
    def from_arrays(cls, scores: Sequence[float], actives=None, labels=None, ids=None, groups=None) -> "ScreenResult":
        n = len(scores)
        return cls(
            [
                ScreenEntry(
                    id=str(ids[i]) if ids is not None else str(i),
                    score=float(scores[i]),
                    label=None if labels is None else float(labels[i]),
                    active=None if actives is None else bool(actives[i]),
                    group=None if groups is None else str(groups[i]),
                )
                for i in range(n)
            ]
        )

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def actives(self) -> np.ndarray:
        return np.array([bool(e.active) for e in self.entries])

    @property
    def has_activity(self) -> bool:
        return all(e.active is not None for e in self.entries)

    def groups(self) -> Dict[str, "ScreenResult"]:
        """group ごとの部分集合（初出順）"""
        out: Dict[str, List[ScreenEntry]] = {}
        for e in self.entries:
            out.setdefault(str(e.group), []).append(e)
        return {k: ScreenResult(v) for k, v in out.items()}


def _pair(preds, labels) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ArgumentError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
        raise ArgumentError("predictions and labels must be finite")
    return p, y


def concordance_index(preds, labels) -> float:
    """ラベルが異なる全ペアのうち、予測の大小が一致する割合（予測同点は 0.5）

    Raises:
        MetricUndefinedError: n < 2 または全ラベルが同じ
    """
    p, y = _pair(preds, labels)
    if p.size < 2:
        raise MetricUndefinedError("concordance index needs at least 2 samples")
    concordant = 0.0
    comparable = 0
    for i in range(p.size - 1):
        dy = np.sign(y[i + 1 :] - y[i])
        dp = np.sign(p[i + 1 :] - p[i])
        mask = dy != 0
        comparable += int(mask.sum())
        concordant += float(np.sum(dy[mask] == dp[mask])) + 0.5 * float(np.sum(dp[mask] == 0))
    if comparable == 0:
        raise MetricUndefinedError("concordance index is undefined when all labels are equal")
    return concordant / comparable


def pearson(preds, labels) -> float:
    """
    Raises:
        MetricUndefinedError: n < 2 または分散ゼロ
    """
    p, y = _pair(preds, labels)
    if p.size < 2:
        raise MetricUndefinedError("correlation needs at least 2 samples")
    pc = p - p.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(pc, pc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        raise MetricUndefinedError("correlation is undefined for zero variance")
    return float(np.clip(np.dot(pc, yc) / denom, -1.0, 1.0))


def spearman(preds, labels) -> float:
    """平均順位（同点は順位の平均）に対するピアソン相関"""
    p, y = _pair(preds, labels)
    return pearson(rankdata(p, method="average"), rankdata(y, method="average"))


def mse(preds, labels) -> float:
    p, y = _pair(preds, labels)
    if p.size == 0:
        raise MetricUndefinedError("mse needs at least 1 sample")
    return float(np.mean((p - y) ** 2))


def active_ranks(result: ScreenResult) -> np.ndarray:
    """活性化合物の順位（1始まり、良い順）"""
    order = np.argsort(-result.scores, kind="stable")
    actives = result.actives[order]
    return np.nonzero(actives)[0] + 1


def _top_count(n: int, x_percent: float) -> int:
    # small offset so that e.g. 300 * 7 / 100 = 21.000000000000004 stays 21
    return max(1, math.ceil(n * x_percent / 100.0 - 1e-9))


def ef_from_ranks(ranks: np.ndarray, n_total: int, x_percent: float) -> float:
    n_actives = len(ranks)
    if n_actives == 0:
        raise MetricUndefinedError("enrichment factor is undefined without actives")
    m = _top_count(n_total, x_percent)
    hits = int(np.sum(np.asarray(ranks) <= m))
    return (hits / m) / (n_actives / n_total)


def enrichment_factor(result: ScreenResult, x_percent: float = 1.0) -> float:
    """EF_x% = (上位 m 件中の活性数 / m) / (全活性数 / n)、m = ceil(n·x/100)

    Raises:
        ArgumentError: x_percent が (0, 100] 外、活性ラベルが無い
        MetricUndefinedError: 活性化合物が無い
    """
    if not 0.0 < x_percent <= 100.0:
        raise ArgumentError(f"x_percent must be within (0, 100], got {x_percent}")
    if not result.has_activity:
        raise ArgumentError("enrichment factor needs activity labels for every entry")
    return ef_from_ranks(active_ranks(result), len(result.entries), x_percent)


def bedroc_from_ranks(ranks: np.ndarray, n_total: int, alpha: float = DEFAULT_BEDROC_ALPHA) -> float:
    """Truchon–Bayly の BEDROC（順位から直接計算）"""
    if not alpha > 0:
        raise ArgumentError(f"alpha must be > 0, got {alpha}")
    n = len(ranks)
    if n == 0 or n == n_total:
        raise MetricUndefinedError("BEDROC needs at least one active and one inactive")
    big_n = float(n_total)
    ra = n / big_n
    r = np.asarray(ranks, dtype=np.float64)
    total = math.fsum(np.exp(-alpha * r / big_n))
    rie = total / (ra * (-math.expm1(-alpha)) / math.expm1(alpha / big_n))
    factor = ra * math.sinh(alpha / 2.0) / (math.cosh(alpha / 2.0) - math.cosh(alpha / 2.0 - alpha * ra))
    return rie * factor + 1.0 / (-math.expm1(alpha * (1.0 - ra)))


def bedroc(result: ScreenResult, alpha: float = DEFAULT_BEDROC_ALPHA) -> float:
    """
    Raises:
        ArgumentError: 活性ラベルが無い、alpha ≤ 0
        MetricUndefinedError: 全て活性、または全て不活性
    """
    if not result.has_activity:
        raise ArgumentError("BEDROC needs activity labels for every entry")
    return bedroc_from_ranks(active_ranks(result), len(result.entries), alpha)


def parse_metric(name: str) -> Tuple[str, Optional[float]]:
    """``ef1`` → ("ef", 1.0)、``bedroc`` → ("bedroc", 80.5)、``ci`` → ("ci", None)"""
    match = _METRIC_PATTERN.match(name.strip().lower())
    if match is None:
        raise ArgumentError(f"unknown metric {name!r}")
    kind, param = match.group(1), match.group(2)
    if kind in REGRESSION_METRICS:
        if param:
            raise ArgumentError(f"metric {name!r} takes no parameter")
        return kind, None
    if not param:
        if kind == "ef":
            raise ArgumentError("enrichment factor needs a percentage, e.g. ef1")
        return kind, DEFAULT_BEDROC_ALPHA
    try:
        return kind, float(param)
    except ValueError:
        raise ArgumentError(f"malformed metric parameter in {name!r}") from None


def _format_param(value: float) -> str:
    return f"{float(value):g}"


@dataclass
class MetricReport:
    """評価結果

    定義できなかった指標は値を持たず、``omitted`` に理由を残す。``group_by`` 指定時は ``groups`` に
    グループごとの結果、``summary`` に指標ごとの平均と標準偏差を持つ。
    """

    n: int = 0
    ci: Optional[float] = None
    spearman: Optional[float] = None
    pearson: Optional[float] = None
    mse: Optional[float] = None
    ef: Dict[str, float] = field(default_factory=dict)
    bedroc: Dict[str, float] = field(default_factory=dict)
    omitted: Dict[str, str] = field(default_factory=dict)
    groups: Dict[str, "MetricReport"] = field(default_factory=dict)
    summary: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        """``ef1`` ``bedroc80.5`` などの名前で平坦化した値"""
        out = {name: getattr(self, name) for name in REGRESSION_METRICS if getattr(self, name) is not None}
        out.update({f"ef{k}": v for k, v in self.ef.items()})
        out.update({f"bedroc{k}": v for k, v in self.bedroc.items()})
        return out

    def to_dict(self) -> Dict:
        data = {"n": self.n, "metrics": self.values(), "omitted": dict(self.omitted)}
        if self.groups:
            data["groups"] = {k: v.to_dict() for k, v in self.groups.items()}
            data["summary"] = {k: dict(v) for k, v in self.summary.items()}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricReport":
        report = cls(n=int(data.get("n", 0)), omitted=dict(data.get("omitted", {})))
        for name, value in data.get("metrics", {}).items():
            kind, _ = parse_metric(name)
            if kind in REGRESSION_METRICS:
                setattr(report, kind, value)
            else:
                getattr(report, kind)[name[len(kind) :]] = value
        report.groups = {k: cls.from_dict(v) for k, v in data.get("groups", {}).items()}
        report.summary = {k: dict(v) for k, v in data.get("summary", {}).items()}
        return report


def _evaluate_one(result: ScreenResult, requested: Sequence[Tuple[str, str, Optional[float]]]) -> MetricReport:
    report = MetricReport(n=len(result.entries))
    labelled = [e for e in result.entries if e.label is not None]
    preds = [e.score for e in labelled]
    labels = [e.label for e in labelled]
    functions = {"ci": concordance_index, "spearman": spearman, "pearson": pearson, "mse": mse}
    for name, kind, param in requested:
        try:
            if kind in REGRESSION_METRICS:
                if not labelled:
                    report.omitted[name] = "no regression labels"
                    continue
                setattr(report, kind, functions[kind](preds, labels))
            elif not result.has_activity:
                report.omitted[name] = "no activity labels"
            elif kind == "ef":
                report.ef[_format_param(param)] = enrichment_factor(result, param)
            else:
                report.bedroc[_format_param(param)] = bedroc(result, param)
        except (MetricUndefinedError, ArgumentError) as e:
            report.omitted[name] = str(e)
            logger.debug(f"metric {name} omitted: {e}")
    return report


def evaluate(result: ScreenResult, metrics: Sequence[str], group_by: bool = False) -> MetricReport:
    """要求された指標を計算する。定義できない指標は省略し理由を残す

    Args:
        result: 評価対象
        metrics: ``ci`` ``spearman`` ``pearson`` ``mse`` ``ef<x>`` ``bedroc[<alpha>]``
        group_by: True ならエントリの ``group`` ごとに評価し、平均と標準偏差を集計する

    Raises:
        ArgumentError: 未知の指標名
    """
    requested = [(m.strip().lower(),) + parse_metric(m) for m in metrics if m.strip()]
    if not group_by:
        return _evaluate_one(result, requested)
    report = MetricReport(n=len(result.entries))
    report.groups = {name: _evaluate_one(sub, requested) for name, sub in result.groups().items()}
    collected: Dict[str, List[float]] = {}
    for sub in report.groups.values():
        for name, value in sub.values().items():
            collected.setdefault(name, []).append(value)
    for name, values in collected.items():
        arr = np.asarray(values)
        report.summary[name] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "n_groups": int(arr.size),
        }
    return report


@dataclass
class BaselineReport:
    """ランダム順位付けの Monte-Carlo 結果"""

    trials: int
    seed: int
    compositions: List[Tuple[int, int]]
    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)
    per_target: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "compositions": [{"actives": a, "decoys": d} for a, d in self.compositions],
            "mean": dict(self.mean),
            "std": dict(self.std),
            "per_target": [dict(t) for t in self.per_target],
        }


def _random_trial(args) -> Dict[str, float]:
    n_actives, n_decoys, seed, target, ef_percents, alphas = args
    n_total = n_actives + n_decoys
    rng = np.random.default_rng([seed, target])
    ranks = np.sort(rng.permutation(n_total)[:n_actives]) + 1
    values = {f"ef{_format_param(x)}": ef_from_ranks(ranks, n_total, x) for x in ef_percents}
    values.update({f"bedroc{_format_param(a)}": bedroc_from_ranks(ranks, n_total, a) for a in alphas})
    return values


def simulate_random_screen(
    n_actives: int = 1759,
    n_decoys: int = 107590,
    trials: int = 200,
    seed: int = 0,
    ef_percents: Sequence[float] = (1.0,),
    bedroc_alphas: Sequence[float] = (DEFAULT_BEDROC_ALPHA,),
    compositions: Optional[Sequence[Tuple[int, int]]] = None,
    map_fn: Callable = map,
) -> BaselineReport:
    """ランダム順位付けによるベースライン

    ``compositions`` を省略すると (n_actives, n_decoys) の一括組成、指定すると標的ごとの組成で評価し、
    標的ごとの平均をさらに標的間で平均する。試行 i の乱数は (seed + i, 標的番号) から作るため、
    ``map_fn`` を並列実行に置き換えても結果は変わらない。

    Raises:
        ArgumentError: 活性・不活性の数が 1 未満、試行数が 1 未満
    """
    pooled = compositions is None
    comps = [(int(n_actives), int(n_decoys))] if pooled else [(int(a), int(d)) for a, d in compositions]
    if trials < 1:
        raise ArgumentError(f"trials must be >= 1, got {trials}")
    for a, d in comps:
        if a < 1 or d < 1:
            raise ArgumentError(f"composition needs >= 1 active and >= 1 decoy, got ({a}, {d})")
    report = BaselineReport(trials=trials, seed=seed, compositions=comps)
    trial_values: List[Dict[str, float]] = []
    for target, (a, d) in enumerate(comps):
        jobs = [(a, d, seed + i, target, tuple(ef_percents), tuple(bedroc_alphas)) for i in range(trials)]
        results = list(map_fn(_random_trial, jobs))
        target_mean = {k: float(np.mean([r[k] for r in results])) for k in results[0]}
        report.per_target.append(target_mean)
        if pooled:
            trial_values = results
    samples = trial_values if pooled else report.per_target
    for key in samples[0]:
        arr = np.array([s[key] for s in samples])
        report.mean[key] = float(arr.mean())
        report.std[key] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    logger.info(f"random baseline over {trials} trials: {report.mean}")
    return report
