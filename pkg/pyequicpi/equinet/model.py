"""
SE(3) 等変テンソル積ネットワーク

1. ノード特徴の埋め込み h⁽⁰⁾ = W_atom·x + b_atom （l=0 チャネルへ）
2. 層ごとにエッジ種 cc → pp → pc の順でメッセージ・平均集約・等変バッチ正規化・ノード更新
3. ゲート活性化
4. 種類別スカラー平均プーリングとフィンガープリント付き読み出し
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from pyequicpi.helper import SysLog, ConfigurationError, NumericalError
from pyequicpi.difftrain.tape import (
    ArrayLike,
    Tensor,
    add,
    concat,
    div,
    exp,
    matmul,
    mul,
    reshape,
    scatter_add,
    sqrt,
    square,
    sub,
    sum_,
    take,
    value_of,
)
from pyequicpi.difftrain.params import ParameterStore
from pyequicpi.geograph import (
    CutoffConfig,
    EdgeKind,
    GraphBatch,
    HeteroGraph,
    NODE_FEATURE_WIDTH,
    merge_graphs,
)
from pyequicpi.fingerprint import Fingerprint
from pyequicpi.equinet.irreps import LMAX, IrrepFeature, IrrepLayout, sh_blocks, tensor_product_paths
from pyequicpi.equinet.layers import (
    aggregate_messages,
    edge_weight_net,
    equivariant_batch_norm,
    gated_activation,
    invariant_pool,
    message_multiplicity,
    node_update,
    path_layout,
    readout,
    running_stat_updates,
    tensor_product_message,
)

logger = SysLog.logger

EDGE_ORDER = (EdgeKind.CC, EdgeKind.PP, EdgeKind.PC)


@dataclass(frozen=True)
class ModelConfig:
    """ネットワーク設定

    Args:
        layers(int): メッセージパッシング層数
        multiplicities(Tuple[int, int, int]): 各層の (l=0, l=1, l=2) チャネル数
        lmax(int): 球面調和関数の最大次数（2 固定）
        edge_mlp_hidden(int): Ψ の隠れ層幅
        readout_hidden(int): 読み出しパーセプトロンの隠れ層幅
        fingerprint_width(int): フィンガープリントのビット長
        fingerprint_embed(int): フィンガープリント射影後の次元
        include_odd_paths(bool): パリティ奇の結合経路を含めるか
        bn_momentum(float): 移動平均のモーメンタム
        bn_eps(float): バッチ正規化の ε
    """

    layers: int = 3
    multiplicities: Tuple[int, ...] = (32, 8, 4)
    lmax: int = 2
    edge_mlp_hidden: int = 32
    readout_hidden: int = 64
    fingerprint_width: int = 2048
    fingerprint_embed: int = 64
    include_odd_paths: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "multiplicities", tuple(int(m) for m in self.multiplicities))
        if self.lmax != LMAX:
            raise ConfigurationError(f"lmax is fixed to {LMAX}, got {self.lmax}")
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.layout.mult(0) < 1:
            raise ConfigurationError("the layout needs at least one l=0 channel for the scalar output")
        for name in ("edge_mlp_hidden", "readout_hidden", "fingerprint_width", "fingerprint_embed"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @property
    def layout(self) -> IrrepLayout:
        return IrrepLayout(self.multiplicities)


@dataclass
class ForwardResult:
    """forward の結果

    Args:
        predictions(Tensor): (G,) の予測 p_EC50
        layer_features(List[IrrepFeature]): ``collect_features`` 指定時、埋め込みと各層出力（ゲート後）
        buffer_updates(Dict[str, ndarray]): 学習モードで得たバッチ正規化の移動平均の更新値
    """

    predictions: Tensor
    layer_features: List[IrrepFeature] = field(default_factory=list)
    buffer_updates: Dict[str, np.ndarray] = field(default_factory=dict)


class EquiNet:
    """等変ネットワーク本体（パラメータは :class:`ParameterStore` で外から渡す）"""

    def __init__(self, cfg: Optional[ModelConfig] = None, cutoff: Optional[CutoffConfig] = None):
        self.cfg = cfg or ModelConfig()
        self.cutoff = cutoff or CutoffConfig()
        self.layout = self.cfg.layout
        mult = self.layout.multiplicities
        self.paths = tensor_product_paths(self.cfg.lmax, include_odd=self.cfg.include_odd_paths)
        self.routes = path_layout(self.paths, mult, mult)
        self.message_mult = message_multiplicity(self.routes, mult)

    def parameter_shapes(self) -> Dict[str, Tuple[Tuple[int, ...], str]]:
        """名前 → (形状, 初期化種別)。種別は weight / bias / gamma / zero / one"""
        m = self.layout.multiplicities
        hidden = self.cfg.edge_mlp_hidden
        specs: Dict[str, Tuple[Tuple[int, ...], str]] = {
            "embed.weight": ((NODE_FEATURE_WIDTH, m[0]), "weight"),
            "embed.bias": ((m[0],), "bias"),
        }
        for i in range(self.cfg.layers):
            for kind in EDGE_ORDER:
                p = f"layer{i}.{kind.label}"
                for l, width in self.message_mult.items():
                    specs[f"{p}.psi{l}.w1"] = ((self.cutoff.rbf_k + 2 * m[0], hidden), "weight")
                    specs[f"{p}.psi{l}.b1"] = ((hidden,), "bias")
                    specs[f"{p}.psi{l}.w2"] = ((hidden, hidden), "weight")
                    specs[f"{p}.psi{l}.b2"] = ((hidden,), "bias")
                    specs[f"{p}.psi{l}.out.weight"] = ((hidden, width), "weight")
                    specs[f"{p}.psi{l}.out.bias"] = ((width,), "bias")
                    specs[f"{p}.bn.gamma{l}"] = ((width,), "gamma")
                    if l == 0:
                        specs[f"{p}.bn.beta0"] = ((width,), "bias")
                        specs[f"{p}.bn.running_mean0"] = ((width,), "zero")
                        specs[f"{p}.bn.running_var0"] = ((width,), "one")
                    else:
                        specs[f"{p}.bn.running_sqnorm{l}"] = ((width,), "one")
                for l in range(LMAX + 1):
                    if m[l] > 0:
                        specs[f"{p}.update{l}"] = ((m[l] + self.message_mult.get(l, 0), m[l]), "weight")
            for l in range(1, LMAX + 1):
                if m[l] > 0:
                    specs[f"layer{i}.gate{l}.weight"] = ((m[0], m[l]), "weight")
                    specs[f"layer{i}.gate{l}.bias"] = ((m[l],), "bias")
        embed = self.cfg.fingerprint_embed
        specs["readout.fp.weight"] = ((self.cfg.fingerprint_width, embed), "weight")
        specs["readout.fp.bias"] = ((embed,), "bias")
        specs["readout.w1"] = ((2 * m[0] + embed, self.cfg.readout_hidden), "weight")
        specs["readout.b1"] = ((self.cfg.readout_hidden,), "bias")
        specs["readout.w2"] = ((self.cfg.readout_hidden, 1), "weight")
        specs["readout.b2"] = ((1,), "bias")
        return specs

    def init_params(self, seed: int = 0) -> ParameterStore:
        """一様分布 ±1/√fan_in で重みを初期化（バイアス 0、γ 1、β 0）。名前の辞書順に乱数を引く"""
        rng = np.random.default_rng(seed)
        params = ParameterStore()
        for name, (shape, kind) in sorted(self.parameter_shapes().items()):
            if kind == "weight":
                bound = 1.0 / np.sqrt(shape[0])
                params.add(name, rng.uniform(-bound, bound, size=shape))
            elif kind in ("bias", "zero"):
                params.add(name, np.zeros(shape), trainable=(kind == "bias"))
            elif kind == "gamma":
                params.add(name, np.ones(shape))
            else:
                params.add(name, np.ones(shape), trainable=False)
        logger.debug(f"initialised {params.count()} trainable parameters with seed {seed}")
        return params

    def check_params(self, params: ParameterStore):
        params.check_shapes({k: v[0] for k, v in self.parameter_shapes().items()})

    def _geometry(self, positions: ArrayLike, edge_index: np.ndarray):
        a, b = edge_index[:, 0], edge_index[:, 1]
        r = sub(take(positions, b), take(positions, a))
        dist = reshape(sqrt(sum_(square(r), axis=1)), (len(a), 1))
        unit = div(r, dist)
        rbf = exp(mul(square(sub(dist, self.cutoff.centers[None, :])), -self.cutoff.gamma))
        return rbf, sh_blocks(unit, self.cfg.lmax)

    def forward_batch(
        self,
        batch: GraphBatch,
        fingerprints: ArrayLike,
        params: ParameterStore,
        training: bool = False,
        positions: Optional[ArrayLike] = None,
        collect_features: bool = False,
    ) -> ForwardResult:
        """グラフの非連結和に対する順伝播

        Args:
            batch(GraphBatch): :func:`merge_graphs` の結果
            fingerprints: (G, fingerprint_width) の 0/1 行列
            params(ParameterStore): パラメータ
            training(bool): True ならバッチ統計で正規化し、移動平均の更新値を返す
            positions: ノード座標の差し替え（テープ上のテンソルを渡すと座標についても微分できる）
            collect_features(bool): 層ごとの特徴を返す

        Raises:
            NumericalError: いずれかの層で NaN/Inf が発生した（層番号付き）
        """
        m = self.layout.multiplicities
        n = batch.n_nodes
        if value_of(fingerprints).shape != (batch.n_graphs, self.cfg.fingerprint_width):
            raise ConfigurationError(
                f"fingerprint matrix shape {value_of(fingerprints).shape} does not match "
                f"({batch.n_graphs}, {self.cfg.fingerprint_width})"
            )
        positions = Tensor(batch.positions) if positions is None else positions
        rbf, sh = self._geometry(positions, batch.edge_index)

        embedded = add(matmul(batch.features, params["embed.weight"]), params["embed.bias"])
        h = {0: reshape(embedded, (n, m[0], 1))}
        for l in range(1, LMAX + 1):
            h[l] = Tensor(np.zeros((n, m[l], 2 * l + 1)))
        result = ForwardResult(predictions=None)
        if collect_features:
            result.layer_features.append(self._to_feature(h))

        for i in range(self.cfg.layers):
            for kind in EDGE_ORDER:
                edges = np.flatnonzero(batch.edge_kind == kind)
                if len(edges) == 0:
                    continue
                prefix = f"layer{i}.{kind.label}"
                target = batch.edge_index[edges, 0]
                source = batch.edge_index[edges, 1]
                scalars = reshape(h[0], (n, m[0]))
                psi_in = concat([take(rbf, edges), take(scalars, target), take(scalars, source)], axis=1)
                weights = edge_weight_net(psi_in, params, f"{prefix}.psi", sorted(self.routes))
                messages = tensor_product_message(
                    {l: take(h[l], source) for l in h}, [take(y, edges) for y in sh], weights, self.routes
                )
                receivers, local = np.unique(target, return_inverse=True)
                aggregated = aggregate_messages(messages, local, len(receivers))
                normed, state = equivariant_batch_norm(
                    aggregated, params, f"{prefix}.bn", training=training, eps=self.cfg.bn_eps
                )
                if training:
                    result.buffer_updates.update(
                        running_stat_updates(f"{prefix}.bn", state, params, self.cfg.bn_momentum)
                    )
                current = {l: take(h[l], receivers) for l in h}
                updated = node_update(current, normed, params, prefix)
                h = {l: add(h[l], scatter_add(sub(updated[l], current[l]), receivers, n)) for l in h}
            h = gated_activation(h, params, f"layer{i}")
            for l, block in h.items():
                if not np.all(np.isfinite(value_of(block))):
                    raise NumericalError(f"non-finite features in l={l} block", layer=i)
            if collect_features:
                result.layer_features.append(self._to_feature(h))

        pooled = invariant_pool(reshape(h[0], (n, m[0])), batch.node_kind, batch.graph_of_node, batch.n_graphs)
        result.predictions = readout(pooled, fingerprints, params)
        if not np.all(np.isfinite(value_of(result.predictions))):
            raise NumericalError("non-finite prediction", layer=self.cfg.layers)
        return result

    @staticmethod
    def _to_feature(h) -> IrrepFeature:
        return IrrepFeature.from_blocks([value_of(h[l]) for l in range(LMAX + 1)])

    def forward(
        self,
        graph: HeteroGraph,
        fingerprint: Union[Fingerprint, np.ndarray],
        params: ParameterStore,
        training: bool = False,
    ) -> float:
        """1グラフの予測 p_EC50"""
        fp = fingerprint.as_array() if isinstance(fingerprint, Fingerprint) else np.asarray(fingerprint, dtype=float)
        result = self.forward_batch(merge_graphs([graph]), fp[None, :], params, training=training)
        return float(value_of(result.predictions)[0])

    def predict(
        self, graphs: Sequence[HeteroGraph], fingerprints: Sequence[Fingerprint], params: ParameterStore
    ) -> np.ndarray:
        """推論モードで1グラフずつ予測する（結果はバッチ構成に依存しない）"""
        return np.array([self.forward(g, fp, params) for g, fp in zip(graphs, fingerprints)])


def fingerprint_matrix(fingerprints: Sequence[Fingerprint]) -> np.ndarray:
    return np.stack([fp.as_array() for fp in fingerprints]) if fingerprints else np.zeros((0, 0))
