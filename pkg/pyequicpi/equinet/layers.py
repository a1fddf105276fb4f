"""
等変メッセージパッシングの構成要素

特徴は次数 l ごとのブロック ``Dict[int, Tensor]`` で受け渡す。ブロックの形状は (ノード数, チャネル数, 2l+1)。
全ての関数はテープ上の演算だけで書かれており、そのまま逆伝播できる。
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
from pyequicpi.helper import SysLog, ConfigurationError
from pyequicpi.difftrain.tape import (
    ArrayLike,
    Tensor,
    add,
    concat,
    div,
    einsum,
    matmul,
    mean,
    mul,
    reshape,
    scatter_add,
    sigmoid,
    silu,
    sqrt,
    square,
    sub,
    sum_,
    value_of,
)
from pyequicpi.equinet.irreps import LMAX, Path, clebsch_gordan

logger = SysLog.logger

Blocks = Dict[int, ArrayLike]


def path_layout(paths: Sequence[Path], mult_in: Sequence[int], mult_out: Sequence[int]) -> Dict[int, List[Path]]:
    """出力次数ごとに、使用する経路（入力チャネルがあり出力チャネルがあるもの）をまとめる"""
    layout: Dict[int, List[Path]] = {}
    for path in paths:
        l_in, _, l_out = path
        if mult_in[l_in] > 0 and mult_out[l_out] > 0:
            layout.setdefault(l_out, []).append(path)
    return layout


def message_multiplicity(routes: Mapping[int, Sequence[Path]], mult_in: Sequence[int]) -> Dict[int, int]:
    """出力次数ごとのメッセージチャネル数（経路ごとに入力チャネル数だけ並ぶ）"""
    return {l: sum(mult_in[p[0]] for p in ps) for l, ps in routes.items()}


def edge_weight_net(inputs: ArrayLike, params: Mapping[str, Tensor], prefix: str, heads: Sequence[int]) -> Blocks:
    """エッジ条件付けネットワーク Ψ

    出力次数 l ごとに独立した隠れ2層（SiLU）のネットワークで、入力 [rbf, h_a スカラー, h_b スカラー] から経路重みを出す。

    Args:
        inputs: (E, k + 2·m0)
        params: ``{prefix}{l}.w1`` ``.b1`` ``.w2`` ``.b2`` ``.out.weight`` ``.out.bias``
        heads: 重みを出力する次数

    Return:
        Dict[int, Tensor]: ``weights[l]`` の形状は (E, 経路×入力チャネル)
    """
    weights: Blocks = {}
    for l in heads:
        p = f"{prefix}{l}"
        hidden = silu(add(matmul(inputs, params[f"{p}.w1"]), params[f"{p}.b1"]))
        hidden = silu(add(matmul(hidden, params[f"{p}.w2"]), params[f"{p}.b2"]))
        weights[l] = add(matmul(hidden, params[f"{p}.out.weight"]), params[f"{p}.out.bias"])
    return weights


def tensor_product_message(
    h_b: Blocks, sh: Sequence[ArrayLike], weights: Blocks, routes: Mapping[int, Sequence[Path]]
) -> Blocks:
    """m_ab = Σ_paths w_path · CG(h_b, Y(r̂_ab))

    経路 (l_in, l_sh, l_out) ごとに入力チャネル u を保ったまま結合し、出力次数ごとに経路順で連結する。

    Raises:
        ConfigurationError: 重みの列数が経路とチャネル数に一致しない
    """
    out: Blocks = {}
    for l_out, paths in sorted(routes.items()):
        w = weights[l_out]
        width = sum(value_of(h_b[p[0]]).shape[1] for p in paths)
        if value_of(w).shape[-1] != width:
            raise ConfigurationError(f"l={l_out}: {value_of(w).shape[-1]} path weights given, {width} required")
        parts = []
        column = 0
        for l_in, l_sh, _ in paths:
            m = value_of(h_b[l_in]).shape[1]
            w_path = w[:, column : column + m]
            column += m
            parts.append(einsum("eua,eb,abc,eu->euc", h_b[l_in], sh[l_sh], clebsch_gordan(l_in, l_sh, l_out), w_path))
        out[l_out] = concat(parts, axis=1) if len(parts) > 1 else parts[0]
    return out


def aggregate_messages(messages: Blocks, target: np.ndarray, n_targets: int) -> Blocks:
    """ターゲットごとの算術平均（近傍なしはゼロ）。加算はエッジ順"""
    target = np.asarray(target, dtype=np.int64)
    counts = np.bincount(target, minlength=n_targets).astype(np.float64)
    scale = (1.0 / np.maximum(counts, 1.0))[:, None, None]
    return {l: mul(scatter_add(m, target, n_targets), scale) for l, m in messages.items()}


@dataclass
class BatchNormState:
    """バッチ統計（学習時、移動平均の更新に使う）"""

    mean0: Optional[np.ndarray] = None
    var0: Optional[np.ndarray] = None
    sqnorm: Optional[Dict[int, np.ndarray]] = None


def equivariant_batch_norm(
    features: Blocks,
    params: Mapping[str, Tensor],
    prefix: str,
    training: bool = True,
    eps: float = 1e-5,
) -> Tuple[Blocks, BatchNormState]:
    """等変バッチ正規化

    l=0: (x − μ)/√(σ² + ε)·γ + β 。l>0: 各 (2l+1) ベクトルをチャネルごとのノルム二乗平均の平方根で割り γ を掛ける。
    ``training=False`` では ``{prefix}.running_*`` を使う。
    """
    out: Blocks = {}
    state = BatchNormState(sqnorm={})
    for l, x in sorted(features.items()):
        gamma = reshape(params[f"{prefix}.gamma{l}"], (1, -1, 1))
        if l == 0:
            if training:
                mu = mean(x, axis=0, keepdims=True)
                centered = sub(x, mu)
                var = mean(square(centered), axis=0, keepdims=True)
                state.mean0 = value_of(mu).ravel().copy()
                state.var0 = value_of(var).ravel().copy()
            else:
                centered = sub(x, value_of(params[f"{prefix}.running_mean0"]).reshape(1, -1, 1))
                var = value_of(params[f"{prefix}.running_var0"]).reshape(1, -1, 1)
            normed = div(centered, sqrt(add(var, eps)))
            out[l] = add(mul(normed, gamma), reshape(params[f"{prefix}.beta0"], (1, -1, 1)))
        else:
            if training:
                sqnorm = mean(sum_(square(x), axis=2, keepdims=True), axis=0, keepdims=True)
                state.sqnorm[l] = value_of(sqnorm).ravel().copy()
            else:
                sqnorm = value_of(params[f"{prefix}.running_sqnorm{l}"]).reshape(1, -1, 1)
            out[l] = mul(div(x, sqrt(add(sqnorm, eps))), gamma)
    return out, state


def running_stat_updates(prefix: str, state: BatchNormState, params: Mapping[str, Tensor], momentum: float):
    """移動平均 r ← (1 − momentum)·r + momentum·batch"""
    updates = {}
    if state.mean0 is not None:
        for key, batch in (("running_mean0", state.mean0), ("running_var0", state.var0)):
            name = f"{prefix}.{key}"
            updates[name] = (1.0 - momentum) * params[name].value + momentum * batch
    for l, batch in (state.sqnorm or {}).items():
        name = f"{prefix}.running_sqnorm{l}"
        updates[name] = (1.0 - momentum) * params[name].value + momentum * batch
    return updates


def node_update(h: Blocks, aggregated: Blocks, params: Mapping[str, Tensor], prefix: str) -> Blocks:
    """h ← W_l · [h_l ; BN(m)_l] （同じ次数の中だけで混合する）"""
    out: Blocks = {}
    for l, x in sorted(h.items()):
        if value_of(x).shape[1] == 0:
            out[l] = x
            continue
        stacked = concat([x, aggregated[l]], axis=1) if l in aggregated else x
        weight = params[f"{prefix}.update{l}"]
        if value_of(weight).shape[0] != value_of(stacked).shape[1]:
            raise ConfigurationError(
                f"{prefix}.update{l}: expects {value_of(weight).shape[0]} input channels, got {value_of(stacked).shape[1]}"
            )
        out[l] = einsum("nuc,uv->nvc", stacked, weight)
    return out


def gated_activation(h: Blocks, params: Mapping[str, Tensor], prefix: str) -> Blocks:
    """l=0 は SiLU、l>0 はスカラーから作るシグモイドゲートをチャネルごとに掛ける"""
    scalars = reshape(h[0], value_of(h[0]).shape[:2])
    out: Blocks = {0: silu(h[0])}
    for l in range(1, LMAX + 1):
        if l not in h or value_of(h[l]).shape[1] == 0:
            if l in h:
                out[l] = h[l]
            continue
        gate = sigmoid(add(matmul(scalars, params[f"{prefix}.gate{l}.weight"]), params[f"{prefix}.gate{l}.bias"]))
        out[l] = mul(h[l], reshape(gate, value_of(gate).shape + (1,)))
    return out


def invariant_pool(scalars: ArrayLike, node_kind: np.ndarray, graph_of_node: np.ndarray, n_graphs: int) -> Tensor:
    """グラフごとに [リガンド l=0 平均 ; 残基 l=0 平均] を返す。形状 (G, 2·m0)"""
    segment = np.asarray(graph_of_node, dtype=np.int64) * 2 + np.asarray(node_kind, dtype=np.int64)
    counts = np.bincount(segment, minlength=2 * n_graphs).astype(np.float64)
    pooled = mul(scatter_add(scalars, segment, 2 * n_graphs), (1.0 / np.maximum(counts, 1.0))[:, None])
    return reshape(pooled, (n_graphs, -1))


def readout(pooled: ArrayLike, fingerprint: ArrayLike, params: Mapping[str, Tensor]) -> Tensor:
    """フィンガープリントを密ベクトルに射影して連結し、2層パーセプトロンでスカラーを出す。形状 (G,)"""
    fp = add(matmul(fingerprint, params["readout.fp.weight"]), params["readout.fp.bias"])
    z = concat([pooled, fp], axis=1)
    hidden = silu(add(matmul(z, params["readout.w1"]), params["readout.b1"]))
    out = add(matmul(hidden, params["readout.w2"]), params["readout.b2"])
    return reshape(out, (value_of(out).shape[0],))
