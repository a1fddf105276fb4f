"""
学習ループ

MSE（正規化 p_EC50）をミニバッチで最小化する。シャッフルは ``np.random.default_rng(seed)`` のみから作るため、
同じ seed・同じ入力なら損失系列はビット単位で一致する。
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import numpy as np
from pyequicpi.helper import (
    SysLog,
    ArgumentError,
    NumericalError,
    ValidationError,
    TrainingDivergedError,
    to_plain,
    build_dataclass,
)
from pyequicpi.chemio import ComplexRecord
from pyequicpi.fingerprint import Fingerprint, morgan_fingerprint
from pyequicpi.geograph import CutoffConfig, HeteroGraph, build_graph, merge_graphs
from pyequicpi.datasplit import normalize_label
from pyequicpi.difftrain.tape import ArrayLike, Tape, Tensor, mean, square, sub, value_of
from pyequicpi.difftrain.params import ParameterStore
from pyequicpi.difftrain.optim import OptimizerKind, make_optimizer
from pyequicpi.difftrain.checkpoint import Checkpoint
from pyequicpi.equinet.model import EquiNet, ModelConfig

logger = SysLog.logger


@dataclass(frozen=True)
class TrainConfig:
    """学習設定

    Args:
        learning_rate(float): 学習率（0 はパラメータを動かさない）
        steps(int): 更新回数
        batch_size(int): ミニバッチの大きさ
        seed(int): 初期化とシャッフルの乱数シード
        optimizer(str): ``sgd`` または ``adam``
        log_every(int): 損失を INFO で出力する間隔
    """

    learning_rate: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        OptimizerKind.from_name(self.optimizer)


@dataclass(frozen=True)
class FingerprintConfig:
    radius: int = 2
    nbits: int = 2048


@dataclass
class Example:
    complex_id: str
    graph: HeteroGraph
    fingerprint: Fingerprint
    label: Optional[float] = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[float] = field(default_factory=list)


def mse_loss(pred: ArrayLike, label: ArrayLike) -> Tensor:
    """(pred − label)² の平均"""
    return mean(square(sub(pred, label)))


def build_examples(
    records: Sequence[ComplexRecord],
    cutoff: Optional[CutoffConfig] = None,
    fingerprint: Optional[FingerprintConfig] = None,
    require_labels: bool = False,
) -> List[Example]:
    """レコードをグラフ・フィンガープリント・正規化ラベルに変換する"""
    cutoff = cutoff or CutoffConfig()
    fingerprint = fingerprint or FingerprintConfig()
    examples = []
    for record in records:
        if require_labels and record.label_ec50_nm is None:
            raise ValidationError(f"{record.complex_id}: training requires an ec50_nm label")
        label = normalize_label(record.label_ec50_nm) if record.label_ec50_nm is not None else None
        examples.append(
            Example(
                complex_id=record.complex_id,
                graph=build_graph(record, cutoff),
                fingerprint=morgan_fingerprint(record.ligand, fingerprint.radius, fingerprint.nbits),
                label=label,
            )
        )
    return examples


def checkpoint_config(model_cfg: ModelConfig, cutoff: CutoffConfig, fingerprint: FingerprintConfig, train_cfg=None):
    config = {"cutoff": to_plain(cutoff), "fingerprint": to_plain(fingerprint), "model": to_plain(model_cfg)}
    if train_cfg is not None:
        config["train"] = to_plain(train_cfg)
    return config


def load_model(checkpoint: Checkpoint) -> Tuple[EquiNet, FingerprintConfig]:
    """チェックポイントの設定エコーからモデルを復元し、パラメータ形状を検証する"""
    config = checkpoint.config
    model = EquiNet(
        build_dataclass(ModelConfig, config.get("model", {})), build_dataclass(CutoffConfig, config.get("cutoff", {}))
    )
    model.check_params(checkpoint.params)
    return model, build_dataclass(FingerprintConfig, config.get("fingerprint", {}))


def _batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    order = np.zeros(0, dtype=np.int64)
    for _ in range(steps):
        while len(order) < min(batch_size, n):
            order = np.concatenate([order, rng.permutation(n)])
        size = min(batch_size, n)
        yield np.sort(order[:size])
        order = order[size:]


def train_examples(
    examples: Sequence[Example],
    cfg: TrainConfig,
    model: EquiNet,
    params: Optional[ParameterStore] = None,
) -> Tuple[ParameterStore, List[float]]:
    """学習済みパラメータと損失系列を返す

    Raises:
        ArgumentError: 例が無い、またはラベルが無い例を含む
        TrainingDivergedError: 損失・特徴・パラメータが非有限値になった（ステップ番号付き）
    """
    if len(examples) == 0:
        raise ArgumentError("no training examples")
    if any(e.label is None for e in examples):
        raise ArgumentError("every training example needs a label")
    params = params if params is not None else model.init_params(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    fps = np.stack([e.fingerprint.as_array() for e in examples])
    labels = np.array([e.label for e in examples])
    trainable = params.trainable()
    losses: List[float] = []
    for step, index in enumerate(_batches(len(examples), cfg.batch_size, cfg.steps, rng)):
        batch = merge_graphs([examples[k].graph for k in index])
        try:
            with Tape() as tape:
                tape.watch(*trainable.values())
                result = model.forward_batch(batch, fps[index], params, training=True)
                loss = mse_loss(result.predictions, labels[index])
        except NumericalError as e:
            raise TrainingDivergedError(step, float("nan"), str(e)) from e
        loss_value = float(value_of(loss))
        if not np.isfinite(loss_value):
            raise TrainingDivergedError(step, loss_value)
        grads = tape.gradient(loss, trainable)
        optimizer.step(params, grads)
        for name, value in result.buffer_updates.items():
            params.assign(name, value)
        try:
            params.check_finite()
        except NumericalError as e:
            raise TrainingDivergedError(step, loss_value, str(e)) from e
        losses.append(loss_value)
        if cfg.log_every > 0 and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            logger.info(f"step {step}: loss {loss_value:.6g}")
    return params, losses


def train(
    records: Sequence[ComplexRecord],
    cfg: Optional[TrainConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    cutoff: Optional[CutoffConfig] = None,
    fingerprint: Optional[FingerprintConfig] = None,
) -> TrainResult:
    """ComplexRecord 群から学習し、チェックポイントと損失系列を返す"""
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    cutoff = cutoff or CutoffConfig()
    fingerprint = fingerprint or FingerprintConfig()
    if fingerprint.nbits != model_cfg.fingerprint_width:
        raise ValidationError(
            f"fingerprint nbits ({fingerprint.nbits}) differs from model fingerprint_width ({model_cfg.fingerprint_width})"
        )
    examples = build_examples(records, cutoff, fingerprint, require_labels=True)
    model = EquiNet(model_cfg, cutoff)
    logger.info(f"Training on {len(examples)} complexes for {cfg.steps} steps ({cfg.optimizer}, lr={cfg.learning_rate})")
    params, losses = train_examples(examples, cfg, model)
    checkpoint = Checkpoint(params=params, config=checkpoint_config(model_cfg, cutoff, fingerprint, cfg))
    return TrainResult(checkpoint=checkpoint, losses=losses)
