"""例外定義モジュール

値に関する異常は ``ValueError`` も継承するため、呼び出し側は従来通り ``ValueError`` で捕捉できる。
"""
from typing import Optional


class EquiCPIError(Exception):
    """パッケージ内で送出する例外の基底クラス"""


class ParseError(EquiCPIError, ValueError):
    """構造ファイルの解析失敗

    Args:
        message(str): エラー内容
        line(int): 失敗した行番号（1始まり）。特定できない場合はNone
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyStructureError(ParseError):
    """CA原子や重原子が一つも無い構造"""


class ValidationError(EquiCPIError, ValueError):
    """入力値・設定値の検証エラー"""


class ArgumentError(ValidationError):
    """演算への引数が定義域外"""


class ConfigurationError(EquiCPIError, ValueError):
    """レイアウトやパラメータ形状の不整合"""


class NumericalError(EquiCPIError, ArithmeticError):
    """NaN/Inf の発生"""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class TrainingDivergedError(NumericalError):
    """学習中に損失・特徴・パラメータのいずれかが非有限値になった

    Args:
        step(int): 発散したステップ番号（0始まり）
        loss(float): そのステップの損失。計算できなかった場合は NaN
        reason(str): 発散箇所の説明。None なら損失の発散
    """

    def __init__(self, step: int, loss: float, reason: Optional[str] = None):
        self.step = step
        self.loss = loss
        super().__init__(f"step {step}: {reason}" if reason else f"loss became {loss} at step {step}")


class DifferentiationError(EquiCPIError):
    """逆伝播の前提違反（スカラーでない損失など）"""


class CheckpointError(EquiCPIError, ValueError):
    """チェックポイントファイルの破損・版数不一致"""


class MetricUndefinedError(EquiCPIError, ValueError):
    """評価指標が定義できない入力（全ラベル同一、分散ゼロなど）"""
