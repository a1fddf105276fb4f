"""設定値管理モジュール

既定値の辞書に JSON 設定ファイルを深いマージで重ね、変更点を警告ログとして報告する。
ネストしたデータクラスとの相互変換もここで行う。
"""
import os
import json
import hashlib
import dataclasses
from collections.abc import Mapping
import copy
from enum import Enum
from typing import Any, Dict, Optional
from pyequicpi.helper.logging_service import SysLog
from pyequicpi.helper.errors import ValidationError

logger = SysLog.logger


def canonical_json(data: Any, indent: Optional[int] = None) -> str:
    """キー順を固定したJSON文字列（成果物のバイト再現性のため）"""
    if indent is None:
        return json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return json.dumps(data, ensure_ascii=False, indent=indent, sort_keys=True, separators=(",", ": "))


def to_plain(obj: Any) -> Any:
    """データクラス・タプルを JSON へ出力可能な dict/list に変換"""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.name
    return obj


def build_dataclass(cls, data: Mapping):
    """辞書からネストしたデータクラスを生成する

    フィールド型がデータクラスであれば再帰的に生成し、それ以外の値はそのまま渡す。
    値の正規化と検証は各データクラスの ``__post_init__`` に任せる。
    """
    kwargs = {}
    for f in dataclasses.fields(cls):
        if not f.init or f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) and isinstance(value, Mapping):
            value = build_dataclass(f.type, value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{cls.__name__}: {e}") from e


class Settings:
    """既定値 + 設定ファイル + 上書き値 の解決器

    Args:
        initial_data(dict): 既定値（ネストした辞書）
        file_name(os.PathLike): 読み込むJSON設定ファイル。省略時は既定値のみ
    """

    def __init__(self, initial_data: Dict, file_name: Optional[os.PathLike] = None):
        self._setting_data = copy.deepcopy(initial_data)
        self._origin_data = copy.deepcopy(initial_data)
        self._logger = SysLog.logger
        self._fullpath = None
        if file_name is not None:
            self._fullpath = os.fspath(file_name)
            self.load()

    @property
    def file(self) -> Optional[str]:
        return self._fullpath

    @property
    def data(self) -> Dict:
        return self._setting_data

    def _deepupdate(self, dict_base, other, path: str = ""):
        for k, v in other.items():
            key_path = f"{path}.{k}" if path else str(k)
            if k not in dict_base:
                raise ValidationError(f"Unknown setting: {key_path}")
            if isinstance(v, Mapping) and isinstance(dict_base[k], Mapping):
                self._deepupdate(dict_base[k], v, key_path)
            else:
                dict_base[k] = v

    def _report_diff(self, before: dict, after: dict, path: str = ""):
        for k, v in after.items():
            key_path = f"{path}.{k}" if path else str(k)
            if isinstance(v, Mapping) and k in before and isinstance(before[k], Mapping):
                self._report_diff(before[k], v, key_path)
            elif k in before and before[k] != v:
                self._logger.warning("Setting changed : " + key_path + " : " + str(before[k]) + " -> " + str(v))

    def load(self):
        try:
            with open(self._fullpath, "r", encoding="utf-8") as fp:
                loaded = json.load(fp)
        except json.JSONDecodeError as e:
            logger.exception(e)
            raise ValidationError(f"{self._fullpath}: invalid JSON ({e})") from e
        if not isinstance(loaded, Mapping):
            raise ValidationError(f"{self._fullpath}: top level must be an object")
        self.update(loaded)

    def update(self, overrides: Mapping):
        """設定値の上書き（設定ファイル、コマンドライン引数）"""
        before = copy.deepcopy(self._setting_data)
        self._deepupdate(self._setting_data, overrides)
        self._report_diff(before, self._setting_data, "")
        self._origin_data = copy.deepcopy(self._setting_data)

    def dumps(self) -> str:
        return canonical_json(self._setting_data, indent=4)

    def config_hash(self) -> str:
        digest = hashlib.sha256(canonical_json(self._setting_data).encode("utf-8")).hexdigest()
        return digest[:16]
