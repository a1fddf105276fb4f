"""
チェックポイントの保存と読込

ファイル構成::

    [CheckpointPreamble: magic "EQCP", u32 version, u32 header_length]
    [header: JSON (キー順固定, UTF-8)]
    [payload: float64 little-endian の連結]

header にはモデル設定のエコーとテンソルディレクトリ（名前・形状・バイトオフセット・学習対象か）を格納する。
"""
import os
from ctypes import LittleEndianStructure, c_char, c_uint32, sizeof
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List
import numpy as np
from pyequicpi.helper import SysLog, CheckpointError, canonical_json
from pyequicpi.difftrain.params import ParameterStore

logger = SysLog.logger

MAGIC = b"EQCP"
FORMAT_VERSION = 1
_FLOAT = np.dtype("<f8")


class CheckpointPreamble(LittleEndianStructure):
    _pack_ = 1
    _fields_ = [("Magic", c_char * 4), ("Version", c_uint32), ("HeaderLength", c_uint32)]


@dataclass
class Checkpoint:
    """学習済みモデル一式

    Args:
        params(ParameterStore): パラメータとバッファ
        config(dict): 設定のエコー（``model``, ``cutoff``, ``fingerprint`` など）
    """

    params: ParameterStore
    config: Dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        directory: List[Dict[str, Any]] = []
        chunks: List[bytes] = []
        offset = 0
        for name, tensor in self.params.items():
            raw = np.ascontiguousarray(tensor.value, dtype=_FLOAT).tobytes()
            directory.append(
                {
                    "name": name,
                    "shape": list(tensor.value.shape),
                    "offset": offset,
                    "trainable": self.params.is_trainable(name),
                }
            )
            chunks.append(raw)
            offset += len(raw)
        header = canonical_json(
            {"config": self.config, "format_version": FORMAT_VERSION, "payload_bytes": offset, "tensors": directory}
        ).encode("utf-8")
        preamble = CheckpointPreamble(MAGIC, FORMAT_VERSION, len(header))
        return bytes(preamble) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        """
        Raises:
            CheckpointError: magic 不一致、バージョン不一致、途中で切れたデータ、ディレクトリ不整合
        """
        size = sizeof(CheckpointPreamble)
        if len(data) < size:
            raise CheckpointError("truncated checkpoint: preamble incomplete")
        preamble = CheckpointPreamble.from_buffer_copy(data[:size])
        if bytes(data[:4]) != MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {bytes(data[:4])!r})")
        if preamble.Version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {preamble.Version}, expected {FORMAT_VERSION}")
        header_end = size + preamble.HeaderLength
        if len(data) < header_end:
            raise CheckpointError("truncated checkpoint: header incomplete")
        try:
            header = json.loads(data[size:header_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from e
        payload = data[header_end:]
        if len(payload) != header.get("payload_bytes"):
            raise CheckpointError(
                f"truncated checkpoint: payload holds {len(payload)} bytes, header declares {header.get('payload_bytes')}"
            )
        params = ParameterStore()
        expected_offset = 0
        for entry in header.get("tensors", []):
            try:
                name, shape, offset = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
            except (KeyError, TypeError, ValueError) as e:
                raise CheckpointError(f"malformed tensor directory entry {entry!r}") from e
            nbytes = int(np.prod(shape, dtype=np.int64)) * _FLOAT.itemsize
            if offset != expected_offset or offset + nbytes > len(payload):
                raise CheckpointError(f"tensor {name}: directory entry does not match the payload layout")
            value = np.frombuffer(payload, dtype=_FLOAT, count=nbytes // _FLOAT.itemsize, offset=offset)
            params.add(name, value.reshape(shape).astype(np.float64), trainable=bool(entry.get("trainable", True)))
            expected_offset += nbytes
        if expected_offset != len(payload):
            raise CheckpointError("tensor directory does not cover the payload")
        return cls(params=params, config=header.get("config", {}))


def save_checkpoint(checkpoint: Checkpoint, path: os.PathLike):
    data = checkpoint.to_bytes()
    with open(path, "wb") as fp:
        fp.write(data)
    logger.info(f"Checkpoint written to {path} ({len(checkpoint.params)} tensors, {len(data)} bytes)")


def load_checkpoint(path: os.PathLike) -> Checkpoint:
    with open(path, "rb") as fp:
        data = fp.read()
    return Checkpoint.from_bytes(data)
