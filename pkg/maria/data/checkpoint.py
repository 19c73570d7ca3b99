"""
检查点序列化

文件布局（小端）:
    [8 字节 magic][u32 版本][u32 头长度][JSON 头][按头中顺序排列的 f32 张量][前面所有字节的 SHA-256]
"""
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from loguru import logger

from maria.exceptions import CheckpointKindError, ContractError, FormatVersionError, IntegrityError
from maria.fusion import FusionHead, MariaModel
from maria.numerics import Tensor
from maria.schemas import InitKind, ModelConfig
from maria.transformer import TransformerModel

MAGIC = b"MARIACKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST_LEN = 32

Checkpointable = Union[TransformerModel, FusionHead]


def _kind_of(obj: Checkpointable) -> str:
    if isinstance(obj, FusionHead):
        return "fusion"
    if isinstance(obj, TransformerModel):
        return "ar" if obj.is_causal else "mlm"
    raise ContractError(f"无法保存类型 {type(obj).__name__}")


def _header_and_tensors(obj: Checkpointable) -> tuple:
    kind = _kind_of(obj)
    if kind == "fusion":
        tensors: Dict[str, np.ndarray] = {"W3": obj.W3.data}
        if obj.bias is not None:
            tensors["bias"] = obj.bias.data
        config = {
            "d1": obj.d1,
            "d2": obj.d2,
            "v": obj.v,
            "init": obj.init_kind.value,
            "train_steps": obj.train_steps,
            "bias": obj.bias is not None,
        }
    else:
        tensors = {name: t.data for name, t in obj.params.items()}
        config = obj.config.model_dump(mode="json")
    header = {
        "kind": kind,
        "config": config,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
    }
    return header, tensors


def to_bytes(obj: Checkpointable) -> bytes:
    header, tensors = _header_and_tensors(obj)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts: List[bytes] = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
    for entry in header["tensors"]:
        parts.append(np.ascontiguousarray(tensors[entry["name"]], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: Union[str, Path], obj: Checkpointable) -> Path:
    """原子写入：先写临时文件再 rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = to_bytes(obj)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"[检查点] 已保存 {_kind_of(obj)} -> {path} ({len(payload)} 字节)")
    return path


def from_bytes(payload: bytes, expected_kind: Optional[str] = None, source: str = "<bytes>") -> Checkpointable:
    if len(payload) < _PREFIX.size + _DIGEST_LEN:
        raise IntegrityError(f"检查点被截断: {source}", detail={"size": len(payload)})
    magic, version, header_len = _PREFIX.unpack_from(payload, 0)
    if magic != MAGIC:
        raise IntegrityError(f"不是 MARIA 检查点（magic 不符）: {source}")
    if version > FORMAT_VERSION:
        raise FormatVersionError(
            f"检查点版本 {version} 高于支持的版本 {FORMAT_VERSION}: {source}",
            detail={"version": version, "supported": FORMAT_VERSION},
        )
    body, digest = payload[:-_DIGEST_LEN], payload[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"检查点校验和不符（文件损坏或被截断）: {source}")

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"检查点头无法解析: {source}") from e

    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointKindError(
            f"检查点种类为 {kind}，期望 {expected_kind}: {source}",
            detail={"expected": expected_kind, "actual": kind},
        )

    offset = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(body):
            raise IntegrityError(f"张量 {entry['name']} 数据不完整: {source}")
        arrays[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        offset = end
    if offset != len(body):
        raise IntegrityError(f"检查点尾部有多余字节: {source}")

    config = header["config"]
    if kind == "fusion":
        bias = arrays.get("bias")
        return FusionHead(
            W3=Tensor(arrays["W3"], requires_grad=True, name="W3"),
            d1=config["d1"],
            d2=config["d2"],
            v=config["v"],
            init_kind=InitKind(config["init"]),
            bias=Tensor(bias, requires_grad=True, name="bias") if bias is not None else None,
            train_steps=config["train_steps"],
        )
    if kind in ("ar", "mlm"):
        model_config = ModelConfig(**config)
        params = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()}
        return TransformerModel(model_config, params)
    raise IntegrityError(f"未知的检查点种类 {kind!r}: {source}")


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> Checkpointable:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"检查点不存在: {path}", detail={"path": str(path)})
    obj = from_bytes(path.read_bytes(), expected_kind=expected_kind, source=str(path))
    logger.debug(f"[检查点] 已加载 {_kind_of(obj)} <- {path}")
    return obj


def load_maria(ar_path: Union[str, Path], mlm_path: Union[str, Path], head_path: Union[str, Path]) -> MariaModel:
    """加载 AR、MLM 与融合头并校验维度"""
    ar = load_checkpoint(ar_path, expected_kind="ar")
    mlm = load_checkpoint(mlm_path, expected_kind="mlm")
    head = load_checkpoint(head_path, expected_kind="fusion")
    return MariaModel(ar=ar, mlm=mlm, head=head)
