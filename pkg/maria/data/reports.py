"""
报告持久化
JSON 报告（带版本号）、CSV（供绘图）、JSONL（训练日志 / 比较记录）
"""
import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Type, TypeVar, Union

from loguru import logger
from pydantic import BaseModel, ValidationError

from maria.exceptions import DataError
from maria.schemas import REPORT_VERSION, TrainLog, TrainLogEntry

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_report(path: PathLike, report: BaseModel) -> Path:
    """写出 JSON 报告（字段顺序稳定，往返一致）"""
    out = atomic_write_text(path, report.model_dump_json(indent=2) + "\n")
    logger.info(f"[报告] {type(report).__name__} -> {out}")
    return out


def read_report(path: PathLike, model_cls: Type[ModelT]) -> ModelT:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.get("version", REPORT_VERSION)
    if version > REPORT_VERSION:
        logger.warning(f"[报告] {path} 版本 {version} 高于当前 {REPORT_VERSION}")
    return model_cls.model_validate(data)


def write_csv(path: PathLike, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> Path:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k) for k in columns})
    return atomic_write_text(path, buf.getvalue())


def write_jsonl(path: PathLike, items: Iterable[BaseModel], exclude_none: bool = True) -> Path:
    lines = [item.model_dump_json(exclude_none=exclude_none) for item in items]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: PathLike, model_cls: Type[ModelT]) -> List[ModelT]:
    """逐行校验；出错时报告行号"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"文件不存在: {path}", detail={"path": str(path)})
    items: List[ModelT] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            items.append(model_cls.model_validate_json(line))
        except ValidationError as e:
            raise DataError(f"{path}:{lineno} 格式错误", detail={"errors": e.errors(include_url=False, include_context=False)}) from e
    return items


def write_train_log(path: PathLike, log: TrainLog) -> Path:
    """TrainLog 的 JSONL 形式：每行 {"step", "loss", "lr", "holdout"?, "wall_ms"}"""
    return write_jsonl(path, log.entries)


def read_train_log(path: PathLike, kind: str = "ar") -> TrainLog:
    return TrainLog(kind=kind, entries=read_jsonl(path, TrainLogEntry))


def train_log_rows(log: TrainLog) -> List[dict]:
    return [e.model_dump() for e in log.entries]
