"""
结果文件输出：固定数值格式的 CSV / JSON，以及最后写出的运行清单（manifest）。

浮点数一律用最短往返十进制（repr），JSON 键排序，同一配置与种子
重复运行得到逐字节相同的数据文件；只有 manifest 中的墙钟时间不同。
"""

import dataclasses
import enum
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.utils import timezone

import pairsim

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def to_jsonable(value):
    """把 numpy 标量/数组、dataclass、枚举、元组等转成 JSON 原生类型；非有限浮点数写成 null。"""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        if hasattr(value, "to_dict"):
            return to_jsonable(value.to_dict())
        return to_jsonable(dataclasses.asdict(value))
    if isinstance(value, enum.Enum):
        return to_jsonable(value.value)
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def dumps_json(data) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def config_digest(raw_config) -> str:
    """配置的 sha256：对规范化 JSON（键排序、紧凑分隔符）取摘要。"""
    canonical = json.dumps(to_jsonable(raw_config), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def atomic_write(path: Path, data: bytes) -> None:
    """先写同目录临时文件再 os.replace，读者只会看到完整文件。"""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_hash: str
    tool_version: str
    seed: int | None
    started_at: str
    finished_at: str
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": [{"file": name, "sha256": digest} for name, digest in sorted(self.outputs.items())],
        }

    def verify(self, out_dir) -> bool:
        """清单中的每个摘要都与磁盘上的文件一致。"""
        out_dir = Path(out_dir)
        return all(
            (out_dir / name).exists() and file_digest(out_dir / name) == digest
            for name, digest in self.outputs.items()
        )


class OutputWriter:
    """
    一次命令运行的输出目录。数据文件逐个原子写入，
    finish() 最后写 manifest，作为整次运行完成的标记。
    """

    def __init__(self, out_dir, command: str, config_hash: str, seed: int | None = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_hash = config_hash
        self.seed = seed
        self.started_at = timezone.now()
        self.files = []

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        atomic_write(target, text.encode("utf-8"))
        if name not in self.files:
            self.files.append(name)
        logger.debug("wrote %s", target)
        return target

    def write_json(self, name: str, data) -> Path:
        return self.write_text(name, dumps_json(data))

    def register(self, name: str) -> Path:
        """登记一个由其他函数直接写出的文件，使其进入 manifest。"""
        if not self.path(name).exists():
            raise FileNotFoundError(self.path(name))
        if name not in self.files:
            self.files.append(name)
        return self.path(name)

    def finish(self) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config_hash=self.config_hash,
            tool_version=pairsim.__version__,
            seed=self.seed,
            started_at=self.started_at.isoformat(),
            finished_at=timezone.now().isoformat(),
            outputs={name: file_digest(self.path(name)) for name in self.files},
        )
        atomic_write(self.path(MANIFEST_NAME), dumps_json(manifest.to_dict()).encode("utf-8"))
        logger.info("run complete: %d files in %s", len(self.files), self.out_dir)
        return manifest
