"""
产物存储：版本化二进制容器（检查点 / 后端模型）、带索引的特征归档、内容哈希
"""

import hashlib
import json
import os
import struct
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from loguru import logger

from models.backend_models import DiagGmm, LdaModel, NormModel, PcaModel, PldaModel, TotalVariabilityModel
from models.cpc_models import CheckpointHeader
from models.errors import DataError, DuplicateUtteranceError
from models.feature_models import FeatureKind, FeatureMatrix

CONTAINER_MAGIC = b"CPCV"
CONTAINER_VERSION = 1
ARCHIVE_MAGIC = b"CPCA"
ARCHIVE_VERSION = 1
HASH_BYTES = 16


# ---------------------------------------------------------------- 内容哈希

def content_hash(*parts) -> str:
    """sha256 的前 16 字节（hex）"""
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            digest.update(part)
        elif isinstance(part, np.ndarray):
            digest.update(np.ascontiguousarray(part).tobytes())
        else:
            digest.update(json.dumps(part, sort_keys=True, default=str).encode("utf-8"))
        digest.update(b"\x00")
    return digest.digest()[:HASH_BYTES].hex()


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.digest()[:HASH_BYTES].hex()


def files_hash(paths: Iterable[str]) -> str:
    """多个文件按路径名排序后的组合哈希"""
    entries = []
    for path in sorted(paths):
        entries.append([os.path.basename(path), file_hash(path)])
    return content_hash(entries)


def _ensure_parent(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


# ---------------------------------------------------------------- 容器

def write_container(path: str, tensors: Dict[str, np.ndarray]):
    """magic + u32 版本，之后每个参数：u32 名字长度 + 名字 + u32 rank + dims + 小端 f32"""
    _ensure_parent(path)
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        for name, array in tensors.items():
            array = np.asarray(array)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", array.ndim))
            if array.ndim:
                fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(fh, size: int, path: str, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise DataError(f"{path}: 读取 {what} 时文件被截断")
    return data


def read_container(path: str) -> "OrderedDict[str, np.ndarray]":
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as fh:
        if fh.read(4) != CONTAINER_MAGIC:
            raise DataError(f"{path}: 不是 CPCV 容器")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CONTAINER_VERSION:
            raise DataError(f"{path}: 不支持的容器版本 {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"{path}: 记录头被截断")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "dims")) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * count, path, name), dtype="<f4")
            tensors[name] = data.reshape(dims).astype(np.float32)
    return tensors


def save_checkpoint(path: str, state: Dict[str, np.ndarray], header: CheckpointHeader):
    """参数写入容器，头信息写入同名 .json sidecar"""
    write_container(path, state)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        fh.write(header.model_dump_json(indent=2))
    logger.info(f"[store] 检查点已保存: {path} (epoch {header.epoch}, dev loss {header.dev_loss:.4f})")


def load_checkpoint(path: str) -> Tuple["OrderedDict[str, np.ndarray]", CheckpointHeader]:
    sidecar = path + ".json"
    if not os.path.exists(sidecar):
        raise DataError(f"检查点缺少头文件 {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as fh:
        header = CheckpointHeader.model_validate_json(fh.read())
    return read_container(path), header


# ---------------------------------------------------------------- 后端模型

def model_to_arrays(model) -> Dict[str, np.ndarray]:
    if isinstance(model, DiagGmm):
        return {"weights": model.weights, "means": model.means, "vars": model.vars}
    if isinstance(model, TotalVariabilityModel):
        arrays = {f"ubm.{k}": v for k, v in model_to_arrays(model.ubm).items()}
        arrays["t_matrix"] = model.t_matrix
        return arrays
    if isinstance(model, PcaModel):
        return {"mean": model.mean, "basis": model.basis, "explained_ratio": np.asarray(model.explained_ratio),
                "eigenvalues": model.eigenvalues}
    if isinstance(model, LdaModel):
        return {"mean": model.mean, "basis": model.basis, "eigenvalues": model.eigenvalues}
    if isinstance(model, NormModel):
        return {"mean": model.mean}
    if isinstance(model, PldaModel):
        return {"mu": model.mu, "between": model.between, "within": model.within}
    raise DataError(f"不支持保存的模型类型: {type(model).__name__}")


def _gmm_from(arrays: Dict[str, np.ndarray], prefix: str = "") -> DiagGmm:
    weights = arrays[f"{prefix}weights"].astype(np.float64)
    return DiagGmm(weights / weights.sum(), arrays[f"{prefix}means"].astype(np.float64),
                   arrays[f"{prefix}vars"].astype(np.float64))


def save_model(path: str, model):
    write_container(path, model_to_arrays(model))


def load_model(path: str, kind: type):
    """按类型从容器恢复后端模型（以 f32 存储，读回后转为 f64）"""
    arrays = {k: v.astype(np.float64) for k, v in read_container(path).items()}
    try:
        if kind is DiagGmm:
            return _gmm_from(arrays)
        if kind is TotalVariabilityModel:
            return TotalVariabilityModel(_gmm_from(arrays, "ubm."), arrays["t_matrix"])
        if kind is PcaModel:
            return PcaModel(arrays["mean"], arrays["basis"], float(arrays["explained_ratio"]), arrays["eigenvalues"])
        if kind is LdaModel:
            return LdaModel(arrays["mean"], arrays["basis"], arrays["eigenvalues"])
        if kind is NormModel:
            return NormModel(arrays["mean"])
        if kind is PldaModel:
            return PldaModel(arrays["mu"], arrays["between"], arrays["within"])
    except KeyError as e:
        raise DataError(f"{path}: 缺少字段 {e}")
    raise DataError(f"不支持读取的模型类型: {kind.__name__}")


# ---------------------------------------------------------------- 特征归档

class FeatureArchiveWriter:
    """
    单文件特征归档
    记录：u32 id 长度 + id + u32 rows + u32 cols + u8 kind + 小端 f32 数据
    结尾：u64 偏移表 + u32 记录数 + u64 偏移表起点；另写一份 "utt-id offset" 文本索引
    """

    def __init__(self, path: str):
        _ensure_parent(path)
        self.path = path
        self._fh = open(path, "wb")
        self._fh.write(ARCHIVE_MAGIC)
        self._fh.write(struct.pack("<I", ARCHIVE_VERSION))
        self._offsets: "OrderedDict[str, int]" = OrderedDict()

    def write(self, utt_id: str, feature: FeatureMatrix):
        if utt_id in self._offsets:
            raise DuplicateUtteranceError(f"归档中重复的 utt-id: {utt_id}")
        self._offsets[utt_id] = self._fh.tell()
        encoded = utt_id.encode("utf-8")
        self._fh.write(struct.pack("<I", len(encoded)))
        self._fh.write(encoded)
        self._fh.write(struct.pack("<IIB", feature.rows, feature.cols, feature.kind.code))
        self._fh.write(np.ascontiguousarray(feature.values, dtype="<f4").tobytes())

    def close(self):
        if self._fh.closed:
            return
        table_start = self._fh.tell()
        offsets = list(self._offsets.values())
        if offsets:
            self._fh.write(struct.pack(f"<{len(offsets)}Q", *offsets))
        self._fh.write(struct.pack("<IQ", len(offsets), table_start))
        self._fh.close()
        with open(self.path + ".idx", "w", encoding="utf-8") as fh:
            for utt_id, offset in self._offsets.items():
                fh.write(f"{utt_id} {offset}\n")

    def __enter__(self) -> "FeatureArchiveWriter":
        return self

    def __exit__(self, *exc_info):
        self.close()


class FeatureArchive:
    """特征归档读取器（按写入顺序迭代）"""

    TRAILER = struct.calcsize("<IQ")

    def __init__(self, path: str):
        self.path = path
        if not os.path.exists(path):
            raise DataError(f"特征归档不存在: {path}")
        with open(path, "rb") as fh:
            if fh.read(4) != ARCHIVE_MAGIC:
                raise DataError(f"{path}: 不是特征归档")
            (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
            if version != ARCHIVE_VERSION:
                raise DataError(f"{path}: 不支持的归档版本 {version}")
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            if size < 8 + self.TRAILER:
                raise DataError(f"{path}: 缺少偏移表")
            fh.seek(size - self.TRAILER)
            count, table_start = struct.unpack("<IQ", fh.read(self.TRAILER))
            fh.seek(table_start)
            offsets = struct.unpack(f"<{count}Q", _read_exact(fh, 8 * count, path, "offset table")) if count else ()
            self._offsets: "OrderedDict[str, int]" = OrderedDict()
            for offset in offsets:
                fh.seek(offset)
                (id_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "id length"))
                self._offsets[_read_exact(fh, id_len, path, "id").decode("utf-8")] = offset

    def keys(self) -> List[str]:
        return list(self._offsets.keys())

    def __len__(self) -> int:
        return len(self._offsets)

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._offsets

    def __getitem__(self, utt_id: str) -> FeatureMatrix:
        if utt_id not in self._offsets:
            raise KeyError(utt_id)
        with open(self.path, "rb") as fh:
            fh.seek(self._offsets[utt_id])
            (id_len,) = struct.unpack("<I", fh.read(4))
            fh.seek(id_len, os.SEEK_CUR)
            rows, cols, code = struct.unpack("<IIB", _read_exact(fh, 9, self.path, utt_id))
            data = np.frombuffer(_read_exact(fh, 4 * rows * cols, self.path, utt_id), dtype="<f4")
        return FeatureMatrix(values=data.reshape(rows, cols).astype(np.float64), kind=FeatureKind.from_code(code))

    def items(self) -> Iterator[Tuple[str, FeatureMatrix]]:
        for utt_id in self._offsets:
            yield utt_id, self[utt_id]


def write_archive(path: str, features: Dict[str, FeatureMatrix]):
    with FeatureArchiveWriter(path) as writer:
        for utt_id, feature in features.items():
            writer.write(utt_id, feature)


def read_archive(path: str) -> "OrderedDict[str, FeatureMatrix]":
    return OrderedDict(FeatureArchive(path).items())


def read_text_index(path: str) -> "OrderedDict[str, int]":
    index: "OrderedDict[str, int]" = OrderedDict()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                utt_id, offset = line.split()
                index[utt_id] = int(offset)
    return index
