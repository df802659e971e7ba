"""
经典后端的参数容器：GMM/UBM、充分统计量、总变化空间、嵌入集合、PCA/LDA/PLDA
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from models.errors import DataError, DimensionError


@dataclass
class DiagGmm:
    """对角协方差 GMM"""
    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.vars = np.atleast_2d(np.asarray(self.vars, dtype=np.float64))
        if self.means.shape != self.vars.shape or self.weights.shape != (self.means.shape[0],):
            raise DimensionError("DiagGmm", self.means.shape, self.vars.shape)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataError(f"GMM 权重必须非负且和为 1，实际和 {self.weights.sum()}")
        if np.any(self.vars <= 0) or not np.all(np.isfinite(self.means)):
            raise DataError("GMM 方差必须为正，均值必须有限")

    @property
    def num_mixtures(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def supervector(self) -> np.ndarray:
        return self.means.reshape(-1)

    def copy(self) -> "DiagGmm":
        return DiagGmm(self.weights.copy(), self.means.copy(), self.vars.copy())


@dataclass
class SuffStats:
    """Baum-Welch 零阶/一阶统计量"""
    n: np.ndarray
    f: np.ndarray
    frames: int = 0

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.atleast_2d(np.asarray(self.f, dtype=np.float64))
        if self.f.shape[0] != self.n.shape[0]:
            raise DimensionError("SuffStats", self.n.shape, self.f.shape)

    def __add__(self, other: "SuffStats") -> "SuffStats":
        if self.f.shape != other.f.shape:
            raise DimensionError("SuffStats.__add__", self.f.shape, other.f.shape)
        return SuffStats(self.n + other.n, self.f + other.f, self.frames + other.frames)

    @classmethod
    def zeros(cls, num_mixtures: int, dim: int) -> "SuffStats":
        return cls(np.zeros(num_mixtures), np.zeros((num_mixtures, dim)), 0)

    def to_matrix(self) -> np.ndarray:
        """归档用的 [N | F] 矩阵"""
        return np.hstack([self.n[:, None], self.f])

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, frames: Optional[int] = None) -> "SuffStats":
        matrix = np.asarray(matrix, dtype=np.float64)
        n = matrix[:, 0]
        return cls(n, matrix[:, 1:], int(round(n.sum())) if frames is None else frames)


@dataclass
class TotalVariabilityModel:
    """M = m + T w"""
    ubm: DiagGmm
    t_matrix: np.ndarray

    def __post_init__(self):
        self.t_matrix = np.asarray(self.t_matrix, dtype=np.float64)
        expected = self.ubm.num_mixtures * self.ubm.dim
        if self.t_matrix.ndim != 2 or self.t_matrix.shape[0] != expected:
            raise DimensionError("TotalVariabilityModel", self.t_matrix.shape, (expected, self.rank))
        if self.rank >= expected:
            raise DataError(f"i-vector 维度 {self.rank} 必须小于超向量维度 {expected}")
        if not np.all(np.isfinite(self.t_matrix)):
            raise DataError("T 矩阵包含非有限值")

    @property
    def rank(self) -> int:
        return self.t_matrix.shape[1]


@dataclass
class EmbeddingSet:
    """utt-id -> 定长向量，以及 utt-id -> speaker"""
    entries: Dict[str, np.ndarray]
    labels: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        dims = {np.asarray(v).shape for v in self.entries.values()}
        if len(dims) > 1:
            raise DataError(f"嵌入维度不一致: {sorted(dims)}")
        self.entries = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in self.entries.items()}
        for utt_id, vector in self.entries.items():
            if not np.all(np.isfinite(vector)):
                raise DataError(f"嵌入 {utt_id} 包含非有限值")

    @property
    def ids(self) -> List[str]:
        return list(self.entries.keys())

    @property
    def dim(self) -> int:
        return next(iter(self.entries.values())).size if self.entries else 0

    def matrix(self) -> np.ndarray:
        return np.vstack([self.entries[i] for i in self.ids])

    def speakers(self) -> List[str]:
        return [self.labels[i] for i in self.ids]

    def replace(self, matrix: np.ndarray) -> "EmbeddingSet":
        """按当前顺序替换向量，保留标签"""
        return EmbeddingSet({utt_id: row for utt_id, row in zip(self.ids, matrix)}, dict(self.labels))

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray
    explained_ratio: float
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class LdaModel:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class NormModel:
    """训练集均值，用于中心化后做长度归一"""
    mean: np.ndarray


@dataclass
class PldaModel:
    """两协方差 PLDA：x = mu + y + e，y ~ N(0, B)，e ~ N(0, W)"""
    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray

    def __post_init__(self):
        d = self.mu.shape[0]
        if self.between.shape != (d, d) or self.within.shape != (d, d):
            raise DimensionError("PldaModel", self.between.shape, self.within.shape)
