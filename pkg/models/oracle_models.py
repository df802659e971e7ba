"""
估计量校验实验的数据模型
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from models.errors import DataError


@dataclass
class DiscreteJoint:
    """离散联合分布 p[x, y]，行对应 X，列对应 Y"""
    p: np.ndarray

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=np.float64))
        if np.any(self.p < 0):
            raise DataError("联合分布存在负概率")
        if abs(self.p.sum() - 1.0) > 1e-12:
            raise DataError(f"联合分布总和必须为 1，实际 {self.p.sum():.15f}")

    @property
    def px(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.p.sum(axis=0)

    @classmethod
    def from_channel(cls, prior: np.ndarray, channel: np.ndarray) -> "DiscreteJoint":
        """p(x, y) = p(x) P(y | x)"""
        joint = np.asarray(prior, dtype=np.float64)[:, None] * np.asarray(channel, dtype=np.float64)
        return cls(joint / joint.sum())


@dataclass
class NceProblem:
    """数据样本、噪声样本与噪声对数密度"""
    data: np.ndarray
    noise: np.ndarray
    noise_logpdf: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        self.noise = np.asarray(self.noise, dtype=np.float64).reshape(-1)
        if self.data.size == 0 or self.noise.size == 0:
            raise DataError("数据样本与噪声样本都不能为空")
        for label, samples in (("data", self.data), ("noise", self.noise)):
            if not np.all(np.isfinite(self.noise_logpdf(samples))):
                raise DataError(f"噪声密度在 {label} 样本上不为正")

    @property
    def nu(self) -> float:
        return self.noise.size / self.data.size


@dataclass
class NceFit:
    """非归一化高斯 ln p(u) = -(u-mu)^2 / (2 sigma^2) + c 的拟合结果"""
    mu: float
    log_sigma: float
    c: float
    trace: List[float] = field(default_factory=list)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def log_partition(self) -> float:
        """ln Z(mu, sigma) = ln(sigma sqrt(2 pi))"""
        return float(self.log_sigma + 0.5 * np.log(2 * np.pi))


@dataclass
class BoundReport:
    """InfoNCE 下界实验的结果"""
    i_true: float
    loss: float
    batch: int
    trial: int = 0

    @property
    def bound(self) -> float:
        return float(np.log(self.batch) - self.loss)
