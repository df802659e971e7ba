"""
音频与特征相关的数据模型
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, Field, model_validator

from models.errors import ConfigError, DataError


class FeatureKind(str, Enum):
    """特征类型（归档中以 u8 存储）"""
    MFCC = "mfcc"
    CPC = "cpc"
    FUSED = "fused"
    EMBEDDING = "embedding"
    STATS = "stats"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "FeatureKind":
        for kind, value in _KIND_CODES.items():
            if value == code:
                return kind
        raise DataError(f"未知的特征类型编码: {code}")


_KIND_CODES = {
    FeatureKind.MFCC: 0,
    FeatureKind.CPC: 1,
    FeatureKind.FUSED: 2,
    FeatureKind.EMBEDDING: 3,
    FeatureKind.STATS: 4,
}


@dataclass
class Waveform:
    """单声道波形，取值范围 [-1, 1]"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("波形必须是非空的一维数组")
        if self.sample_rate <= 0:
            raise DataError(f"采样率必须为正: {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("波形包含非有限值")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0:
            raise DataError(f"波形取值超出 [-1, 1]: 峰值 {peak:.4f}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


class FeatureConfig(BaseModel):
    """MFCC 配置（默认值即论文中的 MFCC 配置表）"""
    sample_rate: int = Field(16000, description="采样率 Hz")
    frame_length: float = Field(25.0, description="帧长 ms")
    frame_shift: float = Field(10.0, description="帧移 ms")
    num_mel: int = Field(40, description="Mel 滤波器个数")
    low_cut: float = Field(20.0, description="Mel 低频截止 Hz")
    high_cut: float = Field(7600.0, description="Mel 高频截止 Hz")
    num_ceps: int = Field(24, description="DCT 后保留的倒谱系数个数")
    preemphasis: float = Field(0.97, description="预加重系数")
    energy_floor: float = Field(1e-10, description="Mel 能量下限")

    @model_validator(mode="after")
    def _check_ranges(self) -> "FeatureConfig":
        if not (0 < self.low_cut < self.high_cut <= self.sample_rate / 2):
            raise ConfigError(
                f"要求 0 < low_cut < high_cut <= {self.sample_rate / 2}，"
                f"实际 low_cut={self.low_cut}, high_cut={self.high_cut}"
            )
        if self.num_ceps > self.num_mel:
            raise ConfigError(f"num_ceps={self.num_ceps} 不能超过 num_mel={self.num_mel}")
        return self

    @property
    def frame_length_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate / 1000))

    @property
    def frame_shift_samples(self) -> int:
        return int(round(self.frame_shift * self.sample_rate / 1000))

    @property
    def fft_size(self) -> int:
        n = 1
        while n < self.frame_length_samples:
            n *= 2
        return n


@dataclass
class FeatureMatrix:
    """帧级特征矩阵 frames x dims"""
    values: np.ndarray
    kind: FeatureKind
    frame_shift: float = 10.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"特征矩阵至少需要一行，实际形状 {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.kind.value} 特征包含非有限值")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    """三角 Mel 滤波器组 num_mel x (nfft/2+1)"""
    weights: np.ndarray
    center_freqs: np.ndarray = field(repr=False)

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]
