"""
CPC 模型相关的数据模型
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional

from pydantic import BaseModel, Field, model_validator

from models.errors import ConfigError

ENCODER_KERNELS = [10, 8, 4, 4, 4]
ENCODER_STRIDES = [5, 4, 2, 2, 2]
ENCODER_PADDINGS = [3, 2, 1, 1, 1]
DOWNSAMPLING = 160


class CpcVariant(str, Enum):
    """CPC 变体"""
    CDCK2 = "CDCK2"  # 单 GRU，256 维
    CDCK5 = "CDCK5"  # 单向两层 GRU，40 维
    CDCK6 = "CDCK6"  # 前向 + 后向两个 GRU，共享编码器


class Direction(str, Enum):
    FWD = "fwd"
    BWD = "bwd"


# (ar_hidden, ar_layers, directions)
_VARIANT_GEOMETRY = {
    CpcVariant.CDCK2: (256, 1, 1),
    CpcVariant.CDCK5: (40, 2, 1),
    CpcVariant.CDCK6: (128, 1, 2),
}


class CpcConfig(BaseModel):
    """CPC 模型与训练配置"""
    variant: CpcVariant = Field(CpcVariant.CDCK2, description="模型变体")
    kernels: List[int] = Field(default_factory=lambda: list(ENCODER_KERNELS), description="编码器卷积核大小")
    strides: List[int] = Field(default_factory=lambda: list(ENCODER_STRIDES), description="编码器步长")
    paddings: List[int] = Field(default_factory=lambda: list(ENCODER_PADDINGS), description="编码器零填充")
    encoder_channels: int = Field(512, description="编码器通道数（latent 维度）")
    ar_hidden: int = Field(256, description="GRU 隐藏维度")
    ar_layers: int = Field(1, description="GRU 层数")
    directions: int = Field(1, description="自回归方向数")
    k: int = Field(12, description="预测步数")
    batch: int = Field(64, description="batch 大小（同时也是负样本来源）")
    crop: int = Field(20480, description="训练裁剪长度（采样点）")
    crops_per_utterance: int = Field(1, description="每个 epoch 每条语音裁剪次数")
    lr: float = Field(1e-4, description="Adam 学习率")
    training_dtype: str = Field("float32", description="训练精度 float32/float64")

    @model_validator(mode="after")
    def _check(self) -> "CpcConfig":
        if not (len(self.kernels) == len(self.strides) == len(self.paddings)):
            raise ConfigError("kernels/strides/paddings 长度必须一致")
        factor = 1
        for s in self.strides:
            factor *= s
        if factor != DOWNSAMPLING:
            raise ConfigError(f"编码器总步长必须为 {DOWNSAMPLING}，实际 {factor}")
        if self.crop % DOWNSAMPLING != 0:
            raise ConfigError(f"crop={self.crop} 必须是 {DOWNSAMPLING} 的整数倍")
        if self.k < 1 or self.crop // DOWNSAMPLING < self.k + 1:
            raise ConfigError(f"crop={self.crop} 太短，无法做 k={self.k} 步预测")
        if self.batch < 2:
            raise ConfigError("batch 至少为 2（需要 batch 内负样本）")
        if min(self.encoder_channels, self.ar_hidden, self.ar_layers, self.crops_per_utterance) < 1:
            raise ConfigError("encoder_channels/ar_hidden/ar_layers/crops_per_utterance 必须为正")
        if self.directions not in (1, 2):
            raise ConfigError(f"directions 只能是 1 或 2: {self.directions}")
        if self.lr <= 0:
            raise ConfigError(f"lr 必须为正: {self.lr}")
        if self.training_dtype not in ("float32", "float64"):
            raise ConfigError(f"training_dtype 只能是 float32/float64: {self.training_dtype}")
        return self

    @classmethod
    def for_variant(cls, variant: CpcVariant, **overrides: Any) -> "CpcConfig":
        """按变体表填充 GRU 几何，再应用桌面规模的覆盖项（encoder_channels/ar_hidden/batch/crop/k/lr）"""
        variant = CpcVariant(variant)
        hidden, layers, directions = _VARIANT_GEOMETRY[variant]
        values = {"variant": variant, "ar_hidden": hidden, "ar_layers": layers, "directions": directions}
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    @property
    def feature_dim(self) -> int:
        return self.ar_hidden * self.directions

    @property
    def crop_frames(self) -> int:
        return self.crop // DOWNSAMPLING

    @property
    def direction_list(self) -> List[Direction]:
        return [Direction.FWD, Direction.BWD][: self.directions]


@dataclass
class LossReport:
    """InfoNCE 结果：k 步与 batch 平均的损失，以及第 k 步的准确率"""
    nce_loss: float
    accuracy: float
    batch: int
    loss: Optional[Any] = field(default=None, repr=False)  # autodiff Tensor，训练时用于反向传播

    @property
    def bound(self) -> float:
        """互信息下界 ln(B) - loss"""
        return math.log(self.batch) - self.nce_loss


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_accuracy: float
    bound: float


class CheckpointHeader(BaseModel):
    """检查点 sidecar 头"""
    variant: CpcVariant = Field(..., description="模型变体")
    epoch: int = Field(..., description="保存时的 epoch")
    dev_loss: float = Field(..., description="dev NCE 损失")
    dev_accuracy: float = Field(0.0, description="dev 第 k 步准确率")
    config: CpcConfig = Field(..., description="完整的模型配置")
