"""
流水线相关的数据模型
"""

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

MANIFEST_COLUMNS = ["utt_id", "speaker", "chapter", "path", "duration"]
SPLITS = ["train", "dev", "test"]


class Stage(str, Enum):
    """流水线阶段"""
    INGEST = "ingest"
    EXTRACT_MFCC = "extract-mfcc"
    TRAIN_CPC = "train-cpc"
    EXTRACT_CPC = "extract-cpc"
    FUSE = "fuse"
    TRAIN_UBM = "train-ubm"
    TRAIN_TV = "train-tv"
    EXTRACT_IVECTORS = "extract-ivectors"
    POOL = "pool"
    TRAIN_BACKEND = "train-backend"
    SCORE = "score"
    SCORE_UBM = "score-ubm"
    EVAL = "eval"
    PLOT = "plot"


class FeatureChoice(str, Enum):
    MFCC = "mfcc"
    CPC = "cpc"
    FUSED = "fused"


class Summarization(str, Enum):
    POOL = "pool"
    IVECTOR = "ivector"


class StageReceipt(BaseModel):
    """阶段回执：输入哈希、输出哈希与耗时"""
    stage: str = Field(..., description="阶段名")
    inputs_hash: str = Field(..., description="输入文件与参数的内容哈希")
    outputs_hash: str = Field(..., description="输出文件的内容哈希")
    wall_time: float = Field(..., description="耗时（秒）")
    finished_at: str = Field(..., description="完成时间 ISO 格式")
    outputs: List[str] = Field(default_factory=list, description="输出文件（相对工作目录）")


class EvalResult(BaseModel):
    """eval 阶段的结果"""
    feature: str = Field(..., description="特征类型")
    dim: int = Field(..., description="特征维度")
    summarization: str = Field(..., description="池化方式")
    lda_dim: int = Field(..., description="LDA 维度")
    protocol: int = Field(..., description="trial 协议")
    trials: int = Field(..., description="trial 数")
    targets: int = Field(..., description="target trial 数")
    eer: float = Field(..., description="EER（比例）")
    min_dcf: float = Field(..., description="最小 DCF")
    min_dcf_threshold: float = Field(..., description="最小 DCF 对应的阈值")
    normalized_min_dcf: float = Field(..., description="按默认代价归一化的最小 DCF")
    ubm_eer: Optional[float] = Field(None, description="GMM-UBM 打分路径的 EER（若已运行 score-ubm）")
    extra: Dict[str, float] = Field(default_factory=dict, description="其它指标")
