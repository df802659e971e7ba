"""
统一异常定义
CLI 根据异常类型映射退出码：ConfigError -> 2，DataError -> 3，其它 CpcvError -> 1
"""

from typing import Any, Optional, Sequence


class CpcvError(Exception):
    """工作台异常基类"""


class ConfigError(CpcvError, ValueError):
    """配置或参数非法"""


class DataError(CpcvError, ValueError):
    """输入数据不可用"""


class FormatError(DataError):
    """音频文件格式错误，field 指出出错的头部字段"""

    def __init__(self, path: str, field: str, detail: str):
        self.path = path
        self.field = field
        super().__init__(f"{path}: 字段 {field} 不符合要求 ({detail})")


class InputTooShortError(DataError):
    """输入长度不足"""


class EmptyDatasetError(DataError):
    """没有可用的训练数据"""


class DegenerateBatchError(DataError):
    """batch 中没有负样本"""


class DuplicateUtteranceError(DataError):
    """清单中存在重复的 utt-id"""


class DimensionError(CpcvError, ValueError):
    """形状不匹配"""

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: 形状不匹配 {self.left} vs {self.right}")


class ContractError(CpcvError, ValueError):
    """调用前置条件不满足"""


class VariantError(ContractError):
    """CPC 变体不支持该方向"""


class NumericError(CpcvError, ArithmeticError):
    """数值异常（NaN/Inf 或发散）"""

    def __init__(self, message: str, last_finite: Optional[Any] = None):
        self.last_finite = last_finite
        super().__init__(message)


class TrainingDivergedError(NumericError):
    """梯度出现非有限值"""


class MissingPrerequisiteError(CpcvError):
    """流水线阶段缺少前置产物"""

    def __init__(self, stage: str, missing: str, producer: str):
        self.stage = stage
        self.missing = missing
        self.producer = producer
        super().__init__(f"阶段 {stage} 缺少输入 {missing}，请先运行阶段 '{producer}'")
