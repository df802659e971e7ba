"""
验证 trial、打分集与 DCF 参数
"""

import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from models.errors import ConfigError, DataError

UTT_ID_PATTERN = re.compile(r"^(\d+)-(\d+)-(\d+)$")


def parse_utt_id(utt_id: str) -> Tuple[str, str, str]:
    """'1320-122612-0000' -> ('1320', '122612', '0000')"""
    match = UTT_ID_PATTERN.match(utt_id)
    if not match:
        raise DataError(f"无法解析的 utt-id: {utt_id}（需要 speaker-chapter-segment）")
    return match.group(1), match.group(2), match.group(3)


class TrialLabel(str, Enum):
    TARGET = "target"
    NONTARGET = "nontarget"


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: TrialLabel

    @property
    def is_target(self) -> bool:
        return self.label == TrialLabel.TARGET


@dataclass
class ScoreSet:
    """与 trial 一一对应的打分"""
    trials: List[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.trials) != self.scores.size:
            raise DataError(f"trial 数 {len(self.trials)} 与分数个数 {self.scores.size} 不一致")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("分数包含非有限值")

    @classmethod
    def from_arrays(cls, target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> "ScoreSet":
        """由两类分数直接构造（trial id 为占位符）"""
        trials = [Trial(f"t{i}", f"t{i}", TrialLabel.TARGET) for i in range(len(target_scores))]
        trials += [Trial(f"n{i}", f"n{i}", TrialLabel.NONTARGET) for i in range(len(nontarget_scores))]
        return cls(trials, np.concatenate([np.asarray(target_scores, float), np.asarray(nontarget_scores, float)]))

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.is_target for t in self.trials], dtype=bool)

    @property
    def target_scores(self) -> np.ndarray:
        return self.scores[self.labels]

    @property
    def nontarget_scores(self) -> np.ndarray:
        return self.scores[~self.labels]


class DcfParams(BaseModel):
    """检测代价函数参数"""
    c_frr: float = Field(1.0, description="漏检（错误拒绝）代价")
    c_far: float = Field(1.0, description="虚警（错误接受）代价")
    p_target: float = Field(0.01, description="目标 trial 的先验")

    @model_validator(mode="after")
    def _check(self) -> "DcfParams":
        if self.c_frr <= 0 or self.c_far <= 0:
            raise ConfigError(f"DCF 代价必须为正: c_frr={self.c_frr}, c_far={self.c_far}")
        if not 0 < self.p_target < 1:
            raise ConfigError(f"p_target 必须在 (0, 1) 内: {self.p_target}")
        return self

    @property
    def default_cost(self) -> float:
        """不做判决时的最小代价，用于归一化"""
        return min(self.c_frr * self.p_target, self.c_far * (1 - self.p_target))
