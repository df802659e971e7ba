"""
trial 列表生成（两种协议）与 EER / DET / DCF
"""

import os
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import ndtri

from models.errors import DataError
from models.trial_models import DcfParams, ScoreSet, Trial, TrialLabel

PROBIT_CLAMP = 1e-6


def error_sweep(s: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """阈值取所有不同分数再加 +inf；FAR(t)=P(nontarget>=t)，FRR(t)=P(target<t)"""
    targets = np.sort(s.target_scores)
    nontargets = np.sort(s.nontarget_scores)
    if targets.size == 0 or nontargets.size == 0:
        raise DataError(f"需要同时包含 target 和 nontarget，实际 {targets.size}/{nontargets.size}")
    thresholds = np.append(np.unique(s.scores), np.inf)
    far = (nontargets.size - np.searchsorted(nontargets, thresholds, side="left")) / nontargets.size
    frr = np.searchsorted(targets, thresholds, side="left") / targets.size
    return thresholds, far, frr


def compute_eer(s: ScoreSet) -> float:
    """FRR 首次不小于 FAR 处，与前一个工作点之间线性插值"""
    _, far, frr = error_sweep(s)
    i = int(np.argmax(frr >= far))
    if i == 0:
        return float(frr[0])
    gap_prev = far[i - 1] - frr[i - 1]
    gap_cur = far[i] - frr[i]
    alpha = gap_prev / (gap_prev - gap_cur)
    return float(far[i - 1] + alpha * (far[i] - far[i - 1]))


def probit(p):
    """标准正态分布逆 CDF，输入截断到 [1e-6, 1-1e-6]"""
    return ndtri(np.clip(np.asarray(p, dtype=np.float64), PROBIT_CLAMP, 1 - PROBIT_CLAMP))


def compute_det(s: ScoreSet) -> pd.DataFrame:
    """每个阈值一个 DET 点，列为 far, frr, probit_far, probit_frr"""
    _, far, frr = error_sweep(s)
    return pd.DataFrame({"far": far, "frr": frr, "probit_far": probit(far), "probit_frr": probit(frr)})


def compute_dcf(s: ScoreSet, params: DcfParams = None) -> Tuple[float, float]:
    """扫描阈值求最小 DCF，返回 (最小值, 对应阈值)"""
    params = params or DcfParams()
    thresholds, far, frr = error_sweep(s)
    cost = params.c_frr * params.p_target * frr + params.c_far * (1 - params.p_target) * far
    i = int(np.argmin(cost))
    return float(cost[i]), float(thresholds[i])


# ---------------------------------------------------------------- trial 生成

def _cross(enroll: Sequence[str], test: Sequence[str], speaker_of: dict) -> List[Trial]:
    trials = []
    for e in sorted(enroll):
        for t in sorted(test):
            label = TrialLabel.TARGET if speaker_of[e] == speaker_of[t] else TrialLabel.NONTARGET
            trials.append(Trial(e, t, label))
    return trials


def generate_trials(manifest: pd.DataFrame, protocol: int = 1, seed: int = 0) -> List[Trial]:
    """
    协议 1：随机打乱后前一半注册、后一半测试，全交叉
    协议 2：每个说话人的章节不相交地分到两侧，并去掉注册与测试同一 (speaker, chapter) 的 trial
    """
    if protocol not in (1, 2):
        raise DataError(f"未知的 trial 协议: {protocol}")
    required = {"utt_id", "speaker", "chapter"}
    if not required.issubset(manifest.columns):
        raise DataError(f"清单缺少列: {sorted(required - set(manifest.columns))}")
    rows = manifest.sort_values("utt_id").reset_index(drop=True)
    ids = rows["utt_id"].astype(str).tolist()
    speaker_of = dict(zip(ids, rows["speaker"].astype(str)))
    chapter_of = dict(zip(ids, rows["chapter"].astype(str)))
    rng = np.random.default_rng(seed)

    if protocol == 1:
        order = rng.permutation(len(ids))
        half = len(ids) // 2
        enroll = [ids[i] for i in order[:half]]
        test = [ids[i] for i in order[half:]]
        trials = _cross(enroll, test, speaker_of)
    else:
        enroll, test = [], []
        for speaker, group in rows.groupby(rows["speaker"].astype(str), sort=True):
            utts = group["utt_id"].astype(str).tolist()
            chapters = sorted(set(group["chapter"].astype(str)))
            if len(chapters) < 2:
                logger.warning(f"[trials] 说话人 {speaker} 只有一个章节，协议 2 下不产生 target trial")
                order = rng.permutation(len(utts))
                half = len(utts) // 2
                enroll += [utts[i] for i in order[:half]]
                test += [utts[i] for i in order[half:]]
                continue
            shuffled = [chapters[i] for i in rng.permutation(len(chapters))]
            enroll_chapters = set(shuffled[: len(shuffled) // 2])
            enroll += [u for u in utts if chapter_of[u] in enroll_chapters]
            test += [u for u in utts if chapter_of[u] not in enroll_chapters]
        trials = [
            t for t in _cross(enroll, test, speaker_of)
            if (speaker_of[t.enroll_id], chapter_of[t.enroll_id]) != (speaker_of[t.test_id], chapter_of[t.test_id])
        ]

    targets = sum(t.is_target for t in trials)
    logger.info(f"[trials] 协议 {protocol}: {len(trials)} 个 trial, 其中 target {targets} 个")
    return trials


# ---------------------------------------------------------------- 文本读写

def write_trials(path: str, trials: Sequence[Trial]):
    _ensure_parent(path)
    frame = pd.DataFrame({
        "enroll": [t.enroll_id for t in trials],
        "test": [t.test_id for t in trials],
        "label": [t.label.value for t in trials],
    })
    frame.to_csv(path, sep=" ", header=False, index=False)


def read_trials(path: str) -> List[Trial]:
    frame = pd.read_csv(path, sep=" ", header=None, names=["enroll", "test", "label"], dtype=str)
    bad = set(frame["label"]) - {label.value for label in TrialLabel}
    if bad:
        raise DataError(f"{path}: 非法的 trial 标签 {sorted(bad)}")
    return [Trial(e, t, TrialLabel(label)) for e, t, label in frame.itertuples(index=False)]


def write_scores(path: str, scores: ScoreSet):
    _ensure_parent(path)
    frame = pd.DataFrame({
        "enroll": [t.enroll_id for t in scores.trials],
        "test": [t.test_id for t in scores.trials],
        "score": scores.scores,
    })
    frame.to_csv(path, sep=" ", header=False, index=False, float_format="%.10f")


def read_scores(path: str, trials: Sequence[Trial]) -> ScoreSet:
    """读取分数文件并与 trial 列表按行对齐"""
    frame = pd.read_csv(path, sep=" ", header=None, names=["enroll", "test", "score"],
                        dtype={"enroll": str, "test": str, "score": float})
    if len(frame) != len(trials):
        raise DataError(f"{path}: 分数行数 {len(frame)} 与 trial 数 {len(trials)} 不一致")
    for row, trial in zip(frame.itertuples(index=False), trials):
        if row.enroll != trial.enroll_id or row.test != trial.test_id:
            raise DataError(f"{path}: 分数行 ({row.enroll}, {row.test}) 与 trial 不对应")
    return ScoreSet(list(trials), frame["score"].to_numpy())


def write_det_csv(path: str, det: pd.DataFrame):
    _ensure_parent(path)
    det[["far", "frr", "probit_far", "probit_frr"]].to_csv(path, index=False, float_format="%.10f")


def read_det_csv(path: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: DET 文件为空")
    if frame.empty:
        raise DataError(f"{path}: DET 文件为空")
    return frame


def _ensure_parent(path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
