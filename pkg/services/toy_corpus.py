"""
玩具语料生成：每个“说话人”是一个固定的滤波噪声源
目录结构与 LibriSpeech 一致：<subset>/<speaker>/<chapter>/<speaker>-<chapter>-<segment>.wav
"""

import os
from typing import List, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.signal import butter, lfilter

from analysis.audio_features import write_wav
from models.errors import ConfigError

TOY_SUBSETS = ("toy-train", "toy-dev", "toy-test")
SAMPLE_RATE = 16000


def speaker_profile(index: int, speakers: int):
    """说话人 -> (中心频率 Hz, 包络调制频率 Hz)"""
    centers = np.geomspace(350.0, 4200.0, speakers)
    rates = np.linspace(2.5, 7.5, speakers)
    return float(centers[index]), float(rates[(index * 3) % speakers])


def synthesize(center: float, rate: float, seconds: float, rng: np.random.Generator) -> np.ndarray:
    """带通滤波白噪声，再乘上正弦包络"""
    count = int(round(seconds * SAMPLE_RATE))
    noise = rng.standard_normal(count)
    low = center / 1.25 / (SAMPLE_RATE / 2)
    high = min(center * 1.25 / (SAMPLE_RATE / 2), 0.99)
    b, a = butter(2, [low, high], btype="band")
    filtered = lfilter(b, a, noise)
    t = np.arange(count) / SAMPLE_RATE
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    signal = filtered * envelope
    return 0.5 * signal / max(np.max(np.abs(signal)), 1e-9)


def generate_toy_corpus(out_dir: str, speakers: int = 8, chapters: int = 2, utterances: int = 4,
                        seconds: float = 2.0, seed: int = 0, subsets: Sequence[str] = TOY_SUBSETS) -> pd.DataFrame:
    """各子集共享同一组说话人声源，但章节互不相同"""
    if speakers < 2 or chapters < 1 or utterances < 1 or seconds <= 0:
        raise ConfigError("玩具语料需要 speakers>=2, chapters>=1, utterances>=1, seconds>0")
    rows: List[dict] = []
    for subset_index, subset in enumerate(subsets):
        for i in range(speakers):
            speaker = str(100 + i)
            center, rate = speaker_profile(i, speakers)
            for c in range(chapters):
                chapter = str((subset_index + 1) * 1000 + i * 10 + c)
                chapter_rng = np.random.default_rng([seed, subset_index, i, c])
                # 同一章节内录音条件一致：中心频率的小幅偏移
                chapter_center = center * chapter_rng.uniform(0.97, 1.03)
                for u in range(utterances):
                    utt_id = f"{speaker}-{chapter}-{u:04d}"
                    path = os.path.join(out_dir, subset, speaker, chapter, f"{utt_id}.wav")
                    rng = np.random.default_rng([seed, subset_index, i, c, u])
                    write_wav(path, synthesize(chapter_center, rate, seconds, rng), SAMPLE_RATE)
                    rows.append({"subset": subset, "utt_id": utt_id, "speaker": speaker, "chapter": chapter,
                                 "path": path})
    logger.info(f"[toy] 已生成 {len(rows)} 条语音到 {out_dir}（{speakers} 个说话人, {len(subsets)} 个子集）")
    return pd.DataFrame(rows)
