"""
音频读取与 MFCC 特征提取
25ms 帧长 / 10ms 帧移 / 40 Mel / 20-7600Hz / 24 维倒谱，Kaldi 风格的分帧与预加重
"""

import os
from typing import Optional

import numpy as np
import soundfile as sf
from loguru import logger
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fftpack import dct

from models.errors import ConfigError, FormatError, InputTooShortError
from models.feature_models import FeatureConfig, FeatureKind, FeatureMatrix, MelFilterbank, Waveform

PCM16_SCALE = 32768.0


def load_wav(path: str) -> Waveform:
    """读取 PCM16 单声道 WAV，样本缩放到 [-1, 1)"""
    if not os.path.exists(path):
        raise FormatError(path, "path", "文件不存在")
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise FormatError(path, "header", f"无法解析 RIFF/WAVE 头: {e}")
    if info.format != "WAV":
        raise FormatError(path, "format", f"需要 WAV，实际 {info.format}")
    if info.subtype != "PCM_16":
        raise FormatError(path, "subtype", f"需要 PCM_16，实际 {info.subtype}")
    if info.channels != 1:
        raise FormatError(path, "channels", f"需要单声道，实际 {info.channels} 声道")
    try:
        data, sample_rate = sf.read(path, dtype="int16", always_2d=False)
    except RuntimeError as e:
        raise FormatError(path, "data", f"数据块读取失败: {e}")
    if data.size == 0:
        raise FormatError(path, "data", "数据块为空")
    if data.size != info.frames:
        raise FormatError(path, "data", f"数据被截断: 头部声明 {info.frames} 个采样，实际 {data.size}")
    return Waveform(samples=data.astype(np.float64) / PCM16_SCALE, sample_rate=int(sample_rate))


def write_wav(path: str, samples: np.ndarray, sample_rate: int):
    """以 PCM16 写出波形（超出 [-1, 1) 的部分截断）"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pcm = np.clip(np.round(np.asarray(samples) * PCM16_SCALE), -32768, 32767).astype(np.int16)
    sf.write(path, pcm, sample_rate, subtype="PCM_16", format="WAV")


def num_frames(num_samples: int, cfg: FeatureConfig) -> int:
    """snip-edges 模式下的帧数"""
    if num_samples < cfg.frame_length_samples:
        return 0
    return 1 + (num_samples - cfg.frame_length_samples) // cfg.frame_shift_samples


def frame_signal(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """分帧 -> 去直流 -> 预加重 -> Hamming 窗，返回 frames x frame_length"""
    length = cfg.frame_length_samples
    if w.samples.size < length:
        raise InputTooShortError(f"信号长度 {w.samples.size} 小于帧长 {length}")
    count = num_frames(w.samples.size, cfg)
    frames = sliding_window_view(w.samples, length)[:: cfg.frame_shift_samples][:count].copy()

    frames -= frames.mean(axis=1, keepdims=True)
    emphasized = np.empty_like(frames)
    emphasized[:, 1:] = frames[:, 1:] - cfg.preemphasis * frames[:, :-1]
    emphasized[:, 0] = frames[:, 0] * (1.0 - cfg.preemphasis)
    return emphasized * np.hamming(length)


def stft_power(frames: np.ndarray, fft_size: int = 512) -> np.ndarray:
    """每帧零填充到 fft_size 后取非负频率的功率谱"""
    frames = np.atleast_2d(frames)
    if frames.shape[1] > fft_size:
        raise ConfigError(f"帧长 {frames.shape[1]} 超过 FFT 点数 {fft_size}")
    spectrum = np.fft.rfft(frames, n=fft_size, axis=1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def hz_to_mel(freq):
    return 1127.0 * np.log1p(np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


def mel_filterbank(cfg: FeatureConfig, sample_rate: Optional[int] = None) -> MelFilterbank:
    """在 mel 域上等间隔的三角滤波器组，num_mel x (fft_size/2 + 1)"""
    rate = sample_rate or cfg.sample_rate
    nyquist = rate / 2
    if cfg.high_cut > nyquist:
        raise ConfigError(f"high_cut={cfg.high_cut} 超过 Nyquist 频率 {nyquist}")

    num_bins = cfg.fft_size // 2 + 1
    bin_mels = hz_to_mel(np.arange(num_bins) * rate / cfg.fft_size)
    edges = np.linspace(hz_to_mel(cfg.low_cut), hz_to_mel(cfg.high_cut), cfg.num_mel + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]

    rising = (bin_mels[None, :] - left) / (center - left)
    falling = (right - bin_mels[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.where(weights.sum(axis=1) == 0)[0]
    if empty.size:
        logger.warning(f"[mfcc] {empty.size} 个 Mel 滤波器没有覆盖任何 FFT bin")
    return MelFilterbank(weights=weights, center_freqs=mel_to_hz(edges[1:-1]))


def dct_matrix(n: int) -> np.ndarray:
    """正交 DCT-II 矩阵（列为基向量）"""
    return dct(np.eye(n), type=2, norm="ortho", axis=0)


def cepstra_from_mel_energies(energies: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """log(max(E, floor)) 后做正交 DCT-II，保留前 num_ceps 个系数"""
    log_energies = np.log(np.maximum(energies, cfg.energy_floor))
    return dct(log_energies, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]


def compute_mfcc(w: Waveform, cfg: Optional[FeatureConfig] = None) -> FeatureMatrix:
    """计算 MFCC（c0 保留，不替换成对数能量）"""
    cfg = cfg or FeatureConfig()
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"波形采样率 {w.sample_rate} 与配置 {cfg.sample_rate} 不一致")
    frames = frame_signal(w, cfg)
    power = stft_power(frames, cfg.fft_size)
    bank = mel_filterbank(cfg)
    energies = power @ bank.weights.T
    return FeatureMatrix(values=cepstra_from_mel_energies(energies, cfg), kind=FeatureKind.MFCC,
                         frame_shift=cfg.frame_shift)


def _delta(values: np.ndarray, window: int = 2) -> np.ndarray:
    padded = np.pad(values, ((window, window), (0, 0)), mode="edge")
    rows = values.shape[0]
    denominator = 2 * sum(n * n for n in range(1, window + 1))
    out = np.zeros_like(values)
    for n in range(1, window + 1):
        out += n * (padded[window + n: window + n + rows] - padded[window - n: window - n + rows])
    return out / denominator


def append_deltas(f: FeatureMatrix, order: int = 2) -> FeatureMatrix:
    """追加一阶（及二阶）回归差分，窗口 ±2 帧，边界复制"""
    if order not in (1, 2):
        raise ConfigError(f"delta 阶数只能是 1 或 2: {order}")
    if f.rows < 5:
        raise InputTooShortError(f"计算 delta 至少需要 5 帧，实际 {f.rows}")
    blocks = [f.values]
    current = f.values
    for _ in range(order):
        current = _delta(current)
        blocks.append(current)
    return FeatureMatrix(values=np.hstack(blocks), kind=f.kind, frame_shift=f.frame_shift)
