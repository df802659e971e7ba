"""
结果可视化：DET 曲线 SVG、训练曲线 SVG、特征热力图（PGM + CSV）
"""

import os
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from analysis.verification_metrics import probit, read_det_csv  # noqa: E402
from models.errors import DataError  # noqa: E402
from models.feature_models import FeatureMatrix  # noqa: E402

DET_TICKS_PERCENT = [0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 40, 50]
SVG_SALT = "cpcv"


def _save_svg(fig, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def eer_point(det: pd.DataFrame) -> float:
    """DET 点中 |FAR - FRR| 最小处的 (FAR + FRR) / 2"""
    gap = np.abs(det["far"].to_numpy() - det["frr"].to_numpy())
    i = int(np.argmin(gap))
    return float((det["far"].iloc[i] + det["frr"].iloc[i]) / 2)


def plot_det(curves: Dict[str, str], out_path: str, title: str = "DET") -> str:
    """curves: 图例名 -> DET CSV 路径；坐标为 probit，刻度以百分比标注"""
    if not curves:
        raise DataError("没有可绘制的 DET 曲线")
    fig, ax = plt.subplots(figsize=(6, 6))
    for label in sorted(curves):
        det = read_det_csv(curves[label])
        ax.plot(det["probit_far"], det["probit_frr"], label=label, linewidth=1.2)
        eer = eer_point(det)
        ax.plot([probit(eer)], [probit(eer)], marker="o", markersize=5, linestyle="none", color="black")
        ax.annotate(f"EER {100 * eer:.2f}%", (float(probit(eer)), float(probit(eer))),
                    textcoords="offset points", xytext=(6, 6), fontsize=8)

    ticks = probit(np.array(DET_TICKS_PERCENT) / 100.0)
    labels = [f"{p:g}" for p in DET_TICKS_PERCENT]
    ax.set_xticks(ticks)
    ax.set_xticklabels(labels)
    ax.set_yticks(ticks)
    ax.set_yticklabels(labels)
    limit = (float(ticks[0]), float(ticks[-1]))
    ax.set_xlim(*limit)
    ax.set_ylim(*limit)
    ax.set_xlabel("False Alarm probability (%)")
    ax.set_ylabel("Miss probability (%)")
    ax.set_title(title)
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend(loc="upper right")
    _save_svg(fig, out_path)
    logger.info(f"[plot] DET 曲线已写入 {out_path}")
    return out_path


def plot_training_curves(log_csv: str, out_path: str) -> str:
    """dev NCE 损失与第 k 步准确率随 epoch 的变化"""
    log = pd.read_csv(log_csv)
    if log.empty:
        raise DataError(f"{log_csv}: 训练日志为空")
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(log["epoch"], log["loss"], marker="o", markersize=3)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("dev NCE loss (nats)")
    ax_acc.plot(log["epoch"], log["accuracy"], marker="o", markersize=3, color="tab:orange")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy @ step k")
    for ax in (ax_loss, ax_acc):
        ax.grid(True, linestyle=":", linewidth=0.5)
    _save_svg(fig, out_path)
    return out_path


def feature_image(f: FeatureMatrix) -> np.ndarray:
    """每个维度单独做 min-max 缩放到 0..255；常数维度为 128。返回 dims x frames"""
    values = f.values.T
    low = values.min(axis=1, keepdims=True)
    span = values.max(axis=1, keepdims=True) - low
    scaled = np.divide(values - low, span, out=np.full(values.shape, 128.0 / 255.0), where=span > 0)
    return np.round(scaled * 255.0).astype(np.uint8)


def plot_features(f: FeatureMatrix, out_prefix: str) -> Dict[str, str]:
    """写出 <prefix>.pgm（宽 = 帧数，高 = 维度）与 <prefix>.csv（逐维方差）"""
    image = feature_image(f)
    directory = os.path.dirname(out_prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pgm_path = out_prefix + ".pgm"
    height, width = image.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(image.tobytes())

    variance = f.values.var(axis=0)
    peak = variance.max()
    stats = pd.DataFrame({
        "dim": np.arange(f.cols),
        "min": f.values.min(axis=0),
        "max": f.values.max(axis=0),
        "variance": variance,
        "variance_ratio": variance / peak if peak > 0 else np.zeros_like(variance),
    })
    csv_path = out_prefix + ".csv"
    stats.to_csv(csv_path, index=False, float_format="%.8f")
    return {"pgm": pgm_path, "csv": csv_path}


def read_pgm(path: str) -> np.ndarray:
    """读取本模块写出的 P5 灰度图"""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DataError(f"{path}: 不是 P5 PGM")
        width, height = (int(v) for v in fh.readline().split())
        fh.readline()
        data = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    return data.reshape(height, width)
