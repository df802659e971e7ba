"""
语音级后端：平均池化、PCA、均值与长度归一、LDA、两协方差 PLDA、特征拼接
"""

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import eigh

from models.backend_models import EmbeddingSet, LdaModel, NormModel, PcaModel, PldaModel
from models.errors import ConfigError, DataError, DimensionError
from models.feature_models import FeatureKind, FeatureMatrix

EIGEN_FLOOR = 1e-6


def _sign_fix(basis: np.ndarray) -> np.ndarray:
    """每列第一个非零分量取正，保证特征向量输出确定"""
    basis = basis.copy()
    for j in range(basis.shape[1]):
        nonzero = np.flatnonzero(np.abs(basis[:, j]) > 1e-12)
        if nonzero.size and basis[nonzero[0], j] < 0:
            basis[:, j] = -basis[:, j]
    return basis


def average_pool(f) -> np.ndarray:
    """帧级特征按时间取平均"""
    values = f.values if isinstance(f, FeatureMatrix) else np.atleast_2d(np.asarray(f, dtype=np.float64))
    if values.shape[0] == 0:
        raise DataError("空特征矩阵无法做平均池化")
    return values.mean(axis=0)


# ---------------------------------------------------------------- PCA

def pca_fit(frames: np.ndarray, dim: int) -> PcaModel:
    """在帧级向量上拟合 PCA，保留前 dim 个主成分"""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if dim < 1 or dim > x.shape[1]:
        raise ConfigError(f"PCA 维度必须在 [1, {x.shape[1]}] 之间，实际 {dim}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    eigenvalues, vectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.maximum(eigenvalues[order], 0.0)
    vectors = vectors[:, order]
    rank = int(np.sum(eigenvalues > eigenvalues[0] * 1e-10)) if eigenvalues[0] > 0 else 0
    if dim > rank:
        raise ConfigError(f"PCA 维度 {dim} 超过数据的秩 {rank}")
    total = eigenvalues.sum()
    ratio = float(100.0 * eigenvalues[:dim].sum() / total)
    logger.info(f"[pca] {x.shape[1]} -> {dim} 维, 方差保留 {ratio:.2f}%")
    return PcaModel(mean=mean, basis=_sign_fix(vectors[:, :dim]), explained_ratio=min(ratio, 100.0),
                    eigenvalues=eigenvalues)


def pca_transform(model: PcaModel, values: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if x.shape[1] != model.mean.shape[0]:
        raise DimensionError("pca_transform", x.shape, model.basis.shape)
    return (x - model.mean) @ model.basis


def pca_transform_features(model: PcaModel, f: FeatureMatrix) -> FeatureMatrix:
    return FeatureMatrix(values=pca_transform(model, f.values), kind=f.kind, frame_shift=f.frame_shift)


# ---------------------------------------------------------------- 归一化

def fit_mean(embeddings: EmbeddingSet) -> NormModel:
    if len(embeddings) < 2:
        raise DataError(f"估计均值至少需要 2 个嵌入，实际 {len(embeddings)}")
    return NormModel(mean=embeddings.matrix().mean(axis=0))


def length_normalize(embeddings: EmbeddingSet, norm: NormModel) -> EmbeddingSet:
    """减去给定均值后缩放到单位长度；中心化后为零的向量保持为零"""
    centered = embeddings.matrix() - norm.mean
    lengths = np.linalg.norm(centered, axis=1)
    zero = lengths == 0
    if np.any(zero):
        ids = [utt for utt, z in zip(embeddings.ids, zero) if z]
        logger.warning(f"[backend] {len(ids)} 个嵌入中心化后为零向量，保持为零: {ids[:5]}")
    scaled = np.divide(centered, lengths[:, None], out=np.zeros_like(centered), where=~zero[:, None])
    return embeddings.replace(scaled)


def mean_length_normalize(embeddings: EmbeddingSet) -> EmbeddingSet:
    """用集合自身的均值做中心化后长度归一"""
    return length_normalize(embeddings, fit_mean(embeddings))


# ---------------------------------------------------------------- LDA

def _class_groups(embeddings: EmbeddingSet) -> "OrderedDict[str, np.ndarray]":
    if set(embeddings.ids) - set(embeddings.labels):
        raise DataError("存在没有说话人标签的嵌入")
    groups: Dict[str, List[np.ndarray]] = OrderedDict()
    for utt_id in embeddings.ids:
        groups.setdefault(embeddings.labels[utt_id], []).append(embeddings.entries[utt_id])
    return OrderedDict((spk, np.vstack(rows)) for spk, rows in groups.items())


def scatter_matrices(embeddings: EmbeddingSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (全局均值, 类间散度, 类内散度)，均按总样本数归一"""
    groups = _class_groups(embeddings)
    x = embeddings.matrix()
    mean = x.mean(axis=0)
    dim = x.shape[1]
    between = np.zeros((dim, dim))
    within = np.zeros((dim, dim))
    for rows in groups.values():
        class_mean = rows.mean(axis=0)
        diff = class_mean - mean
        between += rows.shape[0] * np.outer(diff, diff)
        centered = rows - class_mean
        within += centered.T @ centered
    return mean, between / x.shape[0], within / x.shape[0]


def lda_fit(embeddings: EmbeddingSet, dim: int) -> LdaModel:
    """广义特征分解 Sb v = λ Sw v，取前 dim 个方向"""
    speakers = len(set(embeddings.labels[i] for i in embeddings.ids))
    admissible = min(embeddings.dim, speakers - 1)
    if dim < 1 or dim > admissible:
        raise ConfigError(f"LDA 维度 {dim} 不合法，允许的最大值为 {admissible}")
    mean, between, within = scatter_matrices(embeddings)
    ridge = EIGEN_FLOOR * max(np.trace(within) / within.shape[0], 1e-12)
    if np.linalg.matrix_rank(within) < within.shape[0]:
        logger.warning(f"[lda] 类内散度矩阵奇异，加入 ridge {ridge:.3e}")
    eigenvalues, vectors = eigh(between, within + ridge * np.eye(within.shape[0]))
    order = np.argsort(eigenvalues)[::-1][:dim]
    basis = vectors[:, order]
    basis = _sign_fix(basis / np.linalg.norm(basis, axis=0))
    return LdaModel(mean=mean, basis=basis, eigenvalues=eigenvalues[order])


def lda_transform(model: LdaModel, values: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if x.shape[1] != model.mean.shape[0]:
        raise DimensionError("lda_transform", x.shape, model.basis.shape)
    return (x - model.mean) @ model.basis


def project(embeddings: EmbeddingSet, model) -> EmbeddingSet:
    """对嵌入集合应用 PCA 或 LDA 投影"""
    transform = lda_transform if isinstance(model, LdaModel) else pca_transform
    return embeddings.replace(transform(model, embeddings.matrix()))


# ---------------------------------------------------------------- PLDA

def _floor_covariance(matrix: np.ndarray, label: str) -> np.ndarray:
    matrix = 0.5 * (matrix + matrix.T)
    values, vectors = np.linalg.eigh(matrix)
    floor = EIGEN_FLOOR * max(float(np.mean(np.abs(values))), 1e-12)
    if np.any(values < floor):
        logger.warning(f"[plda] {label} 有 {int(np.sum(values < floor))} 个特征值低于下限 {floor:.3e}，已截断")
        values = np.maximum(values, floor)
        matrix = (vectors * values) @ vectors.T
    return 0.5 * (matrix + matrix.T)


def plda_fit(embeddings: EmbeddingSet, iters: int = 10) -> PldaModel:
    """两协方差 PLDA 的 EM：x = mu + y + e"""
    groups = _class_groups(embeddings)
    usable = [spk for spk, rows in groups.items() if rows.shape[0] >= 2]
    if len(usable) < 2:
        raise DataError(f"PLDA 需要至少 2 个各有 2 条以上语音的说话人，实际 {len(usable)} 个")

    mu, between, within = scatter_matrices(embeddings)
    dim = mu.shape[0]
    between = _floor_covariance(between, "B")
    within = _floor_covariance(within, "W")
    centered = [rows - mu for rows in groups.values()]
    total = sum(rows.shape[0] for rows in centered)

    for it in range(iters):
        inv_b = np.linalg.inv(between)
        inv_w = np.linalg.inv(within)
        acc_b = np.zeros((dim, dim))
        acc_w = np.zeros((dim, dim))
        for rows in centered:
            n = rows.shape[0]
            cov_y = np.linalg.inv(inv_b + n * inv_w)
            y = cov_y @ (inv_w @ rows.sum(axis=0))
            acc_b += cov_y + np.outer(y, y)
            resid = rows - y
            acc_w += resid.T @ resid + n * cov_y
        between = _floor_covariance(acc_b / len(centered), "B")
        within = _floor_covariance(acc_w / total, "W")
        logger.debug(f"[plda] iter {it}: tr(B)={np.trace(between):.4f} tr(W)={np.trace(within):.4f}")

    logger.info(f"[plda] 训练完成: {len(groups)} 个说话人, {total} 条嵌入, 维度 {dim}")
    return PldaModel(mu=mu, between=between, within=within)


class PldaScorer:
    """闭式 LLR：½eᵀQe + ½tᵀQt + eᵀPt + const"""

    def __init__(self, model: PldaModel):
        self.model = model
        total = model.between + model.within
        inv_total = np.linalg.inv(total)
        schur = total - model.between @ inv_total @ model.between
        inv_schur = np.linalg.inv(0.5 * (schur + schur.T))
        q = inv_total - inv_schur
        p = inv_total @ model.between @ inv_schur
        self.q = 0.5 * (q + q.T)
        self.p = 0.5 * (p + p.T)
        self.const = 0.5 * (np.linalg.slogdet(total)[1] - np.linalg.slogdet(schur)[1])

    def score(self, enroll: np.ndarray, test: np.ndarray) -> float:
        e = np.asarray(enroll, dtype=np.float64) - self.model.mu
        t = np.asarray(test, dtype=np.float64) - self.model.mu
        if e.shape != self.model.mu.shape or t.shape != self.model.mu.shape:
            raise DimensionError("plda_llr", e.shape, t.shape)
        return float(0.5 * (e @ self.q @ e + t @ self.q @ t) + e @ self.p @ t + self.const)


def plda_llr(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    """同一说话人 vs 不同说话人联合高斯的对数似然比"""
    return PldaScorer(model).score(enroll, test)


def plda_score_pairs(model: PldaModel, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], workers: int = 1) -> List[float]:
    """批量打分，保持输入顺序"""
    scorer = PldaScorer(model)
    if workers <= 1:
        return [scorer.score(e, t) for e, t in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda pair: scorer.score(*pair), pairs))


# ---------------------------------------------------------------- 拼接

def fuse_concat(a: FeatureMatrix, b: FeatureMatrix) -> FeatureMatrix:
    """截断到较短的帧数后按列拼接，a 的列在前"""
    if abs(a.frame_shift - b.frame_shift) > 1e-9:
        raise DataError(f"帧移不一致: {a.frame_shift}ms vs {b.frame_shift}ms")
    rows = min(a.rows, b.rows)
    return FeatureMatrix(values=np.hstack([a.values[:rows], b.values[:rows]]), kind=FeatureKind.FUSED,
                         frame_shift=a.frame_shift)
