"""
GMM-UBM 与 i-vector
对角 GMM 的 EM 训练、MAP 均值自适应、似然比打分、Baum-Welch 统计量、T 矩阵 EM 与 i-vector 提取
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.linalg import solve
from scipy.special import logsumexp

from models.backend_models import DiagGmm, SuffStats, TotalVariabilityModel
from models.errors import ConfigError, DataError, DimensionError, EmptyDatasetError

VARIANCE_FLOOR = 1e-6
RIDGE = 1e-6
LOG_2PI = np.log(2 * np.pi)


def component_loglik(gmm: DiagGmm, features: np.ndarray) -> np.ndarray:
    """每帧每个高斯分量的 log(w_c N(x; m_c, v_c))，frames x C"""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != gmm.dim:
        raise DimensionError("component_loglik", x.shape, gmm.means.shape)
    inv_vars = 1.0 / gmm.vars
    const = np.log(gmm.weights) - 0.5 * (gmm.dim * LOG_2PI + np.log(gmm.vars).sum(axis=1)
                                         + (gmm.means ** 2 * inv_vars).sum(axis=1))
    return const[None, :] - 0.5 * ((x ** 2) @ inv_vars.T) + x @ (gmm.means * inv_vars).T


def frame_loglik(gmm: DiagGmm, features: np.ndarray) -> np.ndarray:
    return logsumexp(component_loglik(gmm, features), axis=1)


def posteriors(gmm: DiagGmm, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (后验 frames x C, 每帧对数似然)"""
    comp = component_loglik(gmm, features)
    total = logsumexp(comp, axis=1)
    return np.exp(comp - total[:, None]), total


def sample_gmm(gmm: DiagGmm, count: int, rng: np.random.Generator) -> np.ndarray:
    """从 GMM 采样（测试与玩具数据用）"""
    comps = rng.choice(gmm.num_mixtures, size=count, p=gmm.weights)
    noise = rng.standard_normal((count, gmm.dim))
    return gmm.means[comps] + noise * np.sqrt(gmm.vars[comps])


def gmm_em_train(features: np.ndarray, num_mixtures: int, iters: int = 10,
                 seed: int = 0) -> Tuple[DiagGmm, List[float]]:
    """UBM 的 EM 训练，返回模型和每次迭代的总对数似然"""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    frames, dim = x.shape
    if num_mixtures < 1:
        raise ConfigError(f"高斯分量数必须为正: {num_mixtures}")
    if frames < num_mixtures:
        raise EmptyDatasetError(f"帧数 {frames} 少于高斯分量数 {num_mixtures}")

    rng = np.random.default_rng(seed)
    global_var = x.var(axis=0)
    floor = np.maximum(VARIANCE_FLOOR * global_var, 1e-12)
    gmm = DiagGmm(
        weights=np.full(num_mixtures, 1.0 / num_mixtures),
        means=x[rng.choice(frames, size=num_mixtures, replace=False)],
        vars=np.tile(np.maximum(global_var, floor), (num_mixtures, 1)),
    )

    trace: List[float] = []
    for it in range(iters):
        post, ll = posteriors(gmm, x)
        trace.append(float(ll.sum()))
        logger.debug(f"[ubm] iter {it}: loglik={trace[-1]:.6f}")

        occupancy = post.sum(axis=0)
        weights, means, variances = gmm.weights.copy(), gmm.means.copy(), gmm.vars.copy()
        live = occupancy > 1e-10
        means[live] = (post[:, live].T @ x) / occupancy[live, None]
        second = (post[:, live].T @ (x ** 2)) / occupancy[live, None]
        variances[live] = np.maximum(second - means[live] ** 2, floor)
        weights = occupancy / frames

        for c in np.where(~live)[0]:
            donor = int(np.argmax(variances.sum(axis=1) * live))
            logger.warning(f"[ubm] 第 {c} 个高斯分量为空，从方差最大的分量 {donor} 重新播种")
            offset = 0.2 * np.sqrt(variances[donor])
            means[c] = means[donor] + offset
            means[donor] = means[donor] - offset
            variances[c] = variances[donor]
            weights[c] = weights[donor] = weights[donor] / 2
        gmm = DiagGmm(weights / weights.sum(), means, variances)

    trace.append(float(frame_loglik(gmm, x).sum()))
    logger.info(f"[ubm] C={num_mixtures} 训练完成: {frames} 帧, 最终 loglik={trace[-1]:.3f}")
    return gmm, trace


def accumulate_stats(ubm: DiagGmm, features: np.ndarray) -> SuffStats:
    """N_c = Σ γ_t(c)，F_c = Σ γ_t(c) x_t"""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    post, _ = posteriors(ubm, x)
    return SuffStats(n=post.sum(axis=0), f=post.T @ x, frames=x.shape[0])


def accumulate_stats_many(ubm: DiagGmm, feature_list: Sequence[np.ndarray], workers: int = 1) -> List[SuffStats]:
    """多条语音并行累计统计量，按输入顺序返回"""
    if workers <= 1:
        return [accumulate_stats(ubm, f) for f in feature_list]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda f: accumulate_stats(ubm, f), feature_list))


def map_adapt_means(ubm: DiagGmm, features: np.ndarray, relevance: float = 16.0) -> DiagGmm:
    """只自适应均值：m' = α E + (1 - α) m，α = N / (N + r)"""
    if relevance <= 0:
        raise ConfigError(f"relevance factor 必须为正: {relevance}")
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        return ubm.copy()
    stats = accumulate_stats(ubm, x.reshape(-1, ubm.dim))
    alpha = stats.n / (stats.n + relevance)
    expected = np.divide(stats.f, stats.n[:, None], out=ubm.means.copy(), where=stats.n[:, None] > 0)
    means = alpha[:, None] * expected + (1 - alpha[:, None]) * ubm.means
    return DiagGmm(ubm.weights.copy(), means, ubm.vars.copy())


def likelihood_ratio(features: np.ndarray, speaker: DiagGmm, ubm: DiagGmm) -> float:
    """每帧平均 log P(U|speaker) - log P(U|UBM)"""
    return float(frame_loglik(speaker, features).mean() - frame_loglik(ubm, features).mean())


class _TvCache:
    """T 矩阵相关的预计算量"""

    def __init__(self, model: TotalVariabilityModel):
        ubm = model.ubm
        self.num_mixtures, self.dim, self.rank = ubm.num_mixtures, ubm.dim, model.rank
        self.t_blocks = model.t_matrix.reshape(self.num_mixtures, self.dim, self.rank)
        self.inv_vars = 1.0 / ubm.vars
        # C x R x R：T_cᵀ Σ_c⁻¹ T_c
        self.t_sinv_t = np.einsum("cfr,cf,cfs->crs", self.t_blocks, self.inv_vars, self.t_blocks)
        self.means = ubm.means

    def centered(self, stats: SuffStats) -> np.ndarray:
        if stats.f.shape != self.means.shape:
            raise DimensionError("i-vector stats", stats.f.shape, self.means.shape)
        return stats.f - stats.n[:, None] * self.means

    def posterior(self, stats: SuffStats) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """返回 (w 的后验均值, 后验精度 L, 线性项 b)"""
        f_centered = self.centered(stats)
        precision = np.eye(self.rank) + np.einsum("c,crs->rs", stats.n, self.t_sinv_t)
        linear = np.einsum("cfr,cf->r", self.t_blocks, f_centered * self.inv_vars)
        w = solve(precision, linear, assume_a="pos")
        return w, precision, linear


def ivector_posterior(model: TotalVariabilityModel, stats: SuffStats) -> Tuple[np.ndarray, np.ndarray]:
    """i-vector 的后验均值与后验精度矩阵"""
    w, precision, _ = _TvCache(model).posterior(stats)
    return w, precision


def extract_ivector(model: TotalVariabilityModel, stats: SuffStats) -> np.ndarray:
    """w = (I + Tᵀ Σ⁻¹ N T)⁻¹ Tᵀ Σ⁻¹ (F - N m)"""
    return _TvCache(model).posterior(stats)[0]


def extract_ivectors(model: TotalVariabilityModel, stats_list: Sequence[SuffStats], workers: int = 1) -> List[np.ndarray]:
    cache = _TvCache(model)
    if workers <= 1:
        return [cache.posterior(s)[0] for s in stats_list]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: cache.posterior(s)[0], stats_list))


def tv_objective(model: TotalVariabilityModel, stats_list: Sequence[SuffStats]) -> float:
    """给定 T 时统计量的对数似然（去掉与 T 无关的常数）：Σ ½ bᵀL⁻¹b - ½ log|L|"""
    cache = _TvCache(model)
    total = 0.0
    for stats in stats_list:
        w, precision, linear = cache.posterior(stats)
        total += 0.5 * float(linear @ w) - 0.5 * float(np.linalg.slogdet(precision)[1])
    return total


def tmatrix_em_train(stats_list: Sequence[SuffStats], ubm: DiagGmm, rank: int, iters: int = 10,
                     seed: int = 0) -> Tuple[TotalVariabilityModel, List[float]]:
    """总变化空间 EM（不含最小散度步），返回模型与每次迭代的目标值"""
    supervector_dim = ubm.num_mixtures * ubm.dim
    if rank <= 0 or rank >= supervector_dim:
        raise ConfigError(f"i-vector 维度必须满足 0 < R < C*F={supervector_dim}，实际 R={rank}")
    if not stats_list:
        raise EmptyDatasetError("没有用于训练 T 矩阵的统计量")
    if len(stats_list) < rank:
        logger.warning(f"[tv] 训练语音数 {len(stats_list)} 少于 i-vector 维度 {rank}")

    rng = np.random.default_rng(seed)
    scale = np.sqrt(ubm.vars).reshape(-1, 1)
    model = TotalVariabilityModel(ubm, rng.standard_normal((supervector_dim, rank)) * scale)
    trace: List[float] = []

    for it in range(iters):
        cache = _TvCache(model)
        acc_a = np.zeros((ubm.num_mixtures, rank, rank))
        acc_c = np.zeros((ubm.num_mixtures, ubm.dim, rank))
        objective = 0.0
        for stats in stats_list:
            w, precision, linear = cache.posterior(stats)
            second = np.linalg.inv(precision) + np.outer(w, w)
            acc_a += stats.n[:, None, None] * second[None, :, :]
            acc_c += cache.centered(stats)[:, :, None] * w[None, None, :]
            objective += 0.5 * float(linear @ w) - 0.5 * float(np.linalg.slogdet(precision)[1])
        trace.append(objective)
        logger.debug(f"[tv] iter {it}: objective={objective:.6f}")

        blocks = np.empty_like(cache.t_blocks)
        for c in range(ubm.num_mixtures):
            a_c = acc_a[c]
            if not np.all(np.isfinite(a_c)) or np.linalg.cond(a_c) > 1e12:
                logger.warning(f"[tv] 第 {c} 个分量的累计矩阵接近奇异，加入 ridge {RIDGE}")
                a_c = a_c + RIDGE * np.eye(rank)
            blocks[c] = solve(a_c, acc_c[c].T, assume_a="sym").T
        model = TotalVariabilityModel(ubm, blocks.reshape(supervector_dim, rank))

    trace.append(tv_objective(model, stats_list))
    logger.info(f"[tv] R={rank} 训练完成: {len(stats_list)} 条语音, objective={trace[-1]:.3f}")
    return model, trace


def stack_frames(feature_list: Sequence[np.ndarray]) -> np.ndarray:
    if not feature_list:
        raise EmptyDatasetError("没有可用的帧")
    dims = {np.asarray(f).shape[1] for f in feature_list}
    if len(dims) != 1:
        raise DataError(f"特征维度不一致: {sorted(dims)}")
    return np.vstack(feature_list)
