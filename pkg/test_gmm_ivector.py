#!/usr/bin/env python3
"""
GMM-UBM 与 i-vector 测试
"""

import os
import sys

import numpy as np
import pytest
from loguru import logger
from scipy.linalg import subspace_angles
from scipy.stats import multivariate_normal

# 添加项目路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis.gmm_ivector import (
    accumulate_stats,
    accumulate_stats_many,
    extract_ivector,
    extract_ivectors,
    frame_loglik,
    gmm_em_train,
    ivector_posterior,
    likelihood_ratio,
    map_adapt_means,
    posteriors,
    sample_gmm,
    stack_frames,
    tmatrix_em_train,
)
from models.backend_models import DiagGmm, SuffStats, TotalVariabilityModel
from models.errors import ConfigError, DataError, DimensionError, EmptyDatasetError


def _assert_non_decreasing(trace, rel=1e-6):
    for before, after in zip(trace, trace[1:]):
        assert after >= before - rel * max(1.0, abs(before))


class TestGmm:
    """对角 GMM 与 EM"""

    def _reference_gmm(self):
        return DiagGmm(
            weights=np.array([0.3, 0.7]),
            means=np.array([[-4.0, 0.0], [4.0, 1.0]]),
            vars=np.array([[1.0, 0.5], [0.8, 1.5]]),
        )

    def test_loglik_matches_scipy(self):
        gmm = self._reference_gmm()
        x = np.random.default_rng(0).standard_normal((6, 2))
        expected = np.log(sum(
            w * multivariate_normal(m, np.diag(v)).pdf(x) for w, m, v in zip(gmm.weights, gmm.means, gmm.vars)
        ))
        np.testing.assert_allclose(frame_loglik(gmm, x), expected, rtol=1e-10)

    def test_posteriors_sum_to_one(self):
        gmm = self._reference_gmm()
        post, _ = posteriors(gmm, np.random.default_rng(1).standard_normal((10, 2)))
        np.testing.assert_allclose(post.sum(axis=1), 1.0)

    def test_em_recovers_components(self):
        gmm = self._reference_gmm()
        x = sample_gmm(gmm, 4000, np.random.default_rng(2))
        fitted, trace = gmm_em_train(x, 2, iters=15, seed=0)
        assert len(trace) == 16
        _assert_non_decreasing(trace)
        order = np.argsort(fitted.means[:, 0])
        np.testing.assert_allclose(fitted.means[order], gmm.means, atol=0.15)
        np.testing.assert_allclose(fitted.weights[order], gmm.weights, atol=0.03)
        np.testing.assert_allclose(fitted.vars[order], gmm.vars, rtol=0.15)

    def test_em_is_seeded(self):
        x = sample_gmm(self._reference_gmm(), 500, np.random.default_rng(3))
        a, _ = gmm_em_train(x, 4, iters=3, seed=7)
        b, _ = gmm_em_train(x, 4, iters=3, seed=7)
        np.testing.assert_array_equal(a.means, b.means)

    def test_too_few_frames(self):
        with pytest.raises(EmptyDatasetError):
            gmm_em_train(np.zeros((3, 2)), 4)

    def test_invalid_gmm(self):
        with pytest.raises(DataError):
            DiagGmm(np.array([0.5, 0.6]), np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(DimensionError):
            frame_loglik(self._reference_gmm(), np.zeros((3, 5)))


class TestMapAndStats:
    """MAP 自适应、似然比与统计量"""

    def _ubm(self):
        return DiagGmm(np.full(3, 1 / 3), np.array([[-3.0], [0.0], [3.0]]), np.ones((3, 1)))

    def test_map_moves_towards_data(self):
        ubm = self._ubm()
        x = np.random.default_rng(0).normal(3.5, 1.0, (400, 1))
        adapted = map_adapt_means(ubm, x, relevance=16.0)
        stats = accumulate_stats(ubm, x)
        alpha = stats.n[2] / (stats.n[2] + 16.0)
        expected = alpha * stats.f[2, 0] / stats.n[2] + (1 - alpha) * 3.0
        assert adapted.means[2, 0] == pytest.approx(expected)
        assert adapted.means[2, 0] > 3.0
        np.testing.assert_array_equal(adapted.vars, ubm.vars)
        np.testing.assert_array_equal(adapted.weights, ubm.weights)

    def test_map_midpoint_at_relevance_count(self):
        # N = r = 16 时 α = 0.5，自适应均值正好是 UBM 均值与数据均值的中点
        ubm = DiagGmm(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        adapted = map_adapt_means(ubm, np.linspace(3.0, 5.0, 16).reshape(-1, 1), relevance=16.0)
        assert adapted.means[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_map_without_data_returns_ubm(self):
        ubm = self._ubm()
        adapted = map_adapt_means(ubm, np.zeros((0, 1)))
        np.testing.assert_array_equal(adapted.means, ubm.means)
        assert adapted is not ubm

    def test_map_relevance_must_be_positive(self):
        with pytest.raises(ConfigError):
            map_adapt_means(self._ubm(), np.zeros((5, 1)), relevance=0.0)

    def test_likelihood_ratio_prefers_target(self):
        rng = np.random.default_rng(1)
        ubm = self._ubm()
        speaker = map_adapt_means(ubm, rng.normal(1.0, 0.5, (300, 1)))
        target = likelihood_ratio(rng.normal(1.0, 0.5, (200, 1)), speaker, ubm)
        impostor = likelihood_ratio(rng.normal(-3.0, 0.5, (200, 1)), speaker, ubm)
        assert target > 0 > impostor

    def test_stats_are_additive(self):
        ubm = self._ubm()
        x = np.random.default_rng(2).standard_normal((50, 1))
        whole = accumulate_stats(ubm, x)
        parts = accumulate_stats(ubm, x[:20]) + accumulate_stats(ubm, x[20:])
        np.testing.assert_allclose(whole.n, parts.n)
        np.testing.assert_allclose(whole.f, parts.f)
        assert parts.frames == 50
        assert whole.n.sum() == pytest.approx(50.0)

    def test_parallel_accumulation_keeps_order(self):
        ubm = self._ubm()
        rng = np.random.default_rng(3)
        feats = [rng.standard_normal((n, 1)) for n in (5, 9, 13, 21)]
        serial = accumulate_stats_many(ubm, feats, workers=1)
        parallel = accumulate_stats_many(ubm, feats, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_allclose(a.f, b.f)
            assert a.frames == b.frames

    def test_stats_matrix_layout(self):
        stats = SuffStats(np.array([2.0, 3.0]), np.array([[1.0, 2.0], [3.0, 4.0]]), 5)
        matrix = stats.to_matrix()
        assert matrix.shape == (2, 3)
        np.testing.assert_array_equal(matrix[:, 0], [2.0, 3.0])
        restored = SuffStats.from_matrix(matrix)
        assert restored.frames == 5
        np.testing.assert_array_equal(restored.f, stats.f)

    def test_stack_frames_dimension_mismatch(self):
        with pytest.raises(DataError):
            stack_frames([np.zeros((2, 3)), np.zeros((2, 4))])


class TestIvector:
    """总变化空间与 i-vector"""

    def _ubm(self):
        rng = np.random.default_rng(10)
        return DiagGmm(np.full(4, 0.25), rng.normal(0, 2, (4, 3)), rng.uniform(0.5, 1.5, (4, 3)))

    def _speaker_stats(self, ubm, speakers=6, per_speaker=6, frames=200, seed=11):
        rng = np.random.default_rng(seed)
        stats = []
        for _ in range(speakers):
            shift = rng.normal(0, 1.0, (ubm.num_mixtures, ubm.dim))
            speaker = DiagGmm(ubm.weights, ubm.means + shift, ubm.vars)
            for _ in range(per_speaker):
                stats.append(accumulate_stats(ubm, sample_gmm(speaker, frames, rng)))
        return stats

    def test_matches_supervector_formula(self):
        ubm = self._ubm()
        rng = np.random.default_rng(12)
        model = TotalVariabilityModel(ubm, rng.standard_normal((12, 3)))
        stats = accumulate_stats(ubm, rng.standard_normal((80, 3)))
        n_big = np.repeat(stats.n, ubm.dim)
        sigma_inv = 1.0 / ubm.vars.reshape(-1)
        t = model.t_matrix
        precision = np.eye(3) + t.T @ (n_big[:, None] * sigma_inv[:, None] * t)
        centered = (stats.f - stats.n[:, None] * ubm.means).reshape(-1)
        expected = np.linalg.solve(precision, t.T @ (sigma_inv * centered))
        w, post_precision = ivector_posterior(model, stats)
        np.testing.assert_allclose(w, expected, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(post_precision, precision, rtol=1e-10)

    def test_zero_stats_give_zero_ivector(self):
        ubm = self._ubm()
        model = TotalVariabilityModel(ubm, np.random.default_rng(13).standard_normal((12, 3)))
        np.testing.assert_allclose(extract_ivector(model, SuffStats.zeros(4, 3)), 0.0)

    def test_em_objective_increases(self):
        ubm = self._ubm()
        stats = self._speaker_stats(ubm)
        model, trace = tmatrix_em_train(stats, ubm, rank=3, iters=6, seed=0)
        assert model.rank == 3
        assert len(trace) == 7
        _assert_non_decreasing(trace)

    def test_ivectors_cluster_by_speaker(self):
        ubm = self._ubm()
        stats = self._speaker_stats(ubm, speakers=4, per_speaker=5, frames=400)
        model, _ = tmatrix_em_train(stats, ubm, rank=4, iters=8, seed=1)
        vectors = np.array(extract_ivectors(model, stats, workers=2))
        labels = np.repeat(np.arange(4), 5)
        centroids = np.array([vectors[labels == s].mean(axis=0) for s in range(4)])
        distances = np.linalg.norm(vectors[:, None, :] - centroids[None, :, :], axis=2)
        assert np.mean(np.argmin(distances, axis=1) == labels) >= 0.9

    def test_rank_bounds(self):
        ubm = self._ubm()
        stats = self._speaker_stats(ubm, speakers=1, per_speaker=2)
        with pytest.raises(ConfigError):
            tmatrix_em_train(stats, ubm, rank=12)
        with pytest.raises(ConfigError):
            tmatrix_em_train(stats, ubm, rank=0)

    def test_few_utterances_warns(self):
        ubm = self._ubm()
        stats = self._speaker_stats(ubm, speakers=1, per_speaker=2)
        messages = []
        sink = logger.add(lambda m: messages.append(str(m)), level="WARNING")
        try:
            tmatrix_em_train(stats, ubm, rank=5, iters=1)
        finally:
            logger.remove(sink)
        assert any("少于 i-vector 维度" in m for m in messages)


class TestPlantedSubspace:
    """已知 T 生成的统计量：子空间恢复与大样本极限"""

    def _planted(self, seed=20):
        rng = np.random.default_rng(seed)
        ubm = DiagGmm(np.full(8, 1 / 8), rng.normal(0, 3, (8, 4)), rng.uniform(0.5, 1.5, (8, 4)))
        t_true = rng.standard_normal((32, 4)) * np.sqrt(ubm.vars).reshape(-1, 1)
        return ubm, t_true

    def _sample_stats(self, ubm, t_true, utterances, rng):
        """按模型假设直接生成统计量：F_c ~ N(N_c (m_c + T_c w), N_c Σ_c)"""
        blocks = t_true.reshape(8, 4, -1)
        stats = []
        for _ in range(utterances):
            w = rng.standard_normal(t_true.shape[1])
            n = rng.uniform(100.0, 300.0, 8)
            shift = ubm.means + blocks @ w
            noise = rng.standard_normal((8, 4)) * np.sqrt(n[:, None] * ubm.vars)
            stats.append(SuffStats(n, n[:, None] * shift + noise, int(n.sum())))
        return stats

    def test_recovers_planted_subspace(self):
        ubm, t_true = self._planted()
        stats = self._sample_stats(ubm, t_true, 400, np.random.default_rng(21))
        model, trace = tmatrix_em_train(stats, ubm, rank=4, iters=10, seed=3)
        _assert_non_decreasing(trace)
        angles = np.degrees(subspace_angles(model.t_matrix, t_true))
        assert np.max(angles) < 5.0

    def test_huge_counts_recover_latent(self):
        ubm, t_true = self._planted(seed=22)
        model = TotalVariabilityModel(ubm, t_true)
        w_true = np.array([0.5, -1.0, 2.0, 0.25])
        n = np.full(8, 1e6)
        f = n[:, None] * (ubm.means + t_true.reshape(8, 4, -1) @ w_true)
        w = extract_ivector(model, SuffStats(n, f, int(n.sum())))
        np.testing.assert_allclose(w, w_true, atol=1e-3)
