#!/usr/bin/env python3
"""
语音级后端测试：池化、PCA、长度归一、LDA、PLDA 与特征拼接
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

from analysis.embedding_backend import (
    PldaScorer,
    average_pool,
    fit_mean,
    fuse_concat,
    lda_fit,
    lda_transform,
    length_normalize,
    mean_length_normalize,
    pca_fit,
    pca_transform,
    plda_fit,
    plda_llr,
    plda_score_pairs,
    project,
    scatter_matrices,
)
from models.backend_models import EmbeddingSet, NormModel, PldaModel
from models.errors import ConfigError, DataError
from models.feature_models import FeatureKind, FeatureMatrix


def make_speaker_set(speakers=6, per_speaker=8, dim=5, between=3.0, within=0.5, seed=0):
    """每个说话人一个随机中心，加上各向同性的语音内噪声"""
    rng = np.random.default_rng(seed)
    entries, labels = {}, {}
    for s in range(speakers):
        center = rng.normal(0, np.sqrt(between), dim)
        for u in range(per_speaker):
            utt_id = f"{100 + s}-1-{u:04d}"
            entries[utt_id] = center + rng.normal(0, np.sqrt(within), dim)
            labels[utt_id] = str(100 + s)
    return EmbeddingSet(entries, labels)


class TestPoolingAndPca:
    """平均池化与 PCA"""

    def test_average_pool(self):
        f = FeatureMatrix(np.array([[1.0, 2.0], [3.0, 6.0]]), FeatureKind.MFCC)
        np.testing.assert_allclose(average_pool(f), [2.0, 4.0])

    def test_pca_matches_svd_subspace(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((500, 6)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.2, 0.1])
        model = pca_fit(x, 2)
        _, _, vt = np.linalg.svd(x - x.mean(axis=0), full_matrices=False)
        assert np.max(subspace_angles(model.basis, vt[:2].T)) < 1e-6
        np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(2), atol=1e-10)
        assert 90.0 < model.explained_ratio <= 100.0
        projected = pca_transform(model, x)
        assert projected.shape == (500, 2)
        np.testing.assert_allclose(projected.mean(axis=0), 0.0, atol=1e-10)

    def test_pca_is_deterministic_in_sign(self):
        x = np.random.default_rng(2).standard_normal((100, 4))
        a = pca_fit(x, 3).basis
        b = pca_fit(x.copy(), 3).basis
        np.testing.assert_array_equal(a, b)
        for j in range(3):
            first = np.flatnonzero(np.abs(a[:, j]) > 1e-12)[0]
            assert a[first, j] > 0

    def test_reconstruction_error_is_discarded_variance(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 6)) + rng.normal(0, 2, 6)
        for dim in (1, 3, 5):
            model = pca_fit(x, dim)
            restored = pca_transform(model, x) @ model.basis.T + model.mean
            error = np.mean(np.sum((x - restored) ** 2, axis=1))
            assert error == pytest.approx(model.eigenvalues[dim:].sum(), rel=1e-8)

    def test_pca_dimension_checks(self):
        x = np.random.default_rng(3).standard_normal((50, 4))
        with pytest.raises(ConfigError):
            pca_fit(x, 5)
        column = np.random.default_rng(4).standard_normal((50, 1))
        with pytest.raises(ConfigError):
            pca_fit(np.hstack([column, 2 * column, np.zeros((50, 2))]), 2)


class TestNormalization:
    """均值与长度归一"""

    def test_unit_length_after_centering(self):
        embeddings = make_speaker_set()
        normalized = mean_length_normalize(embeddings)
        np.testing.assert_allclose(np.linalg.norm(normalized.matrix(), axis=1), 1.0)
        assert normalized.labels == embeddings.labels

    def test_zero_vector_stays_zero(self):
        embeddings = EmbeddingSet({"1-1-0": np.array([1.0, 1.0]), "2-1-0": np.array([3.0, 4.0])},
                                  {"1-1-0": "1", "2-1-0": "2"})
        messages = []
        sink = logger.add(lambda m: messages.append(str(m)), level="WARNING")
        try:
            out = length_normalize(embeddings, NormModel(mean=np.array([1.0, 1.0])))
        finally:
            logger.remove(sink)
        np.testing.assert_array_equal(out.entries["1-1-0"], [0.0, 0.0])
        np.testing.assert_allclose(out.entries["2-1-0"], np.array([2.0, 3.0]) / np.sqrt(13.0))
        assert messages

    def test_fit_mean_needs_two(self):
        with pytest.raises(DataError):
            fit_mean(EmbeddingSet({"1-1-0": np.ones(3)}, {"1-1-0": "1"}))


class TestLda:
    """LDA"""

    def test_generalized_eigen_problem(self):
        embeddings = make_speaker_set(seed=5)
        model = lda_fit(embeddings, 3)
        _, between, within = scatter_matrices(embeddings)
        for j in range(3):
            v = model.basis[:, j]
            lam = model.eigenvalues[j]
            np.testing.assert_allclose(between @ v, lam * (within @ v), rtol=1e-4, atol=1e-8)
        assert np.all(np.diff(model.eigenvalues) <= 1e-12)

    def test_projection_separates_speakers(self):
        embeddings = make_speaker_set(seed=6, within=0.2)
        reduced = project(embeddings, lda_fit(embeddings, 4))
        assert reduced.dim == 4
        _, between, within = scatter_matrices(reduced)
        assert np.trace(between) > 5 * np.trace(within)

    def test_dimension_capped_by_speakers(self):
        embeddings = make_speaker_set(speakers=3, dim=5)
        with pytest.raises(ConfigError):
            lda_fit(embeddings, 3)
        assert lda_transform(lda_fit(embeddings, 2), embeddings.matrix()).shape == (len(embeddings), 2)


class TestPlda:
    """两协方差 PLDA"""

    def _model(self, seed=7, dim=3):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((dim, dim))
        c = rng.standard_normal((dim, dim))
        return PldaModel(mu=rng.standard_normal(dim), between=a @ a.T + np.eye(dim), within=c @ c.T + 0.5 * np.eye(dim))

    def test_llr_matches_joint_gaussians(self):
        model = self._model()
        rng = np.random.default_rng(8)
        total = model.between + model.within
        same = np.block([[total, model.between], [model.between, total]])
        diff = np.block([[total, np.zeros_like(total)], [np.zeros_like(total), total]])
        mean = np.concatenate([model.mu, model.mu])
        for _ in range(5):
            e, t = rng.standard_normal(3), rng.standard_normal(3)
            pair = np.concatenate([e, t])
            expected = multivariate_normal(mean, same).logpdf(pair) - multivariate_normal(mean, diff).logpdf(pair)
            assert plda_llr(model, e, t) == pytest.approx(expected, rel=1e-8, abs=1e-9)

    def test_llr_is_symmetric(self):
        model = self._model(seed=9)
        e, t = np.random.default_rng(10).standard_normal((2, 3))
        scorer = PldaScorer(model)
        assert scorer.score(e, t) == pytest.approx(scorer.score(t, e))

    def test_fit_recovers_covariances(self):
        rng = np.random.default_rng(11)
        between, within = np.diag([4.0, 1.0]), np.diag([0.5, 0.25])
        entries, labels = {}, {}
        for s in range(300):
            y = rng.multivariate_normal(np.zeros(2), between)
            for u in range(4):
                utt_id = f"{s}-1-{u}"
                entries[utt_id] = y + rng.multivariate_normal(np.zeros(2), within)
                labels[utt_id] = str(s)
        model = plda_fit(EmbeddingSet(entries, labels), iters=10)
        np.testing.assert_allclose(model.between, between, atol=0.6)
        np.testing.assert_allclose(model.within, within, atol=0.08)

    def test_target_scores_exceed_nontarget(self):
        train = make_speaker_set(speakers=10, seed=12)
        model = plda_fit(train, iters=5)
        test = make_speaker_set(speakers=4, per_speaker=3, seed=13)
        target, nontarget = [], []
        for i, a in enumerate(test.ids):
            for b in test.ids[i + 1:]:
                score = plda_llr(model, test.entries[a], test.entries[b])
                (target if test.labels[a] == test.labels[b] else nontarget).append(score)
        assert np.mean(target) > np.mean(nontarget)

    def test_llr_invariant_to_rotation(self):
        train = make_speaker_set(speakers=8, dim=4, seed=16)
        rotation, _ = np.linalg.qr(np.random.default_rng(17).standard_normal((4, 4)))
        rotated = train.replace(train.matrix() @ rotation.T)
        model = plda_fit(train, iters=5)
        rotated_model = plda_fit(rotated, iters=5)
        rng = np.random.default_rng(18)
        for _ in range(5):
            e, t = rng.normal(0, 2, (2, 4))
            assert plda_llr(rotated_model, rotation @ e, rotation @ t) == pytest.approx(
                plda_llr(model, e, t), rel=1e-8, abs=1e-8)

    def test_needs_two_speakers_with_two_utterances(self):
        entries = {"1-1-0": np.ones(2), "1-1-1": np.zeros(2), "2-1-0": np.array([1.0, 0.0])}
        labels = {"1-1-0": "1", "1-1-1": "1", "2-1-0": "2"}
        with pytest.raises(DataError):
            plda_fit(EmbeddingSet(entries, labels))

    def test_parallel_scores_keep_order(self):
        model = self._model(seed=14)
        rng = np.random.default_rng(15)
        pairs = [(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(20)]
        assert plda_score_pairs(model, pairs, workers=4) == plda_score_pairs(model, pairs, workers=1)


class TestFusion:
    """特征拼接"""

    def test_truncates_to_shorter(self):
        a = FeatureMatrix(np.ones((5, 2)), FeatureKind.MFCC)
        b = FeatureMatrix(np.zeros((4, 3)), FeatureKind.CPC)
        fused = fuse_concat(a, b)
        assert fused.kind == FeatureKind.FUSED
        assert (fused.rows, fused.cols) == (4, 5)
        np.testing.assert_array_equal(fused.values[:, :2], 1.0)

    def test_frame_shift_mismatch(self):
        a = FeatureMatrix(np.ones((5, 2)), FeatureKind.MFCC, frame_shift=10.0)
        b = FeatureMatrix(np.ones((5, 2)), FeatureKind.CPC, frame_shift=20.0)
        with pytest.raises(DataError):
            fuse_concat(a, b)
