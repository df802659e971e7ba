#!/usr/bin/env python3
"""
流水线与命令行测试
在玩具语料上端到端运行 MFCC / CPC / i-vector 三条路径，并检查增量重跑与退出码
"""

import json
import os
import sys

import numpy as np
import pandas as pd
import pytest
from loguru import logger
from pydantic import ValidationError

# 添加项目路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from analysis.audio_features import write_wav
from analysis.verification_metrics import probit, read_det_csv, read_trials
from config import Settings, default_lines, load_settings
from main import EXIT_CONFIG, EXIT_DATA, EXIT_FAILURE, EXIT_OK, main
from models.errors import DuplicateUtteranceError, MissingPrerequisiteError
from models.feature_models import FeatureKind, FeatureMatrix
from models.pipeline_models import EvalResult, FeatureChoice, Stage, Summarization
from services.pipeline_service import PipelineService, ingest
from services.plot_service import feature_image, plot_det, plot_features, read_pgm
from services.toy_corpus import generate_toy_corpus

TOY_SUBSETS = {"train_subsets": "toy-train", "dev_subsets": "toy-dev", "test_subsets": "toy-test"}


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_toy_corpus(str(root), speakers=6, chapters=2, utterances=3, seconds=1.5, seed=0)
    return str(root)


def toy_settings(root: str, workdir: str, **overrides) -> Settings:
    values = dict(TOY_SUBSETS, corpus_root=root, workdir=workdir)
    values.update(overrides)
    return load_settings(None, **values)


def read_eval(service: PipelineService) -> EvalResult:
    with open(service.path("results", "eval.json"), encoding="utf-8") as fh:
        return EvalResult.model_validate_json(fh.read())


def write_config(path, **values) -> str:
    lines = ["# 测试配置"] + [f"{key}={value}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


class TestSettings:
    """配置解析"""

    def test_defaults(self):
        settings = Settings()
        assert settings.feature == FeatureChoice.MFCC
        assert settings.dcf_params().p_target == pytest.approx(0.01)
        assert "protocol=1" in default_lines()

    def test_config_file_and_overrides(self, tmp_path):
        path = write_config(tmp_path / "run.cfg", feature="fused", summarization="pool", protocol=2, seed=3)
        settings = load_settings(path, seed=9)
        assert settings.feature == FeatureChoice.FUSED
        assert settings.protocol == 2
        assert settings.seed == 9
        assert settings.subsets("test") == ["test-clean"]

    def test_invalid_values(self, tmp_path):
        with pytest.raises(ValidationError):
            load_settings(write_config(tmp_path / "a.cfg", protocol=3))
        with pytest.raises(ValidationError):
            load_settings(write_config(tmp_path / "b.cfg", unknown_key=1))
        with pytest.raises(ValidationError):
            load_settings(None, dcf_p_target=1.5)

    def test_ivector_input_dimension_limit(self):
        with pytest.raises(ValidationError):
            Settings(feature="cpc", summarization="ivector")
        settings = Settings(feature="cpc", summarization="ivector", pca_dim=24)
        assert settings.summarization == Summarization.IVECTOR


class TestIngest:
    """语料扫描"""

    def test_manifest_sorted_with_durations(self, toy_root):
        manifest = ingest(toy_root, ["toy-test"])
        assert len(manifest) == 36
        assert list(manifest["utt_id"]) == sorted(manifest["utt_id"])
        np.testing.assert_allclose(manifest["duration"], 1.5)
        assert manifest["speaker"].nunique() == 6

    def test_skips_bad_names_and_missing_subsets(self, tmp_path):
        write_wav(str(tmp_path / "sub" / "1" / "2" / "1-2-0000.wav"), np.zeros(1600), 16000)
        write_wav(str(tmp_path / "sub" / "1" / "2" / "notes.wav"), np.zeros(1600), 16000)
        messages = []
        sink = logger.add(lambda m: messages.append(str(m)), level="WARNING")
        try:
            manifest = ingest(str(tmp_path), ["sub", "absent"])
        finally:
            logger.remove(sink)
        assert list(manifest["utt_id"]) == ["1-2-0000"]
        assert len(messages) == 2

    def test_duplicate_ids(self, tmp_path):
        for subset in ("a", "b"):
            write_wav(str(tmp_path / subset / "1" / "2" / "1-2-0000.wav"), np.zeros(1600), 16000)
        with pytest.raises(DuplicateUtteranceError):
            ingest(str(tmp_path), ["a", "b"])


class TestPipeline:
    """端到端流水线"""

    def test_mfcc_pool_plda(self, toy_root, tmp_path):
        service = PipelineService(toy_settings(toy_root, str(tmp_path / "work")), workers=2)
        try:
            first = service.run_all()
            assert all(first.values())
            assert list(first) == [s.value for s in service.stage_plan()]

            result = read_eval(service)
            assert result.feature == "mfcc" and result.dim == 24
            assert result.lda_dim == 5
            assert result.eer < 0.25
            assert 0 < result.targets < result.trials
            with open(service.path("trials", "trials.txt"), encoding="utf-8") as fh:
                trial_lines = len(fh.read().splitlines())
            with open(service.path("scores", "plda.txt"), encoding="utf-8") as fh:
                assert len(fh.read().splitlines()) == trial_lines == result.trials
            det = read_det_csv(service.path("results", "det.csv"))
            assert det["far"].iloc[-1] == 0.0
            assert os.path.exists(service.path("results", "det.svg"))
            heatmaps = os.listdir(service.path("results", "heatmaps"))
            assert any(name.startswith("mfcc_") and name.endswith(".pgm") for name in heatmaps)
            with open(service.path("results", "backend.json"), encoding="utf-8") as fh:
                assert json.load(fh)["speakers"] == 6

            second = service.run_all()
            assert not any(second.values())
            assert len(service.receipts.list_receipts()) == len(first)
        finally:
            service.close()

    def test_changed_parameter_reruns_only_dependents(self, toy_root, tmp_path):
        workdir = str(tmp_path / "work")
        service = PipelineService(toy_settings(toy_root, workdir), workers=1)
        try:
            service.run_all()
        finally:
            service.close()
        service = PipelineService(toy_settings(toy_root, workdir, protocol=2), workers=1)
        try:
            assert service.run(Stage.INGEST) is False
            assert service.run(Stage.TRAIN_BACKEND) is False
            assert service.run(Stage.SCORE) is True
            assert service.run(Stage.EVAL) is True
        finally:
            service.close()
        report = (tmp_path / "work" / "results" / "report.md").read_text(encoding="utf-8")
        lines = report.strip().splitlines()
        assert len(lines) == 3
        assert "| mfcc | 24 | pool | 5 | 2 |" in lines[-1]

    def test_protocol2_runs_are_reproducible(self, toy_root, tmp_path):
        """相同配置与种子跑两次：EER 与各阶段产物哈希完全一致"""
        runs = []
        for name in ("a", "b"):
            service = PipelineService(toy_settings(toy_root, str(tmp_path / name), protocol=2, seed=4), workers=2)
            try:
                service.run_all()
                hashes = {r.stage: r.outputs_hash for r in service.receipts.list_receipts()}
                runs.append((read_eval(service), hashes, service))
            finally:
                service.close()
        (first, first_hashes, service), (second, second_hashes, _) = runs
        assert first.protocol == 2
        assert first.eer == pytest.approx(second.eer, abs=1e-10)
        assert first.min_dcf == pytest.approx(second.min_dcf, abs=1e-10)
        assert first_hashes == second_hashes
        assert first.eer < 0.5

        chapter_of = dict(zip(service.read_manifest("test")["utt_id"], service.read_manifest("test")["chapter"]))
        trials = read_trials(service.path("trials", "trials.txt"))
        targets = [t for t in trials if t.is_target]
        assert targets and len(targets) < len(trials)
        assert all(chapter_of[t.enroll_id] != chapter_of[t.test_id] for t in targets)
        assert not {t.enroll_id for t in trials} & {t.test_id for t in trials}

    def test_missing_prerequisite(self, toy_root, tmp_path):
        service = PipelineService(toy_settings(toy_root, str(tmp_path / "work")))
        try:
            with pytest.raises(MissingPrerequisiteError) as info:
                service.run(Stage.EXTRACT_MFCC)
            assert info.value.producer == "ingest"
            service.run(Stage.INGEST)
            with pytest.raises(MissingPrerequisiteError) as info:
                service.run(Stage.POOL)
            assert info.value.producer == "extract-mfcc"
        finally:
            service.close()

    def test_ivector_path_with_ubm_scores(self, toy_root, tmp_path):
        settings = toy_settings(toy_root, str(tmp_path / "work"), summarization="ivector", ubm_mixtures=4,
                                ubm_iters=3, tv_rank=4, tv_iters=2)
        service = PipelineService(settings, workers=2)
        try:
            assert Stage.SCORE_UBM in service.stage_plan()
            service.run_all()
            result = read_eval(service)
            assert result.summarization == "ivector"
            assert result.lda_dim == 4
            assert result.ubm_eer is not None and 0.0 <= result.ubm_eer <= 1.0
            assert os.path.exists(service.path("results", "det_ubm.csv"))
            assert os.path.exists(service.path("stats", "test.ark"))
        finally:
            service.close()

        # 切换回平均池化后，GMM-UBM 分数与 DET 不再参与评估
        service = PipelineService(toy_settings(toy_root, str(tmp_path / "work")), workers=2)
        try:
            service.run_all()
            result = read_eval(service)
            assert result.summarization == "pool"
            assert result.ubm_eer is None
            assert not os.path.exists(service.path("results", "det_ubm.csv"))
        finally:
            service.close()

    def test_fused_cpc_path(self, toy_root, tmp_path):
        settings = toy_settings(toy_root, str(tmp_path / "work"), feature="fused", cpc_variant="CDCK5",
                                cpc_epochs=1, cpc_encoder_channels=8, cpc_ar_hidden=6, cpc_batch=4,
                                cpc_crop=2560, cpc_k=3, cpc_lr=1e-3, cpc_dev_batches=1, pca_dim=4)
        service = PipelineService(settings)
        try:
            service.run_all()
            log = pd.read_csv(service.path("logs", "cpc_train.csv"))
            assert list(log.columns) == ["epoch", "loss", "accuracy"]
            with open(service.path("results", "pca.json"), encoding="utf-8") as fh:
                pca = json.load(fh)
            assert (pca["source_dim"], pca["dim"]) == (6, 4)
            assert 0 < pca["explained_ratio"] <= 100
            result = read_eval(service)
            assert result.feature == "fused" and result.dim == 28
            assert os.path.exists(service.path("results", "training_curves.svg"))
        finally:
            service.close()


class TestCpcOnToyCorpus:
    """8 个声源的玩具语料：batch 64 下 CPC 训练越过随机基线，CPC 特征可用于验证"""

    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("toy8")
        generate_toy_corpus(str(root), speakers=8, chapters=2, utterances=4, seconds=2.0, seed=0)
        settings = toy_settings(str(root), str(root / "work"), feature="cpc", cpc_variant="CDCK2",
                                cpc_encoder_channels=32, cpc_ar_hidden=16, cpc_batch=64, cpc_crop=5120, cpc_k=4,
                                cpc_lr=3e-3, cpc_crops_per_utterance=8, cpc_epochs=20, cpc_dev_batches=2)
        service = PipelineService(settings, workers=2)
        try:
            service.run_all()
            yield service
        finally:
            service.close()

    def test_training_beats_chance(self, trained):
        log = pd.read_csv(trained.path("logs", "cpc_train.csv"))
        assert len(log) == 20
        assert log["loss"].min() < np.log(64) - 0.5
        assert log["accuracy"].max() > 5 / 64

    def test_cpc_features_verify_speakers(self, trained):
        result = read_eval(trained)
        assert result.feature == "cpc" and result.dim == 16
        assert result.eer < 0.45


class TestPlots:
    """作图输出"""

    def test_feature_heatmap(self, tmp_path):
        values = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
        written = plot_features(FeatureMatrix(values, FeatureKind.MFCC), str(tmp_path / "heat" / "mfcc_x"))
        image = read_pgm(written["pgm"])
        assert image.shape == (2, 5)
        np.testing.assert_array_equal(image[0], [0, 64, 128, 191, 255])
        np.testing.assert_array_equal(image[1], 128)
        stats = pd.read_csv(written["csv"])
        assert stats["variance_ratio"].tolist() == [1.0, 0.0]
        np.testing.assert_array_equal(feature_image(FeatureMatrix(values, FeatureKind.MFCC)), image)

    def test_det_svg_is_reproducible(self, tmp_path):
        det = pd.DataFrame({"far": [1.0, 0.5, 0.0], "frr": [0.0, 0.25, 1.0]})
        det["probit_far"] = probit(det["far"].to_numpy())
        det["probit_frr"] = probit(det["frr"].to_numpy())
        csv = str(tmp_path / "det.csv")
        det.to_csv(csv, index=False)
        a = plot_det({"mfcc": csv}, str(tmp_path / "a.svg"))
        b = plot_det({"mfcc": csv}, str(tmp_path / "b.svg"))
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()


class TestCommandLine:
    """命令行退出码"""

    def test_show_config(self, capsys):
        assert main(["show-config"]) == EXIT_OK
        assert "feature=mfcc" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert main(["ingest", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path):
        path = write_config(tmp_path / "bad.cfg", protocol=3, workdir=tmp_path / "work")
        assert main(["ingest", "--config", path]) == EXIT_CONFIG

    def test_empty_corpus_is_data_error(self, tmp_path):
        (tmp_path / "corpus").mkdir()
        path = write_config(tmp_path / "run.cfg", corpus_root=tmp_path / "corpus", workdir=tmp_path / "work")
        assert main(["ingest", "--config", path]) == EXIT_DATA

    def test_missing_stage_input(self, tmp_path):
        path = write_config(tmp_path / "run.cfg", workdir=tmp_path / "work")
        assert main(["score", "--config", path]) == EXIT_FAILURE

    def test_toy_corpus_then_all(self, tmp_path):
        corpus = tmp_path / "corpus"
        path = write_config(tmp_path / "run.cfg", corpus_root=corpus, workdir=tmp_path / "work", toy_speakers=4,
                            toy_chapters=2, toy_utterances=2, toy_seconds=1.0, **TOY_SUBSETS)
        assert main(["toy-corpus", "--config", path]) == EXIT_OK
        assert len(list(corpus.rglob("*.wav"))) == 48
        assert main(["all", "--config", path, "--seed", "1"]) == EXIT_OK
        assert (tmp_path / "work" / "results" / "eval.json").exists()
        assert (tmp_path / "work" / "logs" / "cpcv.log").exists()
