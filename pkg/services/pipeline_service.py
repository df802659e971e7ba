"""
流水线编排：清单 -> 特征 -> CPC -> 汇总（池化 / i-vector）-> 后端 -> 打分 -> 评估 -> 作图
每个阶段按内容哈希判断是否需要重跑，并写入 SQLite 回执
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import soundfile as sf
from loguru import logger

from analysis.audio_features import append_deltas, compute_mfcc, load_wav
from analysis.cpc import CpcModel, CpcTrainer, extract_context_features
from analysis.embedding_backend import (
    average_pool,
    fit_mean,
    fuse_concat,
    lda_fit,
    length_normalize,
    pca_fit,
    pca_transform_features,
    plda_fit,
    plda_score_pairs,
    project,
)
from analysis.gmm_ivector import (
    accumulate_stats_many,
    extract_ivectors,
    gmm_em_train,
    likelihood_ratio,
    map_adapt_means,
    stack_frames,
    tmatrix_em_train,
)
from analysis.verification_metrics import (
    compute_dcf,
    compute_det,
    compute_eer,
    generate_trials,
    read_scores,
    read_trials,
    write_det_csv,
    write_scores,
    write_trials,
)
from cache.artifact_store import (
    FeatureArchive,
    content_hash,
    files_hash,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
    write_archive,
)
from config import IVECTOR_MAX_INPUT_DIM, Settings
from models.backend_models import DiagGmm, EmbeddingSet, LdaModel, NormModel, PcaModel, PldaModel, TotalVariabilityModel
from models.cpc_models import CheckpointHeader, CpcConfig
from models.errors import ConfigError, DataError, DuplicateUtteranceError, EmptyDatasetError, MissingPrerequisiteError
from models.feature_models import FeatureConfig, FeatureKind, FeatureMatrix
from models.pipeline_models import MANIFEST_COLUMNS, SPLITS, EvalResult, FeatureChoice, Stage, StageReceipt, Summarization
from models.trial_models import ScoreSet, parse_utt_id
from services.plot_service import plot_det, plot_features, plot_training_curves
from services.receipt_storage import ReceiptStorage

# 平均池化 + LDA 的默认维度（按输入维度）
AUTO_LDA_DIMS = {256: 200, 40: 40, 24: 24}


def ingest(corpus_root: str, subsets: Sequence[str]) -> pd.DataFrame:
    """扫描 <subset>/<speaker>/<chapter>/*.wav，按 utt-id 字典序返回清单"""
    rows = []
    seen: Dict[str, str] = {}
    for subset in subsets:
        base = os.path.join(corpus_root, subset)
        if not os.path.isdir(base):
            logger.warning(f"[ingest] 子集目录不存在，跳过: {base}")
            continue
        for directory, _, files in sorted(os.walk(base)):
            for name in sorted(files):
                if not name.lower().endswith(".wav"):
                    continue
                path = os.path.abspath(os.path.join(directory, name))
                utt_id = os.path.splitext(name)[0]
                try:
                    speaker, chapter, _ = parse_utt_id(utt_id)
                except DataError as e:
                    logger.warning(f"[ingest] 跳过 {path}: {e}")
                    continue
                if utt_id in seen:
                    raise DuplicateUtteranceError(f"重复的 utt-id {utt_id}: {seen[utt_id]} 与 {path}")
                seen[utt_id] = path
                info = sf.info(path)
                rows.append({"utt_id": utt_id, "speaker": speaker, "chapter": chapter, "path": path,
                             "duration": info.frames / info.samplerate})
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    return frame.sort_values("utt_id").reset_index(drop=True)


class PipelineService:
    """按阶段运行的验证流水线"""

    FEATURE_PRODUCERS = {
        FeatureChoice.MFCC: Stage.EXTRACT_MFCC,
        FeatureChoice.CPC: Stage.EXTRACT_CPC,
        FeatureChoice.FUSED: Stage.FUSE,
    }
    EMBEDDING_PRODUCERS = {
        Summarization.POOL: Stage.POOL,
        Summarization.IVECTOR: Stage.EXTRACT_IVECTORS,
    }

    def __init__(self, settings: Settings, workers: int = 1):
        self.cfg = settings
        self.workers = max(1, workers)
        self.workdir = settings.workdir
        os.makedirs(self.workdir, exist_ok=True)
        self.receipts = ReceiptStorage(os.path.join(self.workdir, "receipts.db"))
        self.feature_cfg = FeatureConfig()
        self._handlers: Dict[Stage, Callable[[], bool]] = {
            Stage.INGEST: self.run_ingest,
            Stage.EXTRACT_MFCC: self.run_extract_mfcc,
            Stage.TRAIN_CPC: self.run_train_cpc,
            Stage.EXTRACT_CPC: self.run_extract_cpc,
            Stage.FUSE: self.run_fuse,
            Stage.TRAIN_UBM: self.run_train_ubm,
            Stage.TRAIN_TV: self.run_train_tv,
            Stage.EXTRACT_IVECTORS: self.run_extract_ivectors,
            Stage.POOL: self.run_pool,
            Stage.TRAIN_BACKEND: self.run_train_backend,
            Stage.SCORE: self.run_score,
            Stage.SCORE_UBM: self.run_score_ubm,
            Stage.EVAL: self.run_eval,
            Stage.PLOT: self.run_plot,
        }

    # ------------------------------------------------------------ 路径

    def path(self, *parts: str) -> str:
        return os.path.join(self.workdir, *parts)

    def manifest_path(self, split: str) -> str:
        return self.path("manifests", f"{split}.csv")

    def feature_path(self, kind: str, split: str) -> str:
        return self.path("features", kind, f"{split}.ark")

    def embedding_path(self, split: str) -> str:
        return self.path("embeddings", self.cfg.summarization.value, f"{split}.ark")

    def _rel(self, path: str) -> str:
        return os.path.relpath(path, self.workdir)

    # ------------------------------------------------------------ 调度

    def run(self, stage: Stage) -> bool:
        """运行单个阶段；返回 False 表示产物已是最新而跳过"""
        return self._handlers[Stage(stage)]()

    def stage_plan(self) -> List[Stage]:
        """当前配置下 `all` 要运行的阶段（拓扑序）"""
        plan = [Stage.INGEST, Stage.EXTRACT_MFCC]
        if self.cfg.feature in (FeatureChoice.CPC, FeatureChoice.FUSED):
            plan += [Stage.TRAIN_CPC, Stage.EXTRACT_CPC]
        if self.cfg.feature == FeatureChoice.FUSED:
            plan.append(Stage.FUSE)
        if self.cfg.summarization == Summarization.IVECTOR:
            plan += [Stage.TRAIN_UBM, Stage.TRAIN_TV, Stage.EXTRACT_IVECTORS]
        else:
            plan.append(Stage.POOL)
        plan += [Stage.TRAIN_BACKEND, Stage.SCORE]
        if self.cfg.summarization == Summarization.IVECTOR:
            plan.append(Stage.SCORE_UBM)
        plan += [Stage.EVAL, Stage.PLOT]
        return plan

    def run_all(self) -> Dict[str, bool]:
        return {stage.value: self.run(stage) for stage in self.stage_plan()}

    def _execute(self, stage: Stage, inputs: Sequence[Tuple[str, Optional[Stage]]], params: dict,
                 action: Callable[[], List[str]]) -> bool:
        for path, producer in inputs:
            if not os.path.exists(path):
                raise MissingPrerequisiteError(stage.value, self._rel(path), producer.value if producer else "ingest")
        inputs_hash = content_hash(stage.value, files_hash([p for p, _ in inputs]) if inputs else "", params)
        receipt = self.receipts.get(stage.value)
        if receipt is not None and receipt.inputs_hash == inputs_hash:
            outputs = [self.path(p) for p in receipt.outputs]
            if all(os.path.exists(p) for p in outputs) and files_hash(outputs) == receipt.outputs_hash:
                logger.info(f"[pipeline] {stage.value} 已是最新，跳过")
                return False

        logger.info(f"[pipeline] {stage.value} 开始")
        started = time.perf_counter()
        outputs = action()
        wall_time = time.perf_counter() - started
        self.receipts.put(StageReceipt(
            stage=stage.value,
            inputs_hash=inputs_hash,
            outputs_hash=files_hash(outputs),
            wall_time=wall_time,
            finished_at=datetime.now().isoformat(timespec="seconds"),
            outputs=sorted(self._rel(p) for p in outputs),
        ))
        logger.info(f"[pipeline] {stage.value} 完成，耗时 {wall_time:.2f}s，输出 {len(outputs)} 个文件")
        return True

    def _map(self, fn, items: Sequence) -> list:
        """按输入顺序收集的并行 map"""
        if self.workers <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    # ------------------------------------------------------------ 读取辅助

    def read_manifest(self, split: str) -> pd.DataFrame:
        return pd.read_csv(self.manifest_path(split), dtype={"utt_id": str, "speaker": str, "chapter": str,
                                                              "path": str, "duration": float})

    def _manifest_inputs(self, splits: Sequence[str] = SPLITS) -> List[Tuple[str, Stage]]:
        return [(self.manifest_path(split), Stage.INGEST) for split in splits]

    def _feature_inputs(self, splits: Sequence[str] = SPLITS) -> List[Tuple[str, Stage]]:
        producer = self.FEATURE_PRODUCERS[self.cfg.feature]
        return [(self.feature_path(self.cfg.feature.value, split), producer) for split in splits]

    def _embedding_inputs(self, splits: Sequence[str]) -> List[Tuple[str, Stage]]:
        producer = self.EMBEDDING_PRODUCERS[self.cfg.summarization]
        return [(self.embedding_path(split), producer) for split in splits]

    def _load_waveforms(self, split: str) -> List[Tuple[str, np.ndarray]]:
        manifest = self.read_manifest(split)
        waves = self._map(load_wav, manifest["path"].tolist())
        return [(utt_id, w) for utt_id, w in zip(manifest["utt_id"], waves)]

    def _ubm_frames(self, f: FeatureMatrix) -> np.ndarray:
        return append_deltas(f, order=2).values if self.cfg.ubm_deltas else f.values

    def _labels(self, split: str) -> Dict[str, str]:
        manifest = self.read_manifest(split)
        return dict(zip(manifest["utt_id"], manifest["speaker"]))

    def _embeddings(self, split: str) -> EmbeddingSet:
        archive = FeatureArchive(self.embedding_path(split))
        return EmbeddingSet({utt: f.values[0] for utt, f in archive.items()}, self._labels(split))

    # ------------------------------------------------------------ 阶段

    def run_ingest(self) -> bool:
        root = self.cfg.corpus_root
        subsets = {split: self.cfg.subsets(split) for split in SPLITS}
        listing = []
        for split_subsets in subsets.values():
            for subset in split_subsets:
                base = os.path.join(root, subset)
                for directory, _, files in sorted(os.walk(base)):
                    for name in sorted(files):
                        if name.lower().endswith(".wav"):
                            full = os.path.join(directory, name)
                            listing.append([os.path.relpath(full, root), os.path.getsize(full)])

        def action() -> List[str]:
            outputs, total, seen = [], 0, set()
            for split in SPLITS:
                manifest = ingest(root, subsets[split])
                duplicated = seen & set(manifest["utt_id"])
                if duplicated:
                    raise DuplicateUtteranceError(f"utt-id 在多个划分中重复: {sorted(duplicated)[:5]}")
                seen |= set(manifest["utt_id"])
                if manifest.empty:
                    logger.warning(f"[ingest] {split} 划分为空（子集 {subsets[split]}）")
                total += len(manifest)
                path = self.manifest_path(split)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                manifest.to_csv(path, index=False)
                outputs.append(path)
                logger.info(f"[ingest] {split}: {len(manifest)} 条语音, {manifest['speaker'].nunique()} 个说话人")
            if total == 0:
                raise EmptyDatasetError(f"{root} 下没有找到任何可用的 wav")
            return outputs

        return self._execute(Stage.INGEST, [], {"root": os.path.abspath(root), "subsets": subsets, "files": listing},
                             action)

    def run_extract_mfcc(self) -> bool:
        def action() -> List[str]:
            outputs = []
            for split in SPLITS:
                waves = self._load_waveforms(split)
                feats = self._map(lambda item: compute_mfcc(item[1], self.feature_cfg), waves)
                path = self.feature_path("mfcc", split)
                write_archive(path, {utt: f for (utt, _), f in zip(waves, feats)})
                outputs.append(path)
            return outputs

        return self._execute(Stage.EXTRACT_MFCC, self._manifest_inputs(), self.feature_cfg.model_dump(), action)

    def _cpc_params(self) -> dict:
        return {"cpc": self.cfg.cpc_config().model_dump(mode="json"), "epochs": self.cfg.cpc_epochs,
                "seed": self.cfg.seed, "dev_batches": self.cfg.cpc_dev_batches}

    def run_train_cpc(self) -> bool:
        ckpt = self.path("models", "cpc.ckpt")
        log_csv = self.path("logs", "cpc_train.csv")

        def action() -> List[str]:
            cpc_cfg = self.cfg.cpc_config()
            train = [(utt, w.samples) for utt, w in self._load_waveforms("train")]
            dev = [(utt, w.samples) for utt, w in self._load_waveforms("dev")]
            trainer = CpcTrainer(cpc_cfg, seed=self.cfg.seed, dev_batches=self.cfg.cpc_dev_batches)
            result = trainer.train(train, dev, epochs=self.cfg.cpc_epochs)
            best = result.best_record
            header = CheckpointHeader(variant=cpc_cfg.variant, epoch=result.best_epoch, dev_loss=best.dev_loss,
                                      dev_accuracy=best.dev_accuracy, config=cpc_cfg)
            save_checkpoint(ckpt, result.best_state, header)
            os.makedirs(os.path.dirname(log_csv), exist_ok=True)
            pd.DataFrame({
                "epoch": [r.epoch for r in result.history],
                "loss": [r.dev_loss for r in result.history],
                "accuracy": [r.dev_accuracy for r in result.history],
            }).to_csv(log_csv, index=False, float_format="%.6f")
            return [ckpt, ckpt + ".json", log_csv]

        return self._execute(Stage.TRAIN_CPC, self._manifest_inputs(["train", "dev"]), self._cpc_params(), action)

    def load_cpc_model(self) -> CpcModel:
        state, header = load_checkpoint(self.path("models", "cpc.ckpt"))
        model = CpcModel.init(header.config, seed=0, dtype=np.float32)
        model.load_state_dict(state)
        return model

    def run_extract_cpc(self) -> bool:
        ckpt = self.path("models", "cpc.ckpt")
        inputs = self._manifest_inputs() + [(ckpt, Stage.TRAIN_CPC)]

        def action() -> List[str]:
            model = self.load_cpc_model()
            features: Dict[str, Dict[str, FeatureMatrix]] = {}
            for split in SPLITS:
                waves = self._load_waveforms(split)
                feats = self._map(lambda item: extract_context_features(item[1], model), waves)
                features[split] = {utt: f for (utt, _), f in zip(waves, feats)}
            outputs = []
            if self.cfg.pca_dim:
                frames = stack_frames([f.values for f in features["train"].values()])
                pca = pca_fit(frames, self.cfg.pca_dim)
                save_model(self.path("models", "pca.bin"), pca)
                pca_json = self.path("results", "pca.json")
                os.makedirs(os.path.dirname(pca_json), exist_ok=True)
                with open(pca_json, "w", encoding="utf-8") as fh:
                    json.dump({"source_dim": int(frames.shape[1]), "dim": pca.dim,
                               "explained_ratio": round(pca.explained_ratio, 6)}, fh, indent=2)
                outputs += [self.path("models", "pca.bin"), pca_json]
                features = {split: {utt: pca_transform_features(pca, f) for utt, f in feats.items()}
                            for split, feats in features.items()}
            for split in SPLITS:
                path = self.feature_path("cpc", split)
                write_archive(path, features[split])
                outputs.append(path)
            return outputs

        return self._execute(Stage.EXTRACT_CPC, inputs, {"pca_dim": self.cfg.pca_dim}, action)

    def run_fuse(self) -> bool:
        inputs = [(self.feature_path("mfcc", s), Stage.EXTRACT_MFCC) for s in SPLITS]
        inputs += [(self.feature_path("cpc", s), Stage.EXTRACT_CPC) for s in SPLITS]

        def action() -> List[str]:
            outputs = []
            for split in SPLITS:
                mfcc = FeatureArchive(self.feature_path("mfcc", split))
                cpc = FeatureArchive(self.feature_path("cpc", split))
                fused = {}
                for utt, a in mfcc.items():
                    if utt not in cpc:
                        raise DataError(f"CPC 特征中缺少 {utt}")
                    fused[utt] = fuse_concat(a, cpc[utt])
                path = self.feature_path("fused", split)
                write_archive(path, fused)
                outputs.append(path)
            return outputs

        return self._execute(Stage.FUSE, inputs, {}, action)

    def _feature_dict(self, split: str) -> Dict[str, FeatureMatrix]:
        return dict(FeatureArchive(self.feature_path(self.cfg.feature.value, split)).items())

    def run_train_ubm(self) -> bool:
        ubm_path = self.path("models", "ubm.bin")
        params = {"mixtures": self.cfg.ubm_mixtures, "iters": self.cfg.ubm_iters, "deltas": self.cfg.ubm_deltas,
                  "seed": self.cfg.seed}

        def action() -> List[str]:
            feats = self._feature_dict("train")
            dim = next(iter(feats.values())).cols
            if dim > IVECTOR_MAX_INPUT_DIM:
                raise ConfigError(f"UBM 输入维度 {dim} 超过 {IVECTOR_MAX_INPUT_DIM}，请设置 pca_dim")
            frames = stack_frames([self._ubm_frames(f) for f in feats.values()])
            ubm, trace = gmm_em_train(frames, self.cfg.ubm_mixtures, self.cfg.ubm_iters, self.cfg.seed)
            logger.info(f"[ubm] loglik 轨迹: {[round(v, 2) for v in trace]}")
            save_model(ubm_path, ubm)
            return [ubm_path]

        return self._execute(Stage.TRAIN_UBM, self._feature_inputs(["train"]), params, action)

    def _stats(self, ubm: DiagGmm, split: str):
        feats = self._feature_dict(split)
        stats = accumulate_stats_many(ubm, [self._ubm_frames(f) for f in feats.values()], self.workers)
        return list(feats.keys()), stats

    def run_train_tv(self) -> bool:
        tv_path = self.path("models", "tv.bin")
        inputs = self._feature_inputs(["train"]) + [(self.path("models", "ubm.bin"), Stage.TRAIN_UBM)]
        params = {"rank": self.cfg.tv_rank, "iters": self.cfg.tv_iters, "seed": self.cfg.seed,
                  "deltas": self.cfg.ubm_deltas}

        def action() -> List[str]:
            ubm = load_model(self.path("models", "ubm.bin"), DiagGmm)
            _, stats = self._stats(ubm, "train")
            model, trace = tmatrix_em_train(stats, ubm, self.cfg.tv_rank, self.cfg.tv_iters, self.cfg.seed)
            logger.info(f"[tv] 目标函数轨迹: {[round(v, 2) for v in trace]}")
            save_model(tv_path, model)
            return [tv_path]

        return self._execute(Stage.TRAIN_TV, inputs, params, action)

    def run_extract_ivectors(self) -> bool:
        inputs = self._feature_inputs() + [(self.path("models", "tv.bin"), Stage.TRAIN_TV)]

        def action() -> List[str]:
            model = load_model(self.path("models", "tv.bin"), TotalVariabilityModel)
            outputs = []
            for split in SPLITS:
                ids, stats = self._stats(model.ubm, split)
                stats_path = self.path("stats", f"{split}.ark")
                write_archive(stats_path, {utt: FeatureMatrix(s.to_matrix(), FeatureKind.STATS)
                                           for utt, s in zip(ids, stats)})
                vectors = extract_ivectors(model, stats, self.workers)
                path = self.embedding_path(split)
                write_archive(path, {utt: FeatureMatrix(v[None, :], FeatureKind.EMBEDDING)
                                     for utt, v in zip(ids, vectors)})
                outputs += [stats_path, path]
            return outputs

        return self._execute(Stage.EXTRACT_IVECTORS, inputs, {"deltas": self.cfg.ubm_deltas}, action)

    def run_pool(self) -> bool:
        def action() -> List[str]:
            outputs = []
            for split in SPLITS:
                pooled = {utt: FeatureMatrix(average_pool(f)[None, :], FeatureKind.EMBEDDING)
                          for utt, f in self._feature_dict(split).items()}
                path = self.embedding_path(split)
                write_archive(path, pooled)
                outputs.append(path)
            return outputs

        return self._execute(Stage.POOL, self._feature_inputs(), {}, action)

    def resolve_lda_dim(self, dim: int, speakers: int) -> int:
        wanted = self.cfg.lda_dim or AUTO_LDA_DIMS.get(dim, dim)
        admissible = min(dim, speakers - 1)
        if wanted > admissible:
            logger.warning(f"[backend] LDA 维度 {wanted} 超过可用上限 {admissible}（{speakers} 个说话人），改用 {admissible}")
            wanted = admissible
        return wanted

    def run_train_backend(self) -> bool:
        inputs = self._embedding_inputs(["train"]) + self._manifest_inputs(["train"])
        outputs = [self.path("models", name) for name in ("norm.bin", "lda.bin", "plda.bin")]
        backend_json = self.path("results", "backend.json")

        def action() -> List[str]:
            train = self._embeddings("train")
            norm = fit_mean(train)
            normalized = length_normalize(train, norm)
            speakers = len(set(train.speakers()))
            lda_dim = self.resolve_lda_dim(train.dim, speakers)
            lda = lda_fit(normalized, lda_dim)
            plda = plda_fit(project(normalized, lda), self.cfg.plda_iters)
            for path, model in zip(outputs, (norm, lda, plda)):
                save_model(path, model)
            os.makedirs(os.path.dirname(backend_json), exist_ok=True)
            with open(backend_json, "w", encoding="utf-8") as fh:
                json.dump({"input_dim": train.dim, "lda_dim": lda_dim, "speakers": speakers,
                           "embeddings": len(train)}, fh, indent=2)
            return outputs + [backend_json]

        params = {"lda_dim": self.cfg.lda_dim, "plda_iters": self.cfg.plda_iters}
        return self._execute(Stage.TRAIN_BACKEND, inputs, params, action)

    def run_score(self) -> bool:
        trials_path = self.path("trials", "trials.txt")
        scores_path = self.path("scores", "plda.txt")
        inputs = self._embedding_inputs(["test"]) + self._manifest_inputs(["test"])
        inputs += [(self.path("models", name), Stage.TRAIN_BACKEND) for name in ("norm.bin", "lda.bin", "plda.bin")]

        def action() -> List[str]:
            trials = generate_trials(self.read_manifest("test"), self.cfg.protocol, self.cfg.seed)
            if not trials:
                raise EmptyDatasetError("没有生成任何 trial")
            write_trials(trials_path, trials)
            norm = load_model(self.path("models", "norm.bin"), NormModel)
            lda = load_model(self.path("models", "lda.bin"), LdaModel)
            plda = load_model(self.path("models", "plda.bin"), PldaModel)
            test = project(length_normalize(self._embeddings("test"), norm), lda)
            pairs = [(test.entries[t.enroll_id], test.entries[t.test_id]) for t in trials]
            scores = plda_score_pairs(plda, pairs, self.workers)
            write_scores(scores_path, ScoreSet(trials, np.asarray(scores)))
            return [trials_path, scores_path]

        return self._execute(Stage.SCORE, inputs, {"protocol": self.cfg.protocol, "seed": self.cfg.seed}, action)

    def run_score_ubm(self) -> bool:
        trials_path = self.path("trials", "trials.txt")
        scores_path = self.path("scores", "ubm.txt")
        inputs = self._feature_inputs(["test"]) + [(self.path("models", "ubm.bin"), Stage.TRAIN_UBM),
                                                   (trials_path, Stage.SCORE)]

        def action() -> List[str]:
            ubm = load_model(self.path("models", "ubm.bin"), DiagGmm)
            trials = read_trials(trials_path)
            feats = {utt: self._ubm_frames(f) for utt, f in self._feature_dict("test").items()}
            enroll_ids = sorted({t.enroll_id for t in trials})
            adapted = dict(zip(enroll_ids, self._map(
                lambda utt: map_adapt_means(ubm, feats[utt], self.cfg.map_relevance), enroll_ids)))
            scores = self._map(lambda t: likelihood_ratio(feats[t.test_id], adapted[t.enroll_id], ubm), trials)
            write_scores(scores_path, ScoreSet(trials, np.asarray(scores)))
            return [scores_path]

        params = {"relevance": self.cfg.map_relevance, "deltas": self.cfg.ubm_deltas}
        return self._execute(Stage.SCORE_UBM, inputs, params, action)

    def run_eval(self) -> bool:
        trials_path = self.path("trials", "trials.txt")
        inputs = [(trials_path, Stage.SCORE), (self.path("scores", "plda.txt"), Stage.SCORE),
                  (self.path("results", "backend.json"), Stage.TRAIN_BACKEND)]
        ubm_scores = self.path("scores", "ubm.txt")
        ubm_det = self.path("results", "det_ubm.csv")
        # GMM-UBM 分数只在 i-vector 路径下产生，其它汇总方式下视为过期
        use_ubm = self.cfg.summarization == Summarization.IVECTOR
        if use_ubm:
            inputs.append((ubm_scores, Stage.SCORE_UBM))

        def action() -> List[str]:
            trials = read_trials(trials_path)
            scores = read_scores(self.path("scores", "plda.txt"), trials)
            params = self.cfg.dcf_params()
            eer = compute_eer(scores)
            min_dcf, threshold = compute_dcf(scores, params)
            det_path = self.path("results", "det.csv")
            write_det_csv(det_path, compute_det(scores))
            outputs = [det_path]
            with open(self.path("results", "backend.json"), "r", encoding="utf-8") as fh:
                backend = json.load(fh)

            ubm_eer = None
            if use_ubm:
                ubm_set = read_scores(ubm_scores, trials)
                ubm_eer = compute_eer(ubm_set)
                write_det_csv(ubm_det, compute_det(ubm_set))
                outputs.append(ubm_det)
            elif os.path.exists(ubm_det):
                logger.info(f"[eval] 删除过期的 {self._rel(ubm_det)}")
                os.remove(ubm_det)

            result = EvalResult(
                feature=self.cfg.feature.value,
                dim=self._feature_dim(),
                summarization=self.cfg.summarization.value,
                lda_dim=backend["lda_dim"],
                protocol=self.cfg.protocol,
                trials=len(trials),
                targets=int(scores.labels.sum()),
                eer=eer,
                min_dcf=min_dcf,
                min_dcf_threshold=threshold,
                normalized_min_dcf=min_dcf / params.default_cost,
                ubm_eer=ubm_eer,
            )
            eval_path = self.path("results", "eval.json")
            with open(eval_path, "w", encoding="utf-8") as fh:
                fh.write(result.model_dump_json(indent=2))
            report = self.path("results", "report.md")
            with open(report, "w", encoding="utf-8") as fh:
                fh.write("| feature | dim | summarization | LDA dim | protocol | EER (%) | minDCF |\n")
                fh.write("| --- | --- | --- | --- | --- | --- | --- |\n")
                fh.write(f"| {result.feature} | {result.dim} | {result.summarization} | {result.lda_dim} | "
                         f"{result.protocol} | {100 * eer:.3f} | {min_dcf:.4f} |\n")
            logger.info(f"[eval] EER={100 * eer:.3f}% minDCF={min_dcf:.4f} ({len(trials)} trials)")
            return outputs + [eval_path, report]

        params = {**self.cfg.dcf_params().model_dump(), "summarization": self.cfg.summarization.value}
        return self._execute(Stage.EVAL, inputs, params, action)

    def _feature_dim(self) -> int:
        path = self.feature_path(self.cfg.feature.value, "test")
        archive = FeatureArchive(path)
        return archive[archive.keys()[0]].cols if len(archive) else 0

    def run_plot(self) -> bool:
        det_path = self.path("results", "det.csv")
        inputs = [(det_path, Stage.EVAL)]
        optional = {
            "ubm_det": self.path("results", "det_ubm.csv"),
            "train_log": self.path("logs", "cpc_train.csv"),
            "mfcc": self.feature_path("mfcc", "test"),
            "cpc": self.feature_path("cpc", "test"),
        }
        inputs += [(p, None) for p in optional.values() if os.path.exists(p)]

        def action() -> List[str]:
            curves = {f"{self.cfg.feature.value}+{self.cfg.summarization.value}+PLDA": det_path}
            if self.cfg.summarization == Summarization.IVECTOR and os.path.exists(optional["ubm_det"]):
                curves[f"{self.cfg.feature.value}+GMM-UBM"] = optional["ubm_det"]
            outputs = [plot_det(curves, self.path("results", "det.svg"))]
            if os.path.exists(optional["train_log"]):
                outputs.append(plot_training_curves(optional["train_log"], self.path("results", "training_curves.svg")))
            for kind in ("mfcc", "cpc"):
                if os.path.exists(optional[kind]):
                    archive = FeatureArchive(optional[kind])
                    if len(archive):
                        utt = archive.keys()[0]
                        written = plot_features(archive[utt], self.path("results", "heatmaps", f"{kind}_{utt}"))
                        outputs += [written["pgm"], written["csv"]]
            return outputs

        return self._execute(Stage.PLOT, inputs, {}, action)

    def close(self):
        self.receipts.close()
