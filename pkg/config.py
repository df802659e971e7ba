from typing import List, Optional, Tuple, Type

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from models.cpc_models import CpcConfig, CpcVariant
from models.errors import ConfigError
from models.pipeline_models import FeatureChoice, Summarization
from models.trial_models import DcfParams

IVECTOR_MAX_INPUT_DIM = 60


class Settings(BaseSettings):
    """流水线配置（key=value 配置文件，# 开头为注释）"""

    # 基础
    workdir: str = "work"
    seed: int = 0
    log_level: str = "INFO"

    # 语料（逗号分隔的子集名）
    corpus_root: str = "corpus"
    train_subsets: str = "train-clean-100,train-clean-360"
    dev_subsets: str = "dev-clean,dev-other"
    test_subsets: str = "test-clean"

    # 特征与池化
    feature: FeatureChoice = FeatureChoice.MFCC
    summarization: Summarization = Summarization.POOL
    pca_dim: int = 0  # 0 表示不做 PCA
    lda_dim: int = 0  # 0 表示按特征维度自动选择
    plda_iters: int = 10

    # CPC
    cpc_variant: CpcVariant = CpcVariant.CDCK2
    cpc_epochs: int = 20
    cpc_encoder_channels: int = 512
    cpc_ar_hidden: Optional[int] = None  # 不填则按变体表
    cpc_batch: int = 64
    cpc_crop: int = 20480
    cpc_k: int = 12
    cpc_lr: float = 1e-4
    cpc_crops_per_utterance: int = 1
    cpc_dev_batches: int = 4

    # GMM-UBM / i-vector
    ubm_mixtures: int = 64
    ubm_iters: int = 10
    ubm_deltas: bool = False
    tv_rank: int = 50
    tv_iters: int = 5
    map_relevance: float = 16.0

    # 评估
    protocol: int = 1
    dcf_c_frr: float = 1.0
    dcf_c_far: float = 1.0
    dcf_p_target: float = 0.01

    # 估计量校验
    oracle_classes: int = 8
    oracle_batch: int = 8
    oracle_channels: int = 20
    oracle_trials: int = 200
    oracle_steps: int = 1500

    # 玩具语料
    toy_speakers: int = 8
    toy_chapters: int = 2
    toy_utterances: int = 4
    toy_seconds: float = 2.0

    model_config = SettingsConfigDict(env_file=None, env_file_encoding="utf-8", env_ignore_empty=True, extra="forbid")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # 只读取显式参数和配置文件，环境变量不参与
        return init_settings, dotenv_settings

    @model_validator(mode="after")
    def _check(self) -> "Settings":
        if self.protocol not in (1, 2):
            raise ConfigError(f"protocol 只能是 1 或 2: {self.protocol}")
        if self.pca_dim < 0 or self.lda_dim < 0:
            raise ConfigError("pca_dim / lda_dim 不能为负")
        if self.cpc_epochs < 1 or self.ubm_iters < 1 or self.tv_iters < 1:
            raise ConfigError("cpc_epochs / ubm_iters / tv_iters 至少为 1")
        if self.summarization == Summarization.IVECTOR and self.feature != FeatureChoice.MFCC:
            cpc_dim = self.pca_dim or self.cpc_config().feature_dim
            dim = cpc_dim + (24 if self.feature == FeatureChoice.FUSED else 0)
            if dim > IVECTOR_MAX_INPUT_DIM:
                raise ConfigError(
                    f"i-vector 输入维度 {dim} 超过 {IVECTOR_MAX_INPUT_DIM}，请设置 pca_dim 降维"
                )
        self.cpc_config()
        self.dcf_params()
        return self

    @staticmethod
    def split_list(value: str) -> List[str]:
        return [item.strip() for item in value.split(",") if item.strip()]

    def subsets(self, split: str) -> List[str]:
        return self.split_list(getattr(self, f"{split}_subsets"))

    def cpc_config(self) -> CpcConfig:
        return CpcConfig.for_variant(
            self.cpc_variant,
            encoder_channels=self.cpc_encoder_channels,
            ar_hidden=self.cpc_ar_hidden,
            batch=self.cpc_batch,
            crop=self.cpc_crop,
            k=self.cpc_k,
            lr=self.cpc_lr,
            crops_per_utterance=self.cpc_crops_per_utterance,
        )

    def dcf_params(self) -> DcfParams:
        return DcfParams(c_frr=self.dcf_c_frr, c_far=self.dcf_c_far, p_target=self.dcf_p_target)


class RuntimeEnv(BaseSettings):
    """运行时环境变量，只有 CPCV_WORKERS"""
    workers: int = Field(1, ge=1)

    model_config = SettingsConfigDict(env_prefix="CPCV_", extra="ignore")


def load_settings(config_path: Optional[str] = None, **overrides) -> Settings:
    """读取配置文件，再应用命令行覆盖项"""
    values = {key: value for key, value in overrides.items() if value is not None}
    return Settings(_env_file=config_path, **values)


def default_lines() -> List[str]:
    """所有配置项的默认值，key=value"""
    lines = []
    for name, field in Settings.model_fields.items():
        default = field.default
        if hasattr(default, "value"):
            default = default.value
        lines.append(f"{name}={'' if default is None else default}")
    return lines
