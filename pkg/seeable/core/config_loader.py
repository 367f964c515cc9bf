"""
配置加载器模块
用于加载YAML格式的业务配置文件
"""

from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from loguru import logger
from pydantic import ValidationError

from ..models.data_models import (
    CorpusConfig,
    PerturbationConfig,
    ScoringConfig,
    SubmaskScheme,
    ToyEncoderSpec,
    TrainConfig,
)
from .config import settings
from .exceptions import UsageError


class ConfigLoader:
    """配置加载器"""

    REQUIRED_SECTIONS = ["training", "perturbation", "submask", "encoder"]

    def __init__(self, config_path: Optional[str] = None):
        self.config_data: Dict[str, Any] = {}
        self.config_path: Optional[Path] = None
        self.load_config(config_path)

    def load_config(self, config_path: Optional[str] = None):
        """加载配置文件；未指定路径时依次查找 CONFIG_DIR 与当前目录"""
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise UsageError(f"配置文件不存在: {path}")
        else:
            path = Path(settings.CONFIG_DIR) / settings.CONFIG_FILE
            if not path.exists():
                fallback = Path(__file__).resolve().parents[2] / "config" / settings.CONFIG_FILE
                if fallback.exists():
                    path = fallback
                else:
                    logger.warning(f"配置文件不存在: {path}，使用默认配置")
                    self.config_data = {}
                    self.config_path = None
                    return

        try:
            with open(path, "r", encoding="utf-8") as file:
                self.config_data = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise UsageError(f"YAML解析错误: {path}: {e}") from e

        self.config_path = path
        logger.debug(f"配置文件加载成功: {path}")

    def get_config(self, key: str, default: Any = None) -> Any:
        """按点分路径获取配置值"""
        value: Any = self.config_data
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def _section_model(self, section: str, model_cls, overrides: Optional[Dict[str, Any]] = None):
        data = dict(self.get_config(section, {}) or {})
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return model_cls(**data)
        except ValidationError as e:
            raise UsageError(f"配置节 '{section}' 无效: {e}") from e

    def get_train_config(self, **overrides) -> TrainConfig:
        """获取训练配置，命令行参数优先"""
        return self._section_model("training", TrainConfig, overrides)

    def get_perturbation_config(self, **overrides) -> PerturbationConfig:
        """获取软差异参数"""
        return self._section_model("perturbation", PerturbationConfig, overrides)

    def get_submask_scheme(self, **overrides) -> SubmaskScheme:
        """获取子掩膜方案"""
        return self._section_model("submask", SubmaskScheme, overrides)

    def get_encoder_spec(self, **overrides) -> ToyEncoderSpec:
        """获取玩具编码器结构"""
        return self._section_model("encoder", ToyEncoderSpec, overrides)

    def get_scoring_config(self, **overrides) -> ScoringConfig:
        """获取评分设置"""
        return self._section_model("scoring", ScoringConfig, overrides)

    def get_corpus_config(self, **overrides) -> CorpusConfig:
        """获取合成数据集设置"""
        return self._section_model("corpus", CorpusConfig, overrides)

    def get_logging_config(self) -> Dict[str, Any]:
        """获取日志配置"""
        return self.get_config("logging", {}) or {}

    def validate_config(self) -> bool:
        """验证配置文件"""
        for section in self.REQUIRED_SECTIONS:
            if not self.get_config(section):
                logger.warning(f"缺少配置节: {section}，将使用默认值")

        try:
            train_cfg = self.get_train_config()
            self.get_perturbation_config()
            scheme = self.get_submask_scheme()
            self.get_encoder_spec()
            self.get_scoring_config()
        except UsageError as e:
            logger.error(f"配置文件验证失败: {e}")
            return False

        if scheme.kind.value == "grid" and (scheme.rows, scheme.cols) != (train_cfg.grid_rows, train_cfg.grid_cols):
            logger.warning(
                f"submask 网格 {scheme.rows}x{scheme.cols} 与 training 网格 "
                f"{train_cfg.grid_rows}x{train_cfg.grid_cols} 不一致，以 training 为准"
            )

        logger.debug("配置文件验证通过")
        return True

    def get_config_summary(self) -> Dict[str, Any]:
        """获取配置摘要"""
        return {
            "epochs": self.get_config("training.epochs", 200),
            "batch_size": self.get_config("training.batch_size", 6),
            "embedding_dim": self.get_config("training.embedding_dim", 128),
            "grid": f"{self.get_config('training.grid_rows', 4)}x{self.get_config('training.grid_cols', 4)}",
            "objective": self.get_config("training.objective", "bcr"),
            "submask_kind": self.get_config("submask.kind", "grid"),
            "families": self.get_config("perturbation.families", ["spatial", "frequency"]),
            "config_file": str(self.config_path) if self.config_path else None,
        }

