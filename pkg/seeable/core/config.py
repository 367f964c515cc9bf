"""
配置文件
包含进程级环境变量和应用设置
"""

from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """应用配置类"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        # 允许从环境变量覆盖配置
        env_prefix="SEEABLE_",
        extra="ignore",
    )

    # 日志设置
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = "logs/seeable.log"

    # 计算设置
    NUM_THREADS: int = 0  # 0 表示使用 torch 默认线程数

    # 配置文件路径
    CONFIG_DIR: str = "config"
    CONFIG_FILE: str = "seeable.yaml"


# 创建全局设置实例
settings = Settings()
