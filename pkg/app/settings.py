# settings.py
from pydantic_settings import BaseSettings
from pydantic import ConfigDict

class Settings(BaseSettings):
    TITLE: str = "nfs"
    DESCRIPTION: str = "Neural feature search for cross-modality identity retrieval"
    VERSION: str = "1.0.0"

    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True

    OUTPUT_DIR: str = "runs"
    DEFAULT_CONFIG_PATH: str = "config/config.yaml"

    model_config = ConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore"
    )

settings = Settings()
