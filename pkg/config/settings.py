from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings loaded from environment variables"""

    # Application
    APP_NAME: str = "DVA Retrieval"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Logging
    LOG_DIR: str = "./logs"
    LOG_FILE: str = "dva.log"
    LOG_MAX_BYTES: int = 10 * 1024 * 1024
    LOG_BACKUP_COUNT: int = 5

    # Storage
    DEFAULT_OUT_DIR: str = "./runs"

    model_config = {
        "env_file": ".env",
        "case_sensitive": True
    }


settings = Settings()
