from typing import Optional

from pydantic_settings import BaseSettings

VERSION = "1.0.0"


# First, create the Pydantic settings model
class _Settings(BaseSettings):
    # Logging settings
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = '%(asctime)s - %(levelname)s - %(message)s'
    LOG_FILE: Optional[str] = None

    # Run settings
    OUTPUT_DIR: str = "runs"
    WORKERS: int = 1
    DEFAULT_SEED: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = True

# Then, create a singleton instance
_settings = _Settings()

# Create a class that provides class-level access to the instance values
class Settings:
    # Logging settings
    LOG_LEVEL = _settings.LOG_LEVEL
    LOG_FORMAT = _settings.LOG_FORMAT
    LOG_FILE = _settings.LOG_FILE

    # Run settings
    OUTPUT_DIR = _settings.OUTPUT_DIR
    WORKERS = _settings.WORKERS
    DEFAULT_SEED = _settings.DEFAULT_SEED

# For backwards compatibility, keep the settings instance too
settings = _settings
