from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="SURFVEM_", extra="ignore")

    # Output Configuration
    output_dir: str = "results"
    plot_format: str = "svg"
    record_timings: bool = False  # runtime_ms stays empty so reruns are byte-identical

    # Logging Configuration
    log_level: str = "INFO"

    # Mesh Generation
    default_seed: int = 0
    lloyd_iterations: int = 100

    # Execution
    parallel_levels: bool = False

# Singleton instance of settings
_settings: Settings = None

def get_settings() -> Settings:
    """Get application settings singleton"""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings

def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment"""
    global _settings
    _settings = None
