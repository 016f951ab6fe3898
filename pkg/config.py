"""
Application Configuration

Uses Pydantic Settings for type-safe configuration management.
Run-specific settings (grid, model, experiments) live in the YAML run
configuration parsed into models.RunConfig; this module holds process-wide
defaults that can be overridden from the environment.
"""

from functools import lru_cache
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Metadata
    app_name: str = "electrolyser-inverse"
    app_version: str = "1.0.0"
    app_description: str = "Forward solver and inverse reconstructions for electrolyser transport models"

    # Linear solver
    linear_tol: float = 1e-10
    linear_max_iter_factor: int = 20
    dense_oracle_max_nodes: int = 2000

    # Picard iteration
    picard_max_outer_iterations: int = 200
    picard_fixed_point_tol: float = 1e-8
    picard_damping: float = 1.0
    picard_pde_tol: float = 1e-6

    # Temperature inversion
    inversion_tol: float = 1e-12
    inversion_max_doublings: int = 200
    inversion_max_iterations: int = 200

    # Reconstruction
    gradient_delta: float = 1e-3
    fit_max_iterations: int = 25

    # Laboratory
    laboratory_cache_size: int = 256

    # Performance Settings
    max_workers: int = 4

    # Storage
    output_dir: str = "runs"
    lock_timeout_seconds: int = 10

    # Logging
    log_level: str = "INFO"

    class Config:
        env_file = ".env.local"
        case_sensitive = False
        env_prefix = "ELECTROLYSER_"


@lru_cache()
def get_settings() -> Settings:
    """
    Process-wide solver and storage defaults.

    Read once from ELECTROLYSER_* variables and .env.local; tests call
    get_settings.cache_clear() after changing the environment.
    """
    return Settings()
