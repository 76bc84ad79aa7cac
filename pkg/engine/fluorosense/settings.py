"""
Configuración por variables de entorno (.env soportado)
"""
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Variables de entorno del simulador"""
    model_config = SettingsConfigDict(env_prefix="FLUORO_", env_file=".env", extra="ignore")

    output_root: Path = Field(Path("runs"), description="Directorio raíz de los runs")
    log_level: str = Field("INFO", description="Nivel de logging")
    log_file: Optional[str] = Field("fluorosense.log", description="Archivo de log (vacío = sin archivo)")
    max_workers: int = Field(1, ge=1, description="Workers para segmentos independientes")
    project_id: Optional[str] = Field(
        None,
        validation_alias=AliasChoices("PROJECT_ID", "FLUORO_PROJECT_ID"),
        description="Proyecto GCP para Cloud Logging (opcional)",
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
