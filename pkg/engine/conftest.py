"""
Configuración común de pytest: agrega engine/ al path y registra marcadores
"""
import os
import sys

import pytest

# Agregar el directorio engine al path
sys.path.insert(0, os.path.dirname(__file__))

from fluorosense.models import OdmrParams  # noqa: E402
from fluorosense.nvmodel import REFERENCE_DEVICES  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: statistical tests that simulate long photon streams")


@pytest.fixture
def nv15() -> OdmrParams:
    return REFERENCE_DEVICES["NV15"]


@pytest.fixture
def nv32() -> OdmrParams:
    return REFERENCE_DEVICES["NV32"]


@pytest.fixture
def ensemble() -> OdmrParams:
    return REFERENCE_DEVICES["Ensemble"]


@pytest.fixture(autouse=True)
def _isolated_output(tmp_path, monkeypatch):
    """Cada test escribe bajo su propio directorio temporal"""
    monkeypatch.setenv("FLUORO_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("FLUORO_LOG_FILE", "")
    from fluorosense.settings import get_settings
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
