"""
Módulo de logging centralizado con métricas de runs
Soporta logging local y Google Cloud Logging (si está habilitado)
"""
import logging
import time
from datetime import datetime
from functools import wraps
from typing import Any, Dict, List, Optional

from fluorosense.settings import get_settings

# Intentar importar Google Cloud Logging (opcional)
try:
    import google.cloud.logging as cloud_logging
    GCP_LOGGING_AVAILABLE = True
except ImportError:
    GCP_LOGGING_AVAILABLE = False
    cloud_logging = None

logger = logging.getLogger("fluorosense")

_logging_configured = False
gcp_logging_enabled = False


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> logging.Logger:
    """Configura handlers una sola vez (idempotente)"""
    global _logging_configured, gcp_logging_enabled
    if _logging_configured:
        return logger

    settings = get_settings()
    level = level or settings.log_level
    log_file = log_file if log_file is not None else settings.log_file

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.setLevel(level.upper())

    if GCP_LOGGING_AVAILABLE and settings.project_id:
        try:
            client = cloud_logging.Client(project=settings.project_id)
            # Esto puede fallar si la API no está habilitada o no hay permisos
            client.setup_logging()
            gcp_logging_enabled = True
            logger.info("✅ Google Cloud Logging enabled - Logs will be sent to GCP")
        except Exception as e:
            error_msg = str(e).lower()
            if "403" in error_msg or "not enabled" in error_msg or "permission" in error_msg:
                logger.warning("⚠️  Google Cloud Logging not available, continuing with local logging only")

    _logging_configured = True
    return logger


class RunMetricsCollector:
    """Colector de métricas de runs de experimentos"""

    # Límite de memoria: máximo 1000 métricas en memoria
    MAX_METRICS = 1000

    def __init__(self):
        self.metrics: List[Dict[str, Any]] = []

    def log_run(self, run_data: Dict[str, Any]) -> Dict[str, Any]:
        """Log del run completo con métricas"""
        metric = {
            "timestamp": datetime.now().isoformat(),
            "run_id": run_data.get("run_id"),
            "kind": run_data.get("kind"),
            "steps": run_data.get("steps", []),
            "total_time_ms": run_data.get("total_time_ms"),
            "files_written": run_data.get("files_written"),
            "photons_simulated": run_data.get("photons_simulated"),
            "success": run_data.get("success", True),
            "error": run_data.get("error"),
        }

        # Limitar tamaño de métricas en memoria (FIFO)
        if len(self.metrics) >= self.MAX_METRICS:
            self.metrics = self.metrics[100:]
            logger.debug("🧹 Memory cleanup: removed 100 old metrics")

        self.metrics.append(metric)

        logger.info("=" * 80)
        logger.info(f"📊 RUN SUMMARY - ID: {metric['run_id']} ({metric['kind']})")
        if metric.get("total_time_ms") is not None:
            logger.info(f"⏱️  Total Time: {metric['total_time_ms'] / 1000:.2f}s")
        for step in metric.get("steps") or []:
            logger.info(f"  - {step['name']}: {step['duration_ms'] / 1000:.2f}s")
        if metric.get("files_written") is not None:
            logger.info(f"📁 Files: {metric['files_written']}")
        if metric.get("photons_simulated"):
            logger.info(f"💡 Photons: {metric['photons_simulated']}")
        if not metric["success"]:
            logger.error(f"❌ Error: {metric['error']}")
        else:
            logger.info("✅ Success")
        logger.info("=" * 80)
        return metric

    def get_recent_metrics(self, limit: int = 10) -> list:
        """Obtiene las últimas N métricas"""
        return self.metrics[-limit:]

    def clear_metrics(self, keep_recent: int = 0):
        """Limpia las métricas almacenadas

        Args:
            keep_recent: Número de métricas recientes a mantener (0 = limpiar todas)
        """
        if keep_recent > 0 and len(self.metrics) > keep_recent:
            self.metrics = self.metrics[-keep_recent:]
        else:
            self.metrics.clear()

    def get_stats(self) -> Dict[str, Any]:
        """Obtiene estadísticas generales"""
        if not self.metrics:
            return {}
        successful = [m for m in self.metrics if m["success"]]
        times = [m["total_time_ms"] for m in successful if m.get("total_time_ms")]
        return {
            "total_runs": len(self.metrics),
            "successful": len(successful),
            "failed": len(self.metrics) - len(successful),
            "success_rate": len(successful) / len(self.metrics) * 100,
            "avg_run_time_ms": sum(times) / len(times) if times else 0,
            "max_run_time_ms": max(times) if times else 0,
        }


# Instancia global del collector
metrics_collector = RunMetricsCollector()


def log_step(step_name: str):
    """Decorador para loguear pasos individuales con timing

    La función decorada retorna (resultado, duración en ms). Si se pasa
    `run_steps` como kwarg, el paso se agrega a esa lista.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, run_steps: Optional[list] = None, **kwargs):
            start_time = time.time()
            logger.info(f"▶️  Starting: {step_name}")
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                duration_ms = (time.time() - start_time) * 1000
                logger.error(f"❌ Failed: {step_name} ({duration_ms:.2f}ms) - {str(e)}")
                if run_steps is not None:
                    run_steps.append({"name": step_name, "duration_ms": duration_ms,
                                      "success": False, "error": str(e)})
                raise
            duration_ms = (time.time() - start_time) * 1000
            logger.info(f"✅ Completed: {step_name} ({duration_ms:.2f}ms)")
            if run_steps is not None:
                run_steps.append({"name": step_name, "duration_ms": duration_ms, "success": True})
            return result, duration_ms
        return wrapper
    return decorator


def log_info(message: str):
    """Log info con formato"""
    logger.info(f"ℹ️  {message}")


def log_warning(message: str):
    """Log warning con formato"""
    logger.warning(f"⚠️  {message}")


def log_error(message: str, error: Optional[Exception] = None):
    """Log error con formato"""
    if error:
        logger.error(f"❌ {message}: {str(error)}", exc_info=True)
    else:
        logger.error(f"❌ {message}")
