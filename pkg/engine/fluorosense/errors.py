"""
Jerarquía de excepciones del simulador
Los errores de validación heredan de ValueError (el CLI los mapea a exit code 1),
el resto son errores de ejecución (exit code 2)
"""
from typing import Any, Optional


class FluorosenseError(Exception):
    """Error base del paquete"""


class InvalidInputError(FluorosenseError, ValueError):
    """Entrada que no cumple una precondición de la operación"""


class OutOfRangeError(InvalidInputError):
    """Tiempo fuera de la traza generada"""


class StepSizeError(InvalidInputError):
    """Paso de integración demasiado grande para las tasas del sistema"""


class GridMismatchError(InvalidInputError):
    """Espectros con grillas de frecuencia incompatibles"""


class ReferenceRejectedError(InvalidInputError):
    """Referencia bicromática por debajo del umbral de fase"""


class SingularJacobianError(InvalidInputError):
    """Jacobiano singular: nombra el parámetro degenerado"""

    def __init__(self, message: str, parameter: str):
        super().__init__(message)
        self.parameter = parameter


class FitRefusedError(InvalidInputError):
    """Ajuste rechazado (señal bajo el piso o SNR degenerado)"""

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class ThinningBoundError(FluorosenseError):
    """La tasa superó R_max durante el thinning"""


class PositivityError(FluorosenseError):
    """La matriz densidad perdió positividad, traza o hermiticidad"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SteadyStateError(FluorosenseError):
    """No se alcanzó el estado cuasi-estacionario"""


class VerificationError(FluorosenseError):
    """Archivos de un run faltantes o ilegibles"""
