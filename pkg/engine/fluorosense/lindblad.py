"""
Evolución de la matriz densidad de dos niveles (marco rotante de microondas)
y respuesta en frecuencia de ⟨S_z⟩ a un campo b(t) sinusoidal
"""
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from fluorosense.errors import InvalidInputError, PositivityError, StepSizeError, SteadyStateError
from fluorosense.fitkit import fit
from fluorosense.logger import log_info
from fluorosense.models import FitResult, LindbladParams, SaturationMap, SignalSpec, ToneSpec
from fluorosense.settings import get_settings
from fluorosense.signals import build_waveform
from fluorosense.storage import atomic_path

# Operadores de Pauli; índice 0 = estado excitado (S_z = +1/2)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
S_X = SIGMA_X / 2
S_Z = SIGMA_Z / 2
IDENTITY = np.eye(2, dtype=complex)

STEP_RULE = 0.1
TRACE_TOLERANCE = 1e-9
HERMITICITY_TOLERANCE = 1e-12
EIGENVALUE_TOLERANCE = 1e-9
CHECKPOINT_EVERY = 1000
CHUNK_STEPS = 1 << 13

_MAX_STEADY_STATE_CACHE_SIZE = 256
_STEADY_STATE_CACHE: Dict[Tuple[str, float], np.ndarray] = {}

InitialState = Union[str, np.ndarray]


@dataclass(frozen=True)
class Evolution:
    """Serie ⟨S_z⟩(t) y estado final"""
    times: np.ndarray
    sz: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class ResponseCurve:
    """Amplitud pico a pico de ⟨S_z⟩ por frecuencia de señal, a saturación s"""
    s: float
    frequencies: np.ndarray
    amplitudes: np.ndarray
    offset: float

    def __post_init__(self):
        if np.any(self.amplitudes < 0):
            raise InvalidInputError("response amplitudes must be non-negative")

    def values(self) -> np.ndarray:
        """Respuesta tipo PSD: amplitud² + piso de ruido c"""
        return self.amplitudes**2 + self.offset


# ============================================================================
# Superoperadores
# ============================================================================

def _dissipator(op: np.ndarray) -> np.ndarray:
    """2LρL† − L†Lρ − ρL†L en vec por columnas"""
    n = op.conj().T @ op
    return 2 * np.kron(op.conj(), op) - np.kron(IDENTITY, n) - np.kron(n.T, IDENTITY)


def _commutator(h: np.ndarray) -> np.ndarray:
    """−i[H, ρ] en vec por columnas"""
    return -1j * (np.kron(IDENTITY, h) - np.kron(h.T, IDENTITY))


def hamiltonian(params: LindbladParams, b: float = 0.0) -> np.ndarray:
    return (params.detuning - params.gyromagnetic_ratio_e * b) * S_Z - params.rabi * S_X


def signal_hamiltonian(params: LindbladParams) -> np.ndarray:
    """Término de H por tesla de b; solo entra la parte que conmuta con S_z"""
    return -params.gyromagnetic_ratio_e * S_Z


def liouvillian(params: LindbladParams, b: float = 0.0) -> np.ndarray:
    """Generador 4×4 de dρ/dt con b constante"""
    generator = _commutator(hamiltonian(params, b))
    generator = generator + _dissipator(math.sqrt(params.gamma1 / 2) * SIGMA_MINUS)
    generator = generator + _dissipator(math.sqrt(params.gamma2 / 2) * SIGMA_Z)
    return generator


def _vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1, order="F")


def _unvec(v: np.ndarray) -> np.ndarray:
    return v.reshape(2, 2, order="F")


def expectation_sz(rho: np.ndarray) -> float:
    return float(np.real(np.trace(rho @ S_Z)))


def max_step(params: LindbladParams) -> float:
    """Paso máximo: 0.1/max(|Δ|, Ω, Γ₁, Γ₂, 2πf)"""
    fastest = max(abs(params.detuning), params.rabi, params.gamma1, params.gamma2,
                  2 * math.pi * params.signal.frequency)
    return STEP_RULE / fastest if fastest > 0 else math.inf


def initial_state(initial: InitialState) -> np.ndarray:
    if isinstance(initial, str):
        if initial == "excited":
            return np.array([[1, 0], [0, 0]], dtype=complex)
        if initial == "ground":
            return np.array([[0, 0], [0, 1]], dtype=complex)
        raise InvalidInputError(f"unknown initial state '{initial}' (use 'excited' or 'ground')")
    rho = np.asarray(initial, dtype=complex)
    if rho.shape != (2, 2):
        raise InvalidInputError("initial density matrix must be 2×2")
    return rho


def _check_state(rho: np.ndarray, t: float):
    trace = complex(np.trace(rho))
    hermiticity = float(np.max(np.abs(rho - rho.conj().T)))
    min_eigenvalue = float(np.min(np.linalg.eigvalsh((rho + rho.conj().T) / 2)))
    diagnostics = {"time": t, "trace": trace.real, "trace_imag": trace.imag,
                   "hermiticity": hermiticity, "min_eigenvalue": min_eigenvalue}
    if (abs(trace - 1) > TRACE_TOLERANCE or hermiticity > HERMITICITY_TOLERANCE
            or min_eigenvalue < -EIGENVALUE_TOLERANCE):
        raise PositivityError(f"density matrix left the physical set at t={t:.6g}s", diagnostics=diagnostics)


# ============================================================================
# Evolución
# ============================================================================

def _rk4_maps(base: np.ndarray, coupling: np.ndarray, b0, bh, b1, h: float) -> np.ndarray:
    """Mapas RK4 de un paso para dv/dt = (L₀ + b(t)·L_b)v, vectorizados sobre pasos"""
    a0 = base + b0[:, None, None] * coupling
    ah = base + bh[:, None, None] * coupling
    a1 = base + b1[:, None, None] * coupling
    ah_a0 = ah @ a0
    ah_ah = ah @ ah
    a1_ah = a1 @ ah
    total = (a0 + 4 * ah + a1
             + h * (ah_a0 + ah_ah + a1_ah)
             + h**2 / 2 * (ah_ah @ a0 + a1_ah @ ah)
             + h**3 / 4 * (a1_ah @ ah_a0))
    return np.eye(4) + h / 6 * total


def evolve(
    params: LindbladParams,
    initial: InitialState,
    t_span: Tuple[float, float],
    dt: float,
) -> Evolution:
    """
    Integra dρ/dt = −i[H,ρ] + Σ_j(2L_jρL_j† − L_j†L_jρ − ρL_j†L_j) con RK4 de paso fijo

    H = (Δ − γ_e b(t))S_z − γ_e B₁ S_x. El paso efectivo es (t1 − t0)/n ≤ dt.

    Raises:
        StepSizeError: dt no resuelve la tasa más rápida
        PositivityError: traza, hermiticidad o autovalores fuera de tolerancia
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise InvalidInputError("t_span must be increasing")
    bound = max_step(params)
    if dt <= 0 or dt > bound * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.6g}s exceeds the step bound {bound:.6g}s")

    rho = initial_state(initial)
    _check_state(rho, t0)
    n_steps = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    h = (t1 - t0) / n_steps
    waveform = build_waveform(SignalSpec(components=[params.signal], projection_angle=0.0))
    base = liouvillian(params, 0.0)
    coupling = _commutator(signal_hamiltonian(params))

    v = _vec(rho)
    sz = np.empty(n_steps + 1)
    sz[0] = expectation_sz(rho)
    for start in range(0, n_steps, CHUNK_STEPS):
        stop = min(start + CHUNK_STEPS, n_steps)
        t = t0 + np.arange(start, stop) * h
        maps = _rk4_maps(base, coupling, waveform(t), waveform(t + h / 2), waveform(t + h), h)
        for k in range(stop - start):
            v = maps[k] @ v
            step = start + k + 1
            sz[step] = 0.5 * (v[0] - v[3]).real
            if step % CHECKPOINT_EVERY == 0:
                _check_state(_unvec(v), t0 + step * h)
    rho = _unvec(v)
    _check_state(rho, t1)
    return Evolution(times=t0 + np.arange(n_steps + 1) * h, sz=sz, rho=rho)


def propagate_exact(params: LindbladParams, rho0: InitialState, t: float, b: float = 0.0) -> np.ndarray:
    """ρ(t) = exp(ℒt)ρ₀ con b constante"""
    v = linalg.expm(liouvillian(params, b) * t) @ _vec(initial_state(rho0))
    return _unvec(v)


def steady_state(params: LindbladParams, b: float = 0.0, use_cache: bool = True) -> np.ndarray:
    """Estado estacionario con b constante (núcleo del liouvilliano)"""
    key = (params.model_dump_json(exclude={"signal"}), float(b))
    if use_cache and key in _STEADY_STATE_CACHE:
        return _STEADY_STATE_CACHE[key].copy()

    kernel = linalg.null_space(liouvillian(params, b), rcond=1e-10)
    if kernel.shape[1] != 1:
        raise SteadyStateError(f"steady state is not unique ({kernel.shape[1]}-dimensional kernel)")
    rho = _unvec(kernel[:, 0])
    rho = rho / np.trace(rho)
    rho = (rho + rho.conj().T) / 2

    if len(_STEADY_STATE_CACHE) >= _MAX_STEADY_STATE_CACHE_SIZE:
        oldest_key = next(iter(_STEADY_STATE_CACHE))
        del _STEADY_STATE_CACHE[oldest_key]
    _STEADY_STATE_CACHE[key] = rho
    return rho.copy()


def clear_steady_state_cache():
    _STEADY_STATE_CACHE.clear()


def get_cache_stats() -> Dict[str, int]:
    return {"steady_states": len(_STEADY_STATE_CACHE), "max_steady_states": _MAX_STEADY_STATE_CACHE_SIZE}


def slowest_rate(params: LindbladParams) -> Optional[float]:
    """Menor tasa de decaimiento no nula del liouvilliano (None si no hay relajación)"""
    decay = -np.real(np.linalg.eigvals(liouvillian(params, 0.0)))
    scale = max(float(decay.max()), 1.0)
    nonzero = decay[decay > 1e-9 * scale]
    return float(nonzero.min()) if nonzero.size else None


# ============================================================================
# Respuesta
# ============================================================================

def response_amplitude(
    params: LindbladParams,
    dt: Optional[float] = None,
    tolerance: float = 1e-3,
    max_duration: Optional[float] = None,
) -> float:
    """
    Amplitud pico a pico de ⟨S_z⟩ en régimen cuasi-estacionario

    Parte del estado estacionario con b = 0, deja pasar una ventana transitoria
    de 5/(tasa más lenta) redondeada a periodos enteros, y mide período a
    período hasta que dos mediciones consecutivas coinciden en `tolerance`.

    Raises:
        SteadyStateError: no hay relajación, o no se estabiliza en `max_duration`
    """
    tone = params.signal
    if tone.frequency <= 0:
        raise InvalidInputError("signal frequency must be positive to define a response")
    if tone.amplitude == 0:
        return 0.0
    rate = slowest_rate(params)
    if rate is None:
        raise SteadyStateError("no relaxation: the response never reaches a steady state")

    period = 1.0 / tone.frequency
    steps = int(math.ceil(period / min(dt or math.inf, max_step(params))))
    h = period / steps
    transient = 5.0 / rate
    if max_duration is None:
        max_duration = 20 * transient + 20 * period
    n_transient = int(math.ceil(transient / period))

    rho = steady_state(params, 0.0)
    t = 0.0
    if n_transient:
        rho = evolve(params, rho, (t, t + n_transient * period), h).rho
        t += n_transient * period

    previous = None
    while t < max_duration:
        window = evolve(params, rho, (t, t + period), h)
        rho, t = window.rho, t + period
        pp = float(window.sz.max() - window.sz.min())
        if previous is not None and abs(pp - previous) <= tolerance * max(pp, previous):
            return pp
        previous = pp
    raise SteadyStateError(
        f"response did not settle within {max_duration:.6g}s; increase max_duration"
    )


def _curve_point(args) -> float:
    params, dt = args
    return response_amplitude(params, dt=dt)


def sweep_response(
    base: LindbladParams,
    saturation_map: SaturationMap,
    s_values: Sequence[float],
    frequencies: Sequence[float],
    amplitude: float,
    offset: float,
    dt_factor: float = STEP_RULE,
    max_workers: Optional[int] = None,
) -> List[ResponseCurve]:
    """Una ResponseCurve por saturación s; los puntos (s, f) son independientes"""
    freqs = np.asarray(frequencies, dtype=float)
    if freqs.size == 0 or np.any(freqs <= 0) or np.any(np.diff(freqs) <= 0):
        raise InvalidInputError("frequencies must be positive and strictly increasing")
    if not 0 < dt_factor <= STEP_RULE:
        raise StepSizeError(f"dt_factor must lie in (0, {STEP_RULE}]")

    jobs = []
    for s in s_values:
        params_s = saturation_map.apply(base, s)
        for f in freqs:
            point = params_s.model_copy(update={"signal": ToneSpec(frequency=float(f), amplitude=amplitude)})
            jobs.append((point, max_step(point) * dt_factor / STEP_RULE))

    workers = max_workers or get_settings().max_workers
    if workers <= 1:
        amplitudes = [_curve_point(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            amplitudes = list(pool.map(_curve_point, jobs))

    curves = []
    for i, s in enumerate(s_values):
        values = np.asarray(amplitudes[i * freqs.size:(i + 1) * freqs.size])
        curves.append(ResponseCurve(s=float(s), frequencies=freqs.copy(), amplitudes=values, offset=offset))
    log_info(f"Swept {len(jobs)} response points over {len(s_values)} saturation values")
    return curves


def fit_curve(curve: ResponseCurve) -> FitResult:
    """Ajuste del modelo de ancho de banda a amplitud² + c"""
    return fit("bandwidth", curve.frequencies, curve.values())


def write_response_csv(curves: Sequence[ResponseCurve], path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.concat([
        pd.DataFrame({
            "s": curve.s,
            "frequency_hz": curve.frequencies,
            "amplitude": curve.amplitudes,
            "offset": curve.offset,
        })
        for curve in curves
    ], ignore_index=True)
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.17g")
    return path


def read_response_csv(path: Union[str, Path]) -> List[ResponseCurve]:
    frame = pd.read_csv(path)
    return [
        ResponseCurve(
            s=float(s),
            frequencies=group["frequency_hz"].to_numpy(),
            amplitudes=group["amplitude"].to_numpy(),
            offset=float(group["offset"].iloc[0]),
        )
        for s, group in frame.groupby("s", sort=False)
    ]
