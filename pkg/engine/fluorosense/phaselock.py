"""
Promediado coherente de trazas con inicio arbitrario mediante una referencia
bicromática ω₁, ω₂

Convención de fase: numpy rfft sobre cuentas por bin, referidas al inicio de la
traza (se descuenta el medio bin del centro de integración). Una traza cuya
señal es s(t − d) muestra en f la fase de s menos 2π·f·d.
"""
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fluorosense import nvmodel, spectral
from fluorosense.errors import GridMismatchError, InvalidInputError, ReferenceRejectedError
from fluorosense.logger import log_info, log_warning
from fluorosense.models import DrivePoint, OdmrParams, ReferenceSpec, wrap_phase
from fluorosense.series import Spectrum

PathLike = Union[str, Path]

# mediana/media de |X|² para ruido gaussiano complejo (distribución exponencial)
EXPONENTIAL_MEDIAN = math.log(2)


@dataclass(frozen=True, eq=False)
class PhasedSpectrum:
    """Espectro con fase corregida por bin y marcas del peine ω₁ + n·δω"""
    spectrum: Spectrum
    reference: ReferenceSpec
    phases: np.ndarray
    comb_flags: np.ndarray
    comb_index: np.ndarray

    def comb_bins(self) -> np.ndarray:
        return np.flatnonzero(self.comb_flags)


def _wrap(phase):
    return np.mod(np.asarray(phase) + np.pi, 2 * np.pi) - np.pi


def _bin_centre_phase(spectrum: Spectrum) -> np.ndarray:
    return np.pi * spectrum.frequencies * spectrum.bin_width


def trace_phases(spectrum: Spectrum) -> np.ndarray:
    """Fase de cada bin referida al inicio de la traza"""
    return _wrap(np.angle(spectrum.amplitudes) - _bin_centre_phase(spectrum))


def comb(spectrum: Spectrum, ref: ReferenceSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(flags, n) del peine ω₁ + n·δω dentro de la grilla, sin DC"""
    k1 = spectrum.bin_index(ref.omega1)
    step = spectrum.bin_index(ref.omega2) - k1
    indices = np.arange(spectrum.frequencies.size)
    offset = indices - k1
    flags = (offset % step == 0) & (indices > 0)
    n = np.where(flags, offset // step, 0)
    return flags, n


def phase_error(spectrum: Spectrum, frequency: float) -> float:
    """Error estándar de fase de un disparo: √(N₀/(2|X|²))"""
    index = spectrum.bin_index(frequency)
    power = spectrum.psd[index]
    if power <= 0:
        return math.inf
    median, _ = spectral.noise_floor(spectrum, (spectrum.resolution, spectrum.nyquist), exclude=[frequency])
    return math.sqrt(median / EXPONENTIAL_MEDIAN / (2 * power))


def extract_reference_phases(
    spectrum: Spectrum,
    ref: ReferenceSpec,
    gain: Optional[float] = None,
) -> Tuple[float, float]:
    """
    Fases φ₁, φ₂ de la referencia en un único espectro

    Args:
        spectrum: espectro de una traza
        ref: referencia; `max_phase_error` fija el umbral de aceptación
        gain: cuentas/s por tesla, necesario para aplicar `min_amplitude`

    Raises:
        ReferenceRejectedError: pico de referencia bajo el umbral
    """
    phases = []
    for name, frequency in (("omega1", ref.omega1), ("omega2", ref.omega2)):
        index = spectrum.bin_index(frequency)
        error = phase_error(spectrum, frequency)
        if error >= ref.max_phase_error:
            raise ReferenceRejectedError(
                f"reference {name} at {frequency} Hz has phase error {error:.3g} rad "
                f"(limit {ref.max_phase_error} rad)"
            )
        if gain is not None and ref.min_amplitude > 0:
            measured = 2 * abs(spectrum.amplitudes[index]) / (abs(gain) * spectrum.duration)
            if measured < ref.min_amplitude:
                raise ReferenceRejectedError(
                    f"reference {name} amplitude {measured:.3g} T is below {ref.min_amplitude:.3g} T"
                )
        phases.append(float(trace_phases(spectrum)[index]))
    return phases[0], phases[1]


def correction_phase(phi1: float, phi2: float, n) -> np.ndarray:
    """φ₁ + n·(φ₂ − φ₁), módulo 2π"""
    return _wrap(phi1 + np.asarray(n) * _wrap(phi2 - phi1))


def phase_correct(spectrum: Spectrum, phi1: float, phi2: float, ref: ReferenceSpec) -> PhasedSpectrum:
    """Rota cada bin del peine por exp(−i(φ₁ + n(φ₂ − φ₁))); los demás quedan intactos"""
    flags, n = comb(spectrum, ref)
    rotation = np.where(flags, np.exp(-1j * correction_phase(phi1, phi2, n)), 1.0)
    corrected = replace(spectrum, amplitudes=spectrum.amplitudes * rotation)
    return PhasedSpectrum(
        spectrum=corrected,
        reference=ref,
        phases=trace_phases(corrected),
        comb_flags=flags,
        comb_index=n,
    )


def lock(spectrum: Spectrum, ref: ReferenceSpec, gain: Optional[float] = None) -> PhasedSpectrum:
    phi1, phi2 = extract_reference_phases(spectrum, ref, gain=gain)
    return phase_correct(spectrum, phi1, phi2, ref)


def coherent_average(corrected: Sequence[PhasedSpectrum]) -> PhasedSpectrum:
    """
    Media compleja en el peine; fuera del peine, media de potencia

    Fuera del peine la amplitud es √(psd media) y la fase queda indefinida (NaN).
    """
    if not corrected:
        raise InvalidInputError("coherent_average needs at least one spectrum")
    first = corrected[0]
    for item in corrected[1:]:
        first.spectrum.require_same_grid(item.spectrum)
        if item.reference != first.reference:
            raise GridMismatchError("spectra were corrected against different references")

    weights = np.array([item.spectrum.n_averages for item in corrected], dtype=float)
    amplitudes = np.stack([item.spectrum.amplitudes for item in corrected])
    powers = np.stack([item.spectrum.psd for item in corrected])
    mean_amplitude = np.average(amplitudes, axis=0, weights=weights)
    mean_power = np.average(powers, axis=0, weights=weights)

    flags = first.comb_flags
    averaged = replace(
        first.spectrum,
        amplitudes=np.where(flags, mean_amplitude, np.sqrt(mean_power)),
        psd=np.where(flags, np.abs(mean_amplitude) ** 2, mean_power),
        n_averages=int(weights.sum()),
        psd_m2=None,
        psd_stderr=None,
        metadata={**first.spectrum.metadata, "coherent": True},
    )
    phases = np.where(flags, trace_phases(averaged), np.nan)
    log_info(f"Coherently averaged {len(corrected)} traces over {int(flags.sum())} comb bins")
    return PhasedSpectrum(
        spectrum=averaged,
        reference=first.reference,
        phases=phases,
        comb_flags=flags,
        comb_index=first.comb_index,
    )


def minimum_reference_amplitude(
    params: OdmrParams,
    drive: DrivePoint,
    duration: float,
    max_phase_error: float = 0.1,
) -> float:
    """
    Amplitud mínima (T) de un tono de referencia para que su fase de un disparo
    tenga error estándar `max_phase_error` en una traza de `duration` segundos

    Con ruido de disparo: |X| = |g|·B·T/2 y N₀ = R·T, así B = √(2R/T)/(|g|·σ_φ).
    """
    if duration <= 0 or max_phase_error <= 0:
        raise InvalidInputError("duration and max_phase_error must be positive")
    rate = float(nvmodel.transduce(params, drive, 0.0))
    gain = abs(nvmodel.transduction_gain(params, drive))
    if gain == 0:
        log_warning("drive point has zero transduction gain; no reference amplitude suffices")
        return math.inf
    return math.sqrt(2 * rate / duration) / (gain * max_phase_error)


def comb_table(phased: PhasedSpectrum, n_range: Tuple[int, int]) -> pd.DataFrame:
    """Filas (n, frecuencia, amplitud, fase) del peine para n en [n_min, n_max]"""
    rows: List[Dict[str, float]] = []
    spectrum = phased.spectrum
    scale = 2.0 / spectrum.n_samples
    for index in phased.comb_bins():
        n = int(phased.comb_index[index])
        if n_range[0] <= n <= n_range[1]:
            rows.append({
                "n": n,
                "frequency_hz": float(spectrum.frequencies[index]),
                "amplitude": float(np.abs(spectrum.amplitudes[index]) * scale),
                "phase_rad": wrap_phase(float(phased.phases[index])),
            })
    return pd.DataFrame(rows, columns=["n", "frequency_hz", "amplitude", "phase_rad"])


def write_phased_csv(phased: PhasedSpectrum, path: PathLike) -> Path:
    index = pd.array(np.where(phased.comb_flags, phased.comb_index, 0), dtype="Int64")
    index[~phased.comb_flags] = pd.NA
    spectrum = phased.spectrum.with_metadata(omega1=phased.reference.omega1, omega2=phased.reference.omega2)
    return spectral.write_spectrum_csv(spectrum, path, extra_columns={
        "phase_rad": phased.phases,
        "comb_flag": phased.comb_flags.astype(int),
        "comb_index": index,
    })
