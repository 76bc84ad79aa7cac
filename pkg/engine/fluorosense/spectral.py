"""
Cadena de análisis: binning de timestamps, PSD, promedio de segmentos,
sustracción on/off y escalamiento del SNR con el tiempo de promediado
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import signal as sps
from scipy import stats

from fluorosense import fitkit
from fluorosense.errors import FitRefusedError, GridMismatchError, InvalidInputError
from fluorosense.logger import log_info, log_warning
from fluorosense.models import FitResult
from fluorosense.photonsim import iter_tag_chunks, read_tagstream_header
from fluorosense.series import PS_PER_S, Spectrum, TagStream, TimeSeries
from fluorosense.settings import get_settings
from fluorosense.storage import atomic_path

PathLike = Union[str, Path]
Window = str

CONVENTION = "rfft-unnormalized;psd=|X|^2 per positive bin;fold x2 interior bins;mean-subtracted"
COHERENT_GAIN = {"none": 1.0, "hann": 0.5}
_CHUNK = 1 << 20


# ============================================================================
# Binning
# ============================================================================

def _bin_geometry(duration: float, bin_width: float) -> Tuple[int, int, int]:
    width_ps = int(round(bin_width * PS_PER_S))
    if width_ps < 2:
        raise InvalidInputError("bin_width must be at least twice the 1 ps tag resolution")
    n_bins = max(int(math.floor(duration / bin_width + 1e-9)), 1)
    return width_ps, n_bins, int(round(duration * PS_PER_S))


def _accumulate(chunks: Iterable[np.ndarray], width_ps: int, n_bins: int, end_ps: int) -> np.ndarray:
    """
    Bins [k·w, (k+1)·w) para k < n_bins

    Un tag exactamente en `duration` cae en el último bin sólo si `duration`
    es un borde de bin; los tags del intervalo final incompleto se descartan.
    """
    edge_ps = n_bins * width_ps
    counts = np.zeros(n_bins, dtype=np.int64)
    dropped = 0
    for chunk in chunks:
        index = chunk // width_ps
        if edge_ps == end_ps:
            index[chunk == end_ps] = n_bins - 1
        inside = index < n_bins
        dropped += int(index.size - np.count_nonzero(inside))
        counts += np.bincount(index[inside], minlength=n_bins)
    if dropped:
        log_warning(f"Dropped {dropped} tags in the partial trailing interval [{edge_ps}, {end_ps}] ps")
    return counts


def bin(stream: TagStream, bin_width: float) -> TimeSeries:
    """Cuenta tags por bin; recorre el stream por bloques"""
    width_ps, n_bins, end_ps = _bin_geometry(stream.duration, bin_width)
    ts = stream.timestamps
    chunks = (ts[i:i + _CHUNK] for i in range(0, ts.size, _CHUNK))
    return TimeSeries(bin_width=bin_width, counts=_accumulate(chunks, width_ps, n_bins, end_ps))


def bin_file(path: PathLike, bin_width: float) -> TimeSeries:
    """Binning directo desde el archivo binario, sin cargar todos los timestamps"""
    header = read_tagstream_header(path)
    width_ps, n_bins, end_ps = _bin_geometry(header["duration_s"], bin_width)
    return TimeSeries(bin_width=bin_width, counts=_accumulate(iter_tag_chunks(path), width_ps, n_bins, end_ps))


def binning_response(frequencies: np.ndarray, bin_width: float) -> np.ndarray:
    """Atenuación en potencia de una modulación de la tasa por integrar en bins: sinc²(f·w)"""
    return np.sinc(np.asarray(frequencies) * bin_width) ** 2


# ============================================================================
# PSD
# ============================================================================

def psd(series: TimeSeries, window: Window = "none") -> Spectrum:
    """
    DFT de las cuentas sin media; psd = |amplitud|²

    Con ventana Hann las amplitudes se dividen por la ganancia coherente 0.5
    para conservar la altura de los picos.
    """
    n = series.n_bins
    if n < 2:
        raise InvalidInputError("series must hold at least 2 bins")
    if window not in COHERENT_GAIN:
        raise InvalidInputError(f"unknown window '{window}' (expected one of {sorted(COHERENT_GAIN)})")
    x = np.asarray(series.counts, dtype=float)
    x = x - x.mean()
    if window == "hann":
        x = x * sps.get_window("hann", n)
    amplitudes = np.fft.rfft(x) / COHERENT_GAIN[window]
    power = np.abs(amplitudes) ** 2
    return Spectrum(
        frequencies=np.fft.rfftfreq(n, series.bin_width),
        amplitudes=amplitudes,
        psd=power,
        bin_width=series.bin_width,
        duration=series.duration,
        window=window,
        psd_m2=power**2,
    )


def segment_spectra(
    stream: TagStream,
    bin_width: float,
    segment_duration: float = 1.0,
    window: Window = "none",
    max_workers: Optional[int] = None,
) -> List[Spectrum]:
    """Un espectro por segmento contiguo de `segment_duration` segundos"""
    n_segments = int(math.floor(stream.duration / segment_duration + 1e-9))
    if n_segments < 1:
        raise InvalidInputError("stream is shorter than one segment")

    def one(k: int) -> Spectrum:
        part = stream.window(k * segment_duration, (k + 1) * segment_duration)
        return psd(bin(part, bin_width), window)

    workers = max_workers or get_settings().max_workers
    if workers <= 1:
        return [one(k) for k in range(n_segments)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_segments)))


# ============================================================================
# Promedios
# ============================================================================

def average_psd(spectra: Sequence[Spectrum]) -> Spectrum:
    """
    Promedio incoherente ponderado por n_averages

    Es una reducción asociativa: promediar promedios da el mismo resultado.
    `psd_stderr` es el error estándar de la media de cada bin. Las fases de
    segmentos independientes no se alinean, así que las amplitudes complejas
    de un promedio de más de un espectro quedan indefinidas (NaN).
    """
    if not spectra:
        raise InvalidInputError("average_psd needs at least one spectrum")
    first = spectra[0]
    for other in spectra[1:]:
        first.require_same_grid(other)

    weights = np.array([s.n_averages for s in spectra], dtype=float)
    total = weights.sum()
    mean = sum(w * s.psd for w, s in zip(weights, spectra)) / total
    m2 = sum(w * (s.psd_m2 if s.psd_m2 is not None else s.psd**2) for w, s in zip(weights, spectra)) / total
    n = int(total)
    amplitudes = first.amplitudes if n == 1 else np.full(first.amplitudes.shape, np.nan + 0j)
    stderr = np.sqrt(np.maximum(m2 - mean**2, 0.0) / (n - 1)) if n > 1 else None
    return replace(
        first,
        amplitudes=amplitudes,
        psd=mean,
        psd_m2=m2,
        psd_stderr=stderr,
        n_averages=n,
        metadata={k: v for k, v in first.metadata.items() if k != "clamped_bins"},
    )


def coherent_mean(spectra: Sequence[Spectrum]) -> Spectrum:
    """
    Media compleja de espectros de segmentos contiguos, ponderada por n_averages

    Un tono sobre la grilla (f·T_seg entero) tiene la misma fase en cada
    segmento y conserva su amplitud; el ruido de disparo baja como 1/M en
    potencia. Equivale a la DFT de la adquisición completa evaluada en la
    grilla de un segmento. psd = |media|²; también es asociativa.
    """
    if not spectra:
        raise InvalidInputError("coherent_mean needs at least one spectrum")
    first = spectra[0]
    for other in spectra[1:]:
        first.require_same_grid(other)

    weights = np.array([s.n_averages for s in spectra], dtype=float)
    if any(np.isnan(s.amplitudes).any() for s in spectra):
        raise InvalidInputError("coherent_mean needs complex amplitudes (got an incoherent average)")
    amplitudes = sum(w * s.amplitudes for w, s in zip(weights, spectra)) / weights.sum()
    return replace(
        first,
        amplitudes=amplitudes,
        psd=np.abs(amplitudes) ** 2,
        psd_m2=None,
        psd_stderr=None,
        n_averages=int(weights.sum()),
        metadata={**{k: v for k, v in first.metadata.items() if k != "clamped_bins"}, "averaging": "coherent"},
    )


def block_averages(
    spectra: Sequence[Spectrum],
    block_sizes: Sequence[int],
    coherent: bool = False,
) -> Dict[int, List[Spectrum]]:
    """Promedios sobre bloques disjuntos de cada tamaño (incoherentes o complejos)"""
    reduce = coherent_mean if coherent else average_psd
    result = {}
    for size in block_sizes:
        if size < 1 or size > len(spectra):
            raise InvalidInputError(f"block size {size} outside [1, {len(spectra)}]")
        n_blocks = len(spectra) // size
        result[size] = [reduce(spectra[i * size:(i + 1) * size]) for i in range(n_blocks)]
    return result


def onoff_subtract(on: Spectrum, off: Spectrum) -> Spectrum:
    """psd_on − psd_off con piso en 0; los bins recortados quedan en la metadata"""
    on.require_same_grid(off)
    if on.n_averages != off.n_averages:
        raise GridMismatchError(f"n_averages differ: {on.n_averages} vs {off.n_averages}")
    difference = on.psd - off.psd
    clamped = np.flatnonzero(difference < 0)
    stderr = None
    if on.psd_stderr is not None and off.psd_stderr is not None:
        stderr = np.hypot(on.psd_stderr, off.psd_stderr)
    result = replace(
        on,
        amplitudes=on.amplitudes - off.amplitudes,
        psd=np.maximum(difference, 0.0),
        psd_m2=None,
        psd_stderr=stderr,
    )
    return result.with_metadata(subtracted="on-off", clamped_bins=int(clamped.size), clamped_indices=clamped)


# ============================================================================
# Piso de ruido y SNR
# ============================================================================

def noise_floor(
    spectrum: Spectrum,
    band: Tuple[float, float],
    exclude: Sequence[float] = (),
    exclusion_bins: int = 3,
) -> Tuple[float, float]:
    """
    (mediana, σ) de la psd en `band`, excluyendo ±exclusion_bins alrededor de cada pico conocido

    σ es la desviación estándar tras sigma-clipping a 4σ.
    """
    f = spectrum.frequencies
    mask = (f >= band[0]) & (f <= band[1]) & (f > 0)
    resolution = spectrum.resolution
    for peak in exclude:
        mask &= np.abs(f - peak) > (exclusion_bins + 0.5) * resolution
    values = spectrum.psd[mask]
    if values.size < 2:
        raise InvalidInputError(f"noise band {band} holds fewer than 2 usable bins")
    clipped = stats.sigmaclip(values, 4.0, 4.0).clipped
    return float(np.median(values)), float(np.std(clipped, ddof=1)) if clipped.size > 1 else 0.0


@dataclass(frozen=True, eq=False)
class SnrScaling:
    """
    SNR(t) = A·t^b sobre tiempos de promediado crecientes

    `domain` = "power": SNR de la psd promediada incoherentemente.
    `domain` = "amplitude": SNR de amplitud del promedio complejo.
    """
    times: np.ndarray
    peak_power: np.ndarray
    floor: np.ndarray
    floor_sigma: np.ndarray
    snr: np.ndarray
    fit: Optional[FitResult]
    domain: str = "power"

    @property
    def A(self) -> float:
        return self.fit.params["A"]

    @property
    def b(self) -> float:
        return self.fit.params["b"]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "time_s": self.times,
            "peak_power": self.peak_power,
            "floor_median": self.floor,
            "floor_sigma": self.floor_sigma,
            "snr": self.snr,
        })


def _snr_point(spectrum: Spectrum, signal_bin: float, band, exclusion_bins: int, domain: str):
    peak = float(spectrum.psd[spectrum.bin_index(signal_bin)])
    median, sigma = noise_floor(spectrum, band, exclude=[signal_bin], exclusion_bins=exclusion_bins)
    if domain == "amplitude":
        # |X|² del ruido es exponencial: media = mediana / ln 2. Se devuelve
        # el exceso en potencia; la raíz se toma tras promediar réplicas
        floor_mean = median / math.log(2)
        excess = (peak - floor_mean) / floor_mean if floor_mean > 0 else math.inf
        return peak, median, sigma, excess
    snr = (peak - median) / sigma if sigma > 0 else math.inf
    return peak, median, sigma, snr


def snr_scaling(
    runs: Sequence[Union[Spectrum, Sequence[Spectrum]]],
    signal_bin: float,
    band: Tuple[float, float],
    exclusion_bins: int = 3,
    domain: str = "power",
) -> SnrScaling:
    """
    SNR por tiempo total de promediado y ajuste SNR = A·t^b en log-log

    Cada elemento de `runs` es un espectro promediado o un grupo de réplicas
    (bloques disjuntos del mismo tamaño) que se promedian.

    - "power": SNR = (psd del pico − mediana del piso) / σ del piso, sobre
      promedios incoherentes; crece como √t.
    - "amplitude": SNR = √((psd del pico − media del piso) / media del piso),
      sobre medias complejas; la corrección por la media del piso quita el
      sesgo de Rice y también crece como √t.
    """
    if domain not in ("power", "amplitude"):
        raise InvalidInputError(f"unknown SNR domain '{domain}' (expected 'power' or 'amplitude')")
    rows = []
    for item in runs:
        group = [item] if isinstance(item, Spectrum) else list(item)
        points = np.array([_snr_point(s, signal_bin, band, exclusion_bins, domain) for s in group])
        t = group[0].n_averages * group[0].duration
        rows.append((t, *points.mean(axis=0)))
    table = np.array(rows, dtype=float)
    times, peak, floor, sigma, snr = table.T
    if domain == "amplitude":
        snr = np.sqrt(np.maximum(snr, 0.0))

    if times.size < 4 or times[-1] < 10 * times[0]:
        raise InvalidInputError("snr_scaling needs at least 4 time points spanning one decade")
    if np.any(np.diff(times) <= 0):
        raise InvalidInputError("averaging times must be strictly increasing")

    partial = SnrScaling(times, peak, floor, sigma, snr, fit=None, domain=domain)
    if np.any(sigma == 0) or np.any(floor == 0):
        raise FitRefusedError("noise floor is zero (noiseless input); SNR is unbounded", partial=partial)
    if np.all(snr <= 0):
        raise FitRefusedError("signal bin below the noise floor at every averaging time", partial=partial)
    usable = snr > 0
    if usable.sum() < 2:
        raise FitRefusedError("fewer than 2 averaging times with the signal above the floor", partial=partial)
    if not usable.all():
        log_warning(f"Dropping {int((~usable).sum())} averaging times with SNR ≤ 0 from the power-law fit")

    fit = fitkit.fit("powerlaw", times[usable], snr[usable])
    log_info(f"SNR scaling ({domain}): A = {fit.params['A']:.4g}, b = {fit.params['b']:.4f}")
    return replace(partial, fit=fit)


def empirical_sensitivity(scaling: SnrScaling, amplitude: float, segment_duration: float) -> float:
    """
    η (T/√Hz) inferida del prefactor A para un tono de amplitud de campo `amplitude`

    Para ruido de disparo:
    - "power": A = B²·√T_seg / (4η²), de donde η = B·T_seg^¼ / (2√A).
    - "amplitude": A = B / (2η), de donde η = B / (2A); no depende de T_seg.
    """
    if scaling.fit is None:
        raise FitRefusedError("scaling has no power-law fit")
    if scaling.domain == "amplitude":
        return amplitude / (2 * scaling.A)
    return amplitude * segment_duration**0.25 / (2 * math.sqrt(scaling.A))


# ============================================================================
# Archivos de espectro
# ============================================================================

def write_spectrum_csv(
    spectrum: Spectrum,
    path: PathLike,
    extra_columns: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """
    CSV con header de metadata (# clave=valor) y filas (frequency_hz, re, im, psd[, psd_stderr])

    En promedios incoherentes re/im quedan vacíos (NaN): sólo psd está definida.
    """
    header = {
        "bin_width": repr(float(spectrum.bin_width)),
        "duration": repr(float(spectrum.duration)),
        "n_averages": str(spectrum.n_averages),
        "window": spectrum.window,
        "convention": CONVENTION,
    }
    for key, value in spectrum.metadata.items():
        if isinstance(value, (str, int, float, bool)):
            header[key] = str(value)
    columns = {
        "frequency_hz": spectrum.frequencies,
        "re": spectrum.amplitudes.real,
        "im": spectrum.amplitudes.imag,
        "psd": spectrum.psd,
    }
    if spectrum.psd_stderr is not None:
        columns["psd_stderr"] = spectrum.psd_stderr
    columns.update(extra_columns or {})
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as handle:
            for key, value in header.items():
                handle.write(f"# {key}={value}\n")
            pd.DataFrame(columns).to_csv(handle, index=False, float_format="%.17g")
    return Path(path)


def read_spectrum_header(path: PathLike) -> Dict[str, str]:
    header = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
    return header


def read_spectrum_csv(path: PathLike) -> Spectrum:
    header = read_spectrum_header(path)
    frame = pd.read_csv(path, comment="#")
    stderr = frame["psd_stderr"].to_numpy() if "psd_stderr" in frame else None
    known = {"bin_width", "duration", "n_averages", "window", "convention"}
    return Spectrum(
        frequencies=frame["frequency_hz"].to_numpy(),
        amplitudes=frame["re"].to_numpy() + 1j * frame["im"].to_numpy(),
        psd=frame["psd"].to_numpy(),
        bin_width=float(header["bin_width"]),
        duration=float(header["duration"]),
        n_averages=int(header["n_averages"]),
        window=header.get("window", "none"),
        psd_stderr=stderr,
        metadata={k: v for k, v in header.items() if k not in known},
    )
