"""
Simulación de streams de timestamps de fotones: proceso de Poisson inhomogéneo
por thinning, con filtro de respuesta de la tasa y tiempo muerto del detector
"""
import math
import struct
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import signal as sps

from fluorosense.errors import InvalidInputError, OutOfRangeError, ThinningBoundError
from fluorosense.logger import log_info, log_warning
from fluorosense.models import CalibrationPoint, DetectorModel
from fluorosense.series import PS_PER_S, TagStream, TimeSeries
from fluorosense.storage import atomic_path

RateFn = Callable[[np.ndarray], np.ndarray]
PathLike = Union[str, Path]

# Formato binario: header little-endian + count × u64 (ps)
TAG_MAGIC = b"FLTAGS\x00\x00"
TAG_VERSION = 1
TAG_HEADER = struct.Struct("<8sHQQq")

# Límite de memoria: puntos de grilla de la tasa por chunk
MAX_GRID_POINTS = 1 << 20


class _RateFilter:
    """
    Tasa filtrada por una cascada de ⌈b⌉ polos reales sobre una grilla uniforme

    Cada polo tiene f_p = f_c/√(2^{1/k} − 1), así la cascada cae −3 dB en f_c.
    El estado se arrastra entre chunks, inicializado en régimen estacionario.
    """

    def __init__(self, rate_fn: RateFn, detector: DetectorModel, step: float, duration: float):
        self.rate_fn = rate_fn
        self.step = step
        self.duration = duration
        n = detector.n_poles
        pole = detector.bandwidth / math.sqrt(2 ** (1 / n) - 1)
        self.a = math.exp(-2 * math.pi * pole * step)
        self.n_poles = n
        self._zi: Optional[List[np.ndarray]] = None
        self._next_k = 0
        self._tail_t = np.empty(0)
        self._tail_y = np.empty(0)

    def until(self, stop: float):
        """Grilla (t, tasa filtrada) que cubre desde el último punto entregado hasta `stop`"""
        k_end = max(int(math.floor(stop / self.step)) + 2, self._next_k + 1)
        grid = np.arange(self._next_k, k_end) * self.step
        x = np.asarray(self.rate_fn(np.minimum(grid, self.duration)), dtype=float)
        if self._zi is None:
            self._zi = [np.array([self.a * x[0]]) for _ in range(self.n_poles)]
        y = x
        b, a = [1 - self.a], [1.0, -self.a]
        for i in range(self.n_poles):
            y, self._zi[i] = sps.lfilter(b, a, y, zi=self._zi[i])
        t_out = np.concatenate((self._tail_t, grid))
        y_out = np.concatenate((self._tail_y, y))
        self._tail_t, self._tail_y = t_out[-2:], y_out[-2:]
        self._next_k = k_end
        return t_out, y_out

    def at(self, times: np.ndarray, stop: float) -> np.ndarray:
        t_grid, y_grid = self.until(stop)
        return np.interp(times, t_grid, y_grid)


def _default_step(detector: DetectorModel) -> float:
    return 1.0 / (50 * detector.bandwidth)


def _estimate_r_max(rate_fn: RateFn, duration: float) -> float:
    grid = np.linspace(0.0, duration, MAX_GRID_POINTS)
    peak = float(np.max(rate_fn(grid)))
    r_max = 1.05 * peak
    log_warning(f"r_max not given; using 1.05 × sampled peak = {r_max:.6g} /s")
    return r_max


def _apply_dead_time(times: np.ndarray, dead_time: float, last_kept: float) -> np.ndarray:
    """Descarta eventos a menos de `dead_time` del último evento aceptado (no paralizable)"""
    if dead_time <= 0 or times.size == 0:
        return times
    gaps = np.diff(np.concatenate(([last_kept], times)))
    close = np.flatnonzero(gaps < dead_time)
    if close.size == 0:
        return times
    keep = np.ones(times.size, dtype=bool)
    kept_before: Dict[int, float] = {}
    for i in close:
        if i == 0:
            prior = last_kept
        elif keep[i - 1]:
            prior = times[i - 1]
        else:
            prior = kept_before[i - 1]
        if times[i] - prior < dead_time:
            keep[i] = False
            kept_before[i] = prior
    return times[keep]


def simulate_stream(
    rate_fn: RateFn,
    duration: float,
    detector: DetectorModel,
    seed: int,
    r_max: Optional[float] = None,
    grid_step: Optional[float] = None,
    chunk_duration: float = 1.0,
    source_digest: str = "",
) -> TagStream:
    """
    Genera un TagStream por thinning de candidatos a tasa R_max

    Args:
        rate_fn: tasa instantánea (fotones/s), vectorizada sobre tiempos en segundos
        duration: duración (s)
        detector: filtro de la tasa y tiempo muerto
        seed: semilla del generador (stream reproducible)
        r_max: cota superior de la tasa; si falta se estima muestreando rate_fn
        grid_step: paso de la grilla del filtro (por defecto 1/(50·f_c)); debe
            resolver el contenido espectral de rate_fn
        chunk_duration: tamaño del chunk de generación (s)
        source_digest: digest de la configuración fuente (metadata)
    """
    if duration <= 0:
        raise InvalidInputError("duration must be positive")
    if r_max is None:
        r_max = _estimate_r_max(rate_fn, duration)
    if r_max < 0:
        raise InvalidInputError("r_max must be non-negative")

    rng = np.random.default_rng(seed)
    filtered = math.isfinite(detector.bandwidth)
    rate_filter = None
    if filtered:
        step = grid_step or _default_step(detector)
        chunk_duration = min(chunk_duration, MAX_GRID_POINTS * step)
        rate_filter = _RateFilter(rate_fn, detector, step, duration)

    pieces: List[np.ndarray] = []
    last_time = -math.inf
    last_ps = -1
    start = 0.0
    while start < duration:
        stop = min(start + chunk_duration, duration)
        n_candidates = rng.poisson(r_max * (stop - start))
        times = np.sort(start + (stop - start) * rng.random(n_candidates))
        uniforms = rng.random(n_candidates)
        if rate_filter is not None:
            rates = rate_filter.at(times, stop)
        else:
            rates = np.asarray(rate_fn(times), dtype=float) if n_candidates else np.empty(0)

        if rates.size:
            worst = float(rates.max())
            if worst > r_max * (1 + 1e-12):
                raise ThinningBoundError(f"rate {worst:.6g}/s exceeds r_max {r_max:.6g}/s during thinning")
            if float(rates.min()) < 0:
                raise InvalidInputError("rate_fn returned a negative rate")

        accepted = times[uniforms * r_max < rates]
        accepted = _apply_dead_time(accepted, detector.dead_time, last_time)
        if accepted.size:
            last_time = float(accepted[-1])
        ps = np.floor(accepted * PS_PER_S).astype(np.int64)
        # Timestamps que coinciden tras el redondeo a ps se fusionan
        distinct = np.diff(np.concatenate(([last_ps], ps))) > 0
        ps = ps[distinct]
        if ps.size:
            last_ps = int(ps[-1])
        pieces.append(ps)
        start = stop

    timestamps = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
    log_info(f"Simulated {timestamps.size} photons over {duration:.6g}s (seed {seed})")
    return TagStream(
        timestamps=timestamps,
        duration=duration,
        metadata={"rng_seed": seed, "source_digest": source_digest},
    )


def expected_counts(
    rate_fn: RateFn,
    duration: float,
    bin_width: float,
    detector: DetectorModel,
    start: float = 0.0,
    grid_step: Optional[float] = None,
) -> TimeSeries:
    """Cuentas esperadas sin ruido: tasa filtrada en el centro de cada bin × ancho de bin"""
    n_bins = int(round(duration / bin_width))
    centers = start + (np.arange(n_bins) + 0.5) * bin_width
    if math.isfinite(detector.bandwidth):
        step = grid_step or min(_default_step(detector), bin_width)
        rate_filter = _RateFilter(rate_fn, detector, step, start + duration)
        rates = rate_filter.at(centers, start + duration)
    else:
        rates = np.asarray(rate_fn(centers), dtype=float)
    return TimeSeries(bin_width=bin_width, counts=rates * bin_width, start_time=start)


def bandwidth_from_power(laser_power: float, calibration: Sequence[CalibrationPoint]) -> float:
    """
    f_c interpolado linealmente en la tabla de calibración (potencia, f_c)

    Fuera del rango se satura al extremo con una advertencia.
    """
    powers = np.array([p.power for p in calibration])
    cutoffs = np.array([p.cutoff for p in calibration])
    if powers.size == 0:
        raise InvalidInputError("calibration table is empty")
    if np.any(np.diff(powers) <= 0) or np.any(np.diff(cutoffs) < 0):
        raise InvalidInputError("calibration must be monotone increasing in power and cutoff")
    if laser_power < powers[0] or laser_power > powers[-1]:
        log_warning(
            f"Laser power {laser_power:.3g} W outside calibration [{powers[0]:.3g}, {powers[-1]:.3g}] W; clamped"
        )
    return float(np.interp(laser_power, powers, cutoffs))


# ============================================================================
# Formato binario de TagStream
# ============================================================================

def write_tagstream(stream: TagStream, path: PathLike) -> Path:
    """Escribe header + timestamps u64 little-endian"""
    seed = int(stream.metadata.get("rng_seed", 0))
    header = TAG_HEADER.pack(TAG_MAGIC, TAG_VERSION, stream.duration_ps, stream.count, seed)
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as handle:
            handle.write(header)
            handle.write(stream.timestamps.astype("<u8").tobytes())
    return Path(path)


def read_tagstream_header(path: PathLike) -> Dict[str, Any]:
    with open(path, "rb") as handle:
        raw = handle.read(TAG_HEADER.size)
    if len(raw) < TAG_HEADER.size:
        raise InvalidInputError(f"{path}: truncated tagstream header")
    magic, version, duration_ps, count, seed = TAG_HEADER.unpack(raw)
    if magic != TAG_MAGIC:
        raise InvalidInputError(f"{path}: not a tagstream file (bad magic)")
    if version != TAG_VERSION:
        raise InvalidInputError(f"{path}: unsupported tagstream version {version}")
    return {
        "magic": magic.rstrip(b"\x00").decode("ascii"),
        "version": version,
        "duration_ps": duration_ps,
        "duration_s": duration_ps / PS_PER_S,
        "count": count,
        "seed": seed,
    }


def iter_tag_chunks(path: PathLike, chunk_size: int = 1 << 20) -> Iterator[np.ndarray]:
    """Lee los timestamps en bloques de `chunk_size` (memoria acotada)"""
    header = read_tagstream_header(path)
    remaining = header["count"]
    with open(path, "rb") as handle:
        handle.seek(TAG_HEADER.size)
        while remaining > 0:
            batch = np.fromfile(handle, dtype="<u8", count=min(chunk_size, remaining))
            if batch.size == 0:
                raise InvalidInputError(f"{path}: file holds fewer timestamps than its header count")
            remaining -= batch.size
            yield batch.astype(np.int64)


def read_tagstream(path: PathLike) -> TagStream:
    header = read_tagstream_header(path)
    chunks = list(iter_tag_chunks(path))
    timestamps = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    stream = TagStream(
        timestamps=timestamps,
        duration=header["duration_s"],
        metadata={"rng_seed": header["seed"], "source": str(path)},
    )
    try:
        return stream.validate()
    except OutOfRangeError as e:
        raise InvalidInputError(f"{path}: {e}") from e


def write_tagstream_csv(stream: TagStream, path: PathLike) -> Path:
    """Exportación de depuración: una fila por fotón"""
    frame = pd.DataFrame({"timestamp_ps": stream.timestamps})
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False)
    return Path(path)
