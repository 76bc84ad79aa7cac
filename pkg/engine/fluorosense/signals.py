"""
Síntesis de señales objetivo b(t) en teslas: tonos, portadora modulada en fase
y ruido telegráfico de dos estados
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from fluorosense.errors import OutOfRangeError
from fluorosense.logger import log_info
from fluorosense.models import PhaseModSpec, SignalSpec, TelegraphSpec, ToneSpec
from fluorosense.storage import atomic_path

ArrayLike = Union[float, np.ndarray]

# ⚡ Caché de formas de onda preparadas (trazas telegráficas ya generadas)
_MAX_WAVEFORM_CACHE_SIZE = 32
_WAVEFORM_CACHE: Dict[str, "Waveform"] = {}


@dataclass(frozen=True)
class TelegraphTrace:
    """Traza telegráfica: tiempos de conmutación relativos al inicio de la traza

    switch_times[0] = 0 marca el estado inicial; levels[i] rige en
    [switch_times[i], switch_times[i+1]). Los niveles son ±A/2.
    """
    trace_id: int
    switch_times: np.ndarray
    levels: np.ndarray
    duration: float

    def level_at(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any((t < 0) | (t > self.duration)):
            raise OutOfRangeError(f"time outside telegraph trace {self.trace_id} [0, {self.duration}] s")
        idx = np.searchsorted(self.switch_times, t, side="right") - 1
        return self.levels[idx]

    def dwell_times(self) -> np.ndarray:
        """Permanencias completas (la última, truncada por la duración, se descarta)"""
        return np.diff(self.switch_times)

    def bin_average(self, bin_width: float) -> np.ndarray:
        """Promedio exacto del nivel en cada bin [k·w, (k+1)·w)"""
        n_bins = int(round(self.duration / bin_width))
        edges = np.arange(n_bins + 1) * bin_width
        spans = np.diff(np.append(self.switch_times, self.duration))
        cumulative = np.concatenate(([0.0], np.cumsum(self.levels * spans)))
        idx = np.clip(np.searchsorted(self.switch_times, edges, side="right") - 1, 0, None)
        integral = cumulative[idx] + self.levels[idx] * (edges - self.switch_times[idx])
        return np.diff(integral) / bin_width


def generate_telegraph(spec: TelegraphSpec) -> List[TelegraphTrace]:
    """
    Genera `n_traces` trazas independientes con permanencias Exponential(mean_dwell)

    Cada traza usa un hijo propio de SeedSequence(rng_seed), de modo que las
    trazas son independientes y reproducibles por separado. El estado inicial
    se elige al azar por traza.
    """
    children = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_traces)
    half = spec.amplitude / 2
    traces = []
    for trace_id, child in enumerate(children):
        rng = np.random.default_rng(child)
        initial = int(rng.integers(2))
        expected = spec.trace_duration / spec.mean_dwell
        batch = int(expected + 5 * np.sqrt(expected) + 16)
        dwells = rng.exponential(spec.mean_dwell, size=batch)
        while dwells.sum() < spec.trace_duration:
            dwells = np.concatenate((dwells, rng.exponential(spec.mean_dwell, size=batch)))
        ends = np.cumsum(dwells)
        switches = np.concatenate(([0.0], ends[ends < spec.trace_duration]))
        state = (initial + np.arange(switches.size)) % 2
        levels = np.where(state == 0, half, -half)
        traces.append(TelegraphTrace(trace_id, switches, levels, spec.trace_duration))
    return traces


def on_off_schedule(spec: TelegraphSpec) -> List[Tuple[int, int, bool]]:
    """
    Orden de medición de los segmentos: (trace_id, ciclo, encendido)

    Cada traza se mide `on_repeats` segmentos con la señal y luego
    `off_repeats` segmentos sin ella, durante `cycles` ciclos.
    """
    schedule = []
    for trace_id in range(spec.n_traces):
        for cycle in range(spec.cycles):
            schedule.extend((trace_id, cycle, True) for _ in range(spec.on_repeats))
            schedule.extend((trace_id, cycle, False) for _ in range(spec.off_repeats))
    return schedule


def write_telegraph_csv(traces: List[TelegraphTrace], path: Union[str, Path]) -> Path:
    """Exporta los tiempos de conmutación (trace_id, switch_time_s, level)"""
    frame = pd.DataFrame({
        "trace_id": np.concatenate([np.full(t.switch_times.size, t.trace_id) for t in traces]),
        "switch_time_s": np.concatenate([t.switch_times for t in traces]),
        "level": np.concatenate([t.levels for t in traces]),
    })
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.17g")
    return Path(path)


class Waveform:
    """b(t) evaluable de una SignalSpec, con las trazas telegráficas pregeneradas"""

    def __init__(self, spec: SignalSpec):
        self.spec = spec
        self.projection = spec.projection_factor
        self._telegraph = [(c, generate_telegraph(c)) for c in spec.telegraph_components()]

    @property
    def telegraph_traces(self) -> List[List[TelegraphTrace]]:
        return [traces for _, traces in self._telegraph]

    def telegraph_span(self) -> float:
        """Tiempo cubierto por las trazas concatenadas (inf sin componentes telegráficas)"""
        if not self._telegraph:
            return np.inf
        return min(c.trace_duration * c.n_traces for c, _ in self._telegraph)

    def __call__(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise OutOfRangeError("signal evaluated at negative time")
        total = np.zeros_like(t)
        for component in self.spec.components:
            if isinstance(component, ToneSpec):
                total = total + component.amplitude * np.cos(2 * np.pi * component.frequency * t + component.phase)
            elif isinstance(component, PhaseModSpec):
                inner = component.mod_depth * np.sin(2 * np.pi * component.mod_frequency * t)
                total = total + component.amplitude * np.cos(2 * np.pi * component.carrier * t + inner)
        for component, traces in self._telegraph:
            total = total + _telegraph_value(component, traces, t)
        return total * self.projection


def _telegraph_value(spec: TelegraphSpec, traces: List[TelegraphTrace], t: np.ndarray) -> np.ndarray:
    span = spec.trace_duration * spec.n_traces
    if np.any(t > span):
        raise OutOfRangeError(
            f"time beyond generated telegraph traces ({span} s); increase n_traces or trace_duration"
        )
    index = np.minimum((t // spec.trace_duration).astype(int), spec.n_traces - 1)
    out = np.empty_like(t)
    for trace_id in np.unique(index):
        mask = index == trace_id
        out[mask] = traces[trace_id].level_at(t[mask] - trace_id * spec.trace_duration)
    return out


def build_waveform(spec: SignalSpec, use_cache: bool = True) -> Waveform:
    """Prepara (y cachea) la forma de onda de una SignalSpec"""
    key = spec.model_dump_json()
    if use_cache and key in _WAVEFORM_CACHE:
        return _WAVEFORM_CACHE[key]

    waveform = Waveform(spec)
    if len(_WAVEFORM_CACHE) >= _MAX_WAVEFORM_CACHE_SIZE:
        oldest_key = next(iter(_WAVEFORM_CACHE))
        del _WAVEFORM_CACHE[oldest_key]
        log_info("🧹 Waveform cache full, removed oldest entry")
    _WAVEFORM_CACHE[key] = waveform
    return waveform


def evaluate(spec: SignalSpec, t: ArrayLike) -> np.ndarray:
    """Σ componentes en t, escaladas por cos(projection_angle); determinista dada la semilla"""
    return build_waveform(spec)(t)


def clear_waveform_cache():
    _WAVEFORM_CACHE.clear()


def get_cache_stats() -> Dict[str, int]:
    return {"waveforms": len(_WAVEFORM_CACHE), "max_waveforms": _MAX_WAVEFORM_CACHE_SIZE}
