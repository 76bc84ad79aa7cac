"""
Contenedores inmutables de datos numéricos: TagStream, TimeSeries y Spectrum
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np

from fluorosense.errors import GridMismatchError, OutOfRangeError

PS_PER_S = 10**12

# (ganancia coherente)² · N / Σw²: de normalización de picos a densidad de ruido
WINDOW_NOISE_FACTOR = {"none": 1.0, "hann": 0.25 / 0.375}


@dataclass(frozen=True, eq=False)
class TagStream:
    """Timestamps de fotones en picosegundos (int64, estrictamente crecientes)"""
    timestamps: np.ndarray
    duration: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.timestamps.size)

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration * PS_PER_S))

    @property
    def mean_rate(self) -> float:
        return self.count / self.duration if self.duration > 0 else 0.0

    def window(self, start: float, stop: float) -> "TagStream":
        """Sub-stream [start, stop) con los timestamps referidos a `start`"""
        start_ps, stop_ps = int(round(start * PS_PER_S)), int(round(stop * PS_PER_S))
        lo, hi = np.searchsorted(self.timestamps, [start_ps, stop_ps], side="left")
        return TagStream(
            timestamps=self.timestamps[lo:hi] - start_ps,
            duration=stop - start,
            metadata={**self.metadata, "window_start_s": start},
        )

    def validate(self) -> "TagStream":
        ts = self.timestamps
        if ts.size and (np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] > self.duration_ps):
            raise OutOfRangeError("timestamps must be strictly increasing and within [0, duration]")
        return self


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Serie de fluorescencia: cuentas por bin contiguo desde `start_time`"""
    bin_width: float
    counts: np.ndarray
    start_time: float = 0.0

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def duration(self) -> float:
        return self.n_bins * self.bin_width

    @property
    def nyquist(self) -> float:
        return 1.0 / (2 * self.bin_width)

    def times(self) -> np.ndarray:
        """Centros de los bins"""
        return self.start_time + (np.arange(self.n_bins) + 0.5) * self.bin_width


@dataclass(frozen=True, eq=False)
class Spectrum:
    """
    Espectro DC..Nyquist de una serie real

    `amplitudes` son los coeficientes de la DFT (convención numpy rfft, sin
    normalizar; con ventana Hann se dividen por la ganancia coherente 0.5).
    `psd` = |amplitud|² por bin positivo, sin plegar; `fold_weights()` da el
    factor 2 de los bins interiores para el espectro de un lado.
    `psd_m2` es la media de psd² y `psd_stderr` el error estándar de la media.
    """
    frequencies: np.ndarray
    amplitudes: np.ndarray
    psd: np.ndarray
    bin_width: float
    duration: float
    n_averages: int = 1
    window: str = "none"
    psd_m2: Optional[np.ndarray] = None
    psd_stderr: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def resolution(self) -> float:
        return 1.0 / self.duration

    @property
    def nyquist(self) -> float:
        return 1.0 / (2 * self.bin_width)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.bin_width))

    def bin_index(self, frequency: float, tolerance: float = 1e-6) -> int:
        """Índice del bin en `frequency`; debe caer sobre la grilla"""
        k = frequency / self.resolution
        index = int(round(k))
        if abs(k - index) > tolerance or not 0 <= index < self.frequencies.size:
            raise OutOfRangeError(f"frequency {frequency} Hz is not on the spectrum grid (resolution {self.resolution} Hz)")
        return index

    def fold_weights(self) -> np.ndarray:
        weights = np.full(self.frequencies.size, 2.0)
        weights[0] = 1.0
        if self.n_samples % 2 == 0:
            weights[-1] = 1.0
        return weights

    def density_scale(self) -> np.ndarray:
        """Factor por bin que lleva psd (y su error estándar) a densidad de un lado"""
        return self.fold_weights() * self.bin_width / self.n_samples * WINDOW_NOISE_FACTOR.get(self.window, 1.0)

    def density(self) -> np.ndarray:
        """Densidad espectral de un lado en cuentas²/Hz (convención de periodograma)"""
        return self.psd * self.density_scale()

    def same_grid(self, other: "Spectrum") -> bool:
        return (
            self.frequencies.size == other.frequencies.size
            and np.isclose(self.duration, other.duration, rtol=1e-12)
            and np.isclose(self.bin_width, other.bin_width, rtol=1e-12)
            and self.window == other.window
        )

    def require_same_grid(self, other: "Spectrum"):
        if not self.same_grid(other):
            raise GridMismatchError(
                f"spectrum grids differ: {self.frequencies.size} bins / {self.duration} s / {self.window} vs "
                f"{other.frequencies.size} bins / {other.duration} s / {other.window}"
            )

    def with_metadata(self, **items) -> "Spectrum":
        return replace(self, metadata={**self.metadata, **items})
