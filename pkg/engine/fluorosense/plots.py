"""
Gráficos estáticos de los runs (matplotlib, backend Agg)
"""
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from fluorosense.models import FitResult  # noqa: E402
from fluorosense.series import Spectrum  # noqa: E402
from fluorosense.storage import atomic_path  # noqa: E402

PathLike = Union[str, Path]
FIGURE_SIZE = (7, 4.5)


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_spectrum(
    spectra: Dict[str, Spectrum],
    path: PathLike,
    title: str,
    band: Optional[Tuple[float, float]] = None,
    marks: Sequence[float] = (),
) -> Path:
    """PSD de uno o más espectros en escala log-log"""
    fig, ax = plt.subplots(figsize=FIGURE_SIZE)
    for label, spectrum in spectra.items():
        f, p = spectrum.frequencies[1:], spectrum.psd[1:]
        if band is not None:
            keep = (f >= band[0]) & (f <= band[1])
            f, p = f[keep], p[keep]
        ax.loglog(f, np.maximum(p, np.finfo(float).tiny), lw=0.6, label=label)
    for frequency in marks:
        ax.axvline(frequency, color="grey", ls=":", lw=0.8)
    ax.set_xlabel("Frequency (Hz)")
    ax.set_ylabel("PSD (counts²)")
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)


def plot_fit_overlay(
    datasets: Sequence[dict],
    path: PathLike,
    title: str,
    xlabel: str,
    ylabel: str,
) -> Path:
    """
    Datos y curva ajustada por conjunto

    Cada elemento: {"label", "x", "y", opcional "sigma", opcional "fit": FitResult}
    """
    fig, ax = plt.subplots(figsize=FIGURE_SIZE)
    for data in datasets:
        x, y = np.asarray(data["x"]), np.asarray(data["y"])
        line = ax.errorbar(x, y, yerr=data.get("sigma"), fmt="o", ms=3, label=data["label"])
        fit: Optional[FitResult] = data.get("fit")
        if fit is not None:
            dense = np.geomspace(x.min(), x.max(), 400)
            ax.plot(dense, fit.evaluate(dense), color=line[0].get_color(), lw=1.0)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    return _save(fig, path)


def plot_comb(table: pd.DataFrame, path: PathLike, title: str, expected: Optional[np.ndarray] = None) -> Path:
    """Amplitud y fase por índice del peine"""
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=FIGURE_SIZE)
    top.stem(table["n"], table["amplitude"], label="coherent average")
    if expected is not None:
        top.plot(table["n"], expected, "x", color="black", label="expected")
    top.set_ylabel("Amplitude (counts/bin)")
    top.legend(loc="best", fontsize="small")
    bottom.plot(table["n"], table["phase_rad"], "o")
    bottom.set_ylim(-np.pi, np.pi)
    bottom.set_xlabel("Comb index n")
    bottom.set_ylabel("Phase (rad)")
    top.set_title(title)
    return _save(fig, path)
