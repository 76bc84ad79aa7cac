"""
Pipelines de experimentos, uno por tipo de configuración

Cada run escribe en un directorio temporal que se renombra al terminar; ante
un error se elimina completo. El manifiesto lista archivos de datos, gráficos
y configuración con sus checksums. Las verificaciones de aceptación se
recalculan siempre desde los archivos escritos, tanto al correr como al
verificar.
"""
import hashlib
import json
import math
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy import signal as sps
from scipy import special

from fluorosense import __version__, fitkit, lindblad, nvmodel, phaselock, photonsim, plots, signals, spectral
from fluorosense.errors import InvalidInputError, ReferenceRejectedError, VerificationError
from fluorosense.logger import log_info, log_step, log_warning, metrics_collector
from fluorosense.models import (
    BandwidthSweepConfig,
    CheckResult,
    DetectorModel,
    DrivePoint,
    ExperimentConfig,
    FitResult,
    LindbladSweepConfig,
    ManifestEntry,
    MultitoneConfig,
    PhaseCoherentConfig,
    PhaseModSpec,
    ReferenceSpec,
    RunManifest,
    SnrScalingConfig,
    TelegraphExperimentConfig,
    ToneSpec,
    VerificationReport,
)
from fluorosense.series import Spectrum, TimeSeries
from fluorosense.settings import get_settings
from fluorosense.storage import atomic_path, sha256_file, write_text_atomic

PathLike = Union[str, Path]

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
CHECKS_FILE = "checks.json"
RESULTS_FILE = "results.json"


# ============================================================================
# Contexto de run
# ============================================================================

@dataclass
class RunContext:
    """Directorio de trabajo de un run y registro de archivos producidos"""
    config: ExperimentConfig
    directory: Path
    files: Dict[str, str] = field(default_factory=dict)
    steps: List[dict] = field(default_factory=list)
    photons: int = 0

    def path(self, name: str, role: str = "data") -> Path:
        self.files[name] = role
        return self.directory / name

    def seeds(self, label: str, n: int) -> List[int]:
        """Semillas reproducibles por etiqueta, derivadas de la semilla maestra"""
        key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")
        return [int(s) for s in np.random.SeedSequence([self.config.seed, key]).generate_state(n)]


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode()).hexdigest()


def drive_for(config: ExperimentConfig) -> DrivePoint:
    return config.drive or nvmodel.default_drive(config.odmr)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format="%.17g")
    return path


def _write_json(payload, path: Path) -> Path:
    return write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True))


def _write_fits(fits: Dict[str, FitResult], path: Path) -> Path:
    return _write_json({key: json.loads(fit.to_json()) for key, fit in fits.items()}, path)


def _read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _check(name: str, passed: bool, detail: str = "", measured: Optional[float] = None) -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), detail=detail,
                       measured=None if measured is None else float(measured))


def _highest_signal_frequency(config: ExperimentConfig) -> float:
    highest = 0.0
    for component in (config.signal.components if config.signal else []):
        if isinstance(component, ToneSpec):
            highest = max(highest, component.frequency)
        elif isinstance(component, PhaseModSpec):
            highest = max(highest, component.carrier + 5 * component.mod_frequency)
    return highest


def _grid_step(config: ExperimentConfig) -> Optional[float]:
    """Paso del filtro de tasa: resuelve el corte y la señal más rápida"""
    if not math.isfinite(config.detector.bandwidth):
        return None
    step = 1.0 / (50 * config.detector.bandwidth)
    highest = _highest_signal_frequency(config)
    if highest > 0:
        step = min(step, 1.0 / (20 * highest))
    return step


def _signal_rate(config: ExperimentConfig, drive: DrivePoint, offset: float):
    def rate(t):
        return nvmodel.transduce(config.odmr, drive, signals.evaluate(config.signal, np.asarray(t) + offset))
    return rate


def _map(function: Callable, items: Sequence) -> list:
    workers = get_settings().max_workers
    if workers <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))


def _simulate_segments(ctx: RunContext, drive: DrivePoint, label: str = "segment") -> List[Spectrum]:
    """Un espectro por segmento de adquisición contiguo; guarda los primeros TagStreams"""
    config, acquisition = ctx.config, ctx.config.acquisition
    seeds = ctx.seeds(label, acquisition.n_segments)
    digest = config_digest(config)
    step = _grid_step(config)
    saved = {k: ctx.path(f"{label}_{k:04d}.tags") for k in range(min(acquisition.save_tagstreams,
                                                                        acquisition.n_segments))}

    def one(k: int) -> Tuple[int, Spectrum]:
        stream = photonsim.simulate_stream(
            _signal_rate(config, drive, k * acquisition.segment_duration),
            acquisition.segment_duration,
            config.detector,
            seed=seeds[k],
            r_max=config.odmr.count_rate,
            grid_step=step,
            source_digest=digest,
        )
        if k in saved:
            photonsim.write_tagstream(stream, saved[k])
        return stream.count, spectral.psd(spectral.bin(stream, acquisition.bin_width), acquisition.window)

    results = _map(one, range(acquisition.n_segments))
    ctx.photons += sum(count for count, _ in results)
    return [spectrum for _, spectrum in results]


# ============================================================================
# sensitivity-table
# ============================================================================

@log_step("sensitivity table")
def _run_sensitivity_table(ctx: RunContext) -> dict:
    rows = dict(nvmodel.REFERENCE_DEVICES)
    rows.setdefault(ctx.config.name, ctx.config.odmr)
    table = nvmodel.sensitivity_table(rows)
    nvmodel.write_sensitivity_table_csv(table, ctx.path("sensitivity_table.csv"))
    return {"rows": len(table)}


def _assess_sensitivity_table(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    table = pd.read_csv(run_dir / "sensitivity_table.csv").set_index("name")
    checks = []
    for name, expected in nvmodel.REFERENCE_SENSITIVITY.items():
        measured = float(table.loc[name, "eta_ut_per_sqrt_hz"]) * 1e-6
        checks.append(_check(
            f"sensitivity:{name}", abs(measured / expected - 1) <= 0.02,
            f"eta {measured * 1e6:.3g} uT/sqrt(Hz), expected {expected * 1e6:.3g}", measured,
        ))
    return checks


# ============================================================================
# snr-scaling
# ============================================================================

def _first_tone(config: ExperimentConfig) -> ToneSpec:
    return next(c for c in config.signal.components if isinstance(c, ToneSpec))


@log_step("snr scaling")
def _run_snr_scaling(ctx: RunContext) -> dict:
    config = ctx.config
    settings_snr = config.snr or SnrScalingConfig()
    tone = _first_tone(config)
    spectra = _simulate_segments(ctx, drive_for(config))

    coherent = settings_snr.domain == "amplitude"
    blocks = spectral.block_averages(spectra, settings_snr.block_sizes, coherent=coherent)
    scaling = spectral.snr_scaling(
        [blocks[size] for size in sorted(blocks)], tone.frequency, settings_snr.band, settings_snr.exclusion_bins,
        domain=settings_snr.domain,
    )
    average = spectral.average_psd(spectra)
    spectral.write_spectrum_csv(average, ctx.path("spectrum_average.csv"))
    if coherent:
        spectral.write_spectrum_csv(spectral.coherent_mean(spectra), ctx.path("spectrum_coherent.csv"))
    _write_frame(scaling.to_frame(), ctx.path("snr_scaling.csv"))
    _write_fits({"snr": scaling.fit}, ctx.path("fits.json"))

    amplitude = tone.amplitude * config.signal.projection_factor
    results = {
        "domain": settings_snr.domain,
        "b": scaling.b,
        "A": scaling.A,
        "eta_empirical": spectral.empirical_sensitivity(scaling, amplitude, config.acquisition.segment_duration),
        "eta_predicted": nvmodel.sensitivity(config.odmr),
    }
    _write_json(results, ctx.path(RESULTS_FILE))

    plots.plot_spectrum({"average": average}, ctx.path("spectrum_average.png", "plot"),
                        f"{config.name}: averaged PSD", band=settings_snr.band, marks=[tone.frequency])
    plots.plot_fit_overlay(
        [{"label": "SNR", "x": scaling.times, "y": scaling.snr, "fit": scaling.fit}],
        ctx.path("snr_scaling.png", "plot"), f"{config.name}: SNR vs averaging time",
        "Averaging time (s)", "SNR",
    )
    return results


def _assess_snr_scaling(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    tolerance = (config.snr or SnrScalingConfig()).exponent_tolerance
    frame = pd.read_csv(run_dir / "snr_scaling.csv")
    frame = frame[frame["snr"] > 0]
    fit = fitkit.fit("powerlaw", frame["time_s"].to_numpy(), frame["snr"].to_numpy())
    b = fit.params["b"]
    results = _read_json(run_dir / RESULTS_FILE)
    ratio = results["eta_empirical"] / results["eta_predicted"]
    return [
        _check("snr_exponent", abs(b - 0.5) <= tolerance, f"b = {b:.4f}, expected 0.5 ± {tolerance}", b),
        _check("empirical_sensitivity", 1 / 1.5 <= ratio <= 1.5,
               f"empirical/predicted sensitivity = {ratio:.3f}", ratio),
    ]


# ============================================================================
# bandwidth-sweep
# ============================================================================

def _pole_cutoff(detector) -> float:
    """f_c del modelo de roll-off equivalente a la cascada: frecuencia de cada polo"""
    return detector.bandwidth / math.sqrt(2 ** (1 / detector.n_poles) - 1)


def _bandwidth_point(ctx: RunContext, detector, cutoff: float, frequency: float, seed: int,
                     save_as: Optional[Path]) -> dict:
    """Respuesta de una tasa modulada R₀(1 + m·cos 2πft) tras el filtro del detector"""
    sweep = ctx.config.bandwidth or BandwidthSweepConfig()
    duration = sweep.cycles_per_cutoff / cutoff
    rate0 = sweep.photons_per_point / duration
    depth = sweep.modulation_depth
    width = 1.0 / (40 * cutoff)

    def rate(t):
        return rate0 * (1 + depth * np.cos(2 * np.pi * frequency * np.asarray(t)))

    stream = photonsim.simulate_stream(
        rate, duration, detector, seed=seed, r_max=rate0 * (1 + depth),
        grid_step=min(1.0 / (50 * cutoff), 1.0 / (20 * frequency)), source_digest=config_digest(ctx.config),
    )
    if save_as is not None:
        photonsim.write_tagstream(stream, save_as)
    spectrum = spectral.psd(spectral.bin(stream, width))
    attenuation = float(spectral.binning_response(frequency, width))
    median, _ = spectral.noise_floor(spectrum, (spectrum.resolution, spectrum.nyquist), exclude=[frequency])
    floor = median / phaselock.EXPONENTIAL_MEDIAN
    peak = float(spectrum.psd[spectrum.bin_index(frequency)])
    signal_power = max(peak - floor, 0.0)
    return {
        "frequency_hz": frequency,
        "response": signal_power / attenuation,
        "sigma": math.sqrt(2 * max(signal_power, floor) * floor + floor**2) / attenuation,
        "noise_floor": floor / attenuation,
        "photons": stream.count,
    }


@log_step("bandwidth sweep")
def _run_bandwidth_sweep(ctx: RunContext) -> dict:
    config = ctx.config
    sweep = config.bandwidth or BandwidthSweepConfig()
    rows, fits = [], {}
    for index, power in enumerate(sweep.laser_powers):
        cutoff = photonsim.bandwidth_from_power(power, sweep.calibration)
        detector = config.detector.model_copy(update={"bandwidth": cutoff})
        duration = sweep.cycles_per_cutoff / cutoff
        frequencies = sorted({round(factor * cutoff * duration) / duration for factor in sweep.frequency_factors})
        frequencies = [f for f in frequencies if f > 0]
        seeds = ctx.seeds(f"bandwidth_{index}", len(frequencies))
        saved = ctx.path(f"bandwidth_{index}.tags") if config.acquisition.save_tagstreams else None

        points = _map(
            lambda k: _bandwidth_point(ctx, detector, cutoff, frequencies[k], seeds[k], saved if k == 0 else None),
            range(len(frequencies)),
        )
        ctx.photons += sum(p.pop("photons") for p in points)
        for point in points:
            rows.append({"power_w": power, "cutoff_hz": cutoff, **point})
        frame = pd.DataFrame(points)
        fits[f"power_{index}"] = fitkit.fit("bandwidth", frame["frequency_hz"], frame["response"], frame["sigma"])
        log_info(f"Laser power {power:.3g} W: f_c = {fits[f'power_{index}'].params['f_c']:.4g} Hz "
                 f"(filter {cutoff:.4g} Hz)")

    table = pd.DataFrame(rows, columns=["power_w", "cutoff_hz", "frequency_hz", "response", "sigma", "noise_floor"])
    _write_frame(table, ctx.path("bandwidth_response.csv"))
    _write_fits(fits, ctx.path("fits.json"))
    plots.plot_fit_overlay(
        [
            {"label": f"{power * 1e6:.0f} µW", "x": group["frequency_hz"], "y": group["response"],
             "sigma": group["sigma"], "fit": fits[f"power_{index}"]}
            for index, (power, group) in enumerate(table.groupby("power_w", sort=False))
        ],
        ctx.path("bandwidth_response.png", "plot"), f"{config.name}: rate response vs frequency",
        "Frequency (Hz)", "Response (counts²)",
    )
    return {"powers": len(sweep.laser_powers)}


def _assess_bandwidth_sweep(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    table = pd.read_csv(run_dir / "bandwidth_response.csv")
    checks, cutoffs = [], []
    for power, group in table.groupby("power_w", sort=False):
        fit = fitkit.fit("bandwidth", group["frequency_hz"], group["response"], group["sigma"])
        detector = config.detector.model_copy(update={"bandwidth": float(group["cutoff_hz"].iloc[0])})
        expected_cutoff = _pole_cutoff(detector)
        f_c, b = fit.params["f_c"], fit.params["b"]
        cutoffs.append(f_c)
        checks.append(_check(f"cutoff:{power:.3g}W", abs(f_c / expected_cutoff - 1) <= 0.05,
                             f"f_c = {f_c:.4g} Hz, expected {expected_cutoff:.4g} Hz ± 5%", f_c))
        checks.append(_check(f"exponent:{power:.3g}W", abs(b - detector.n_poles) <= 0.1,
                             f"b = {b:.3f}, expected {detector.n_poles} ± 0.1", b))
    monotone = bool(np.all(np.diff(cutoffs) > 0))
    checks.append(_check("cutoff_monotone_in_power", monotone,
                         "fitted f_c " + ("increases" if monotone else "does not increase") + " with laser power"))
    return checks


# ============================================================================
# lindblad-sweep
# ============================================================================

def _lindblad_fits(curves: Sequence[lindblad.ResponseCurve]) -> Dict[str, FitResult]:
    return {f"s_{curve.s:g}": lindblad.fit_curve(curve) for curve in curves}


@log_step("lindblad sweep")
def _run_lindblad_sweep(ctx: RunContext) -> dict:
    sweep = ctx.config.lindblad or LindbladSweepConfig()
    curves = lindblad.sweep_response(
        sweep.base, sweep.saturation_map, sweep.s_values, sweep.frequencies,
        sweep.signal_amplitude, sweep.offset, dt_factor=sweep.dt_factor,
    )
    lindblad.write_response_csv(curves, ctx.path("response_curves.csv"))
    fits = _lindblad_fits(curves)
    _write_fits(fits, ctx.path("fits.json"))
    plots.plot_fit_overlay(
        [{"label": f"s = {curve.s:g}", "x": curve.frequencies, "y": curve.values(), "fit": fits[f"s_{curve.s:g}"]}
         for curve in curves],
        ctx.path("response_curves.png", "plot"), f"{ctx.config.name}: two-level response vs frequency",
        "Frequency (Hz)", "Response (amplitude² + offset)",
    )
    return {"curves": len(curves)}


def _assess_lindblad_sweep(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    fits = _lindblad_fits(lindblad.read_response_csv(run_dir / "response_curves.csv"))
    cutoffs = np.array([fit.params["f_c"] for fit in fits.values()])
    exponents = np.array([fit.params["b"] for fit in fits.values()])
    steps = np.diff(exponents)
    return [
        _check("cutoff_monotone_in_saturation", bool(np.all(np.diff(cutoffs) > 0)),
               "f_c = " + ", ".join(f"{c:.4g}" for c in cutoffs)),
        _check("exponent_monotone_in_saturation", bool(np.all(steps > 0) or np.all(steps < 0)),
               "b = " + ", ".join(f"{b:.4f}" for b in exponents)),
    ]


# ============================================================================
# multitone
# ============================================================================

def _expected_tones(config: ExperimentConfig, band: Tuple[float, float]) -> List[float]:
    tones = [c.frequency for c in config.signal.components if isinstance(c, ToneSpec)]
    return sorted(f for f in tones if band[0] <= f <= band[1])


def _find_peaks(spectrum: Spectrum, band: Tuple[float, float], n_peaks: int) -> pd.DataFrame:
    """Los `n_peaks` máximos locales de mayor psd dentro de la banda"""
    f = spectrum.frequencies
    inside = np.flatnonzero((f >= band[0]) & (f <= band[1]))
    candidates, _ = sps.find_peaks(spectrum.psd[inside])
    strongest = candidates[np.argsort(spectrum.psd[inside][candidates])[::-1][:n_peaks]]
    chosen = np.sort(inside[strongest])
    return pd.DataFrame({"frequency_hz": f[chosen], "psd": spectrum.psd[chosen]})


@log_step("multitone")
def _run_multitone(ctx: RunContext) -> dict:
    config = ctx.config
    settings_mt = config.multitone or MultitoneConfig()
    expected = _expected_tones(config, settings_mt.band)
    average = spectral.average_psd(_simulate_segments(ctx, drive_for(config)))
    spectral.write_spectrum_csv(average, ctx.path("spectrum_average.csv"))
    peaks = _find_peaks(average, settings_mt.band, settings_mt.n_peaks or len(expected))
    _write_frame(peaks, ctx.path("peaks.csv"))
    plots.plot_spectrum({"average": average}, ctx.path("spectrum_average.png", "plot"),
                        f"{config.name}: averaged PSD", band=settings_mt.band, marks=expected)
    return {"peaks": peaks["frequency_hz"].tolist()}


def _assess_multitone(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    settings_mt = config.multitone or MultitoneConfig()
    expected = _expected_tones(config, settings_mt.band)
    spectrum = spectral.read_spectrum_csv(run_dir / "spectrum_average.csv")
    found = _find_peaks(spectrum, settings_mt.band, settings_mt.n_peaks or len(expected))["frequency_hz"].to_numpy()
    checks = []
    for tone in expected:
        gap = float(np.min(np.abs(found - tone))) if found.size else math.inf
        checks.append(_check(f"tone:{tone:g}Hz", gap < 0.5 * spectrum.resolution,
                             f"nearest peak {gap:g} Hz away (resolution {spectrum.resolution:g} Hz)", gap))
    checks.append(_check("distinct_peaks", np.unique(found).size == len(expected),
                         f"{np.unique(found).size} distinct peaks for {len(expected)} tones"))
    return checks


# ============================================================================
# phase-coherent
# ============================================================================

TRACE_BATCH = 16


def _phase_mod(config: ExperimentConfig) -> PhaseModSpec:
    return next(c for c in config.signal.components if isinstance(c, PhaseModSpec))


def _sideband_index(pm: PhaseModSpec, frequency) -> np.ndarray:
    """Índice m de la línea f_c + m·f_m en `frequency`; NaN si no cae sobre una línea"""
    m = (np.asarray(frequency, dtype=float) - pm.carrier) / pm.mod_frequency
    return np.where(np.abs(m - np.round(m)) < 1e-9, np.round(m), np.nan)


def _expected_comb(pm: PhaseModSpec, ref: ReferenceSpec, n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Amplitud relativa a ω₁ y fase corregida esperada en cada ω₁ + n·δω

    La línea m de la modulación tiene amplitud ∝ J_m(β); la corrección resta
    la fase de las líneas de referencia m₁ (ω₁) y m₂ (ω₂), así que la fase
    esperada es sgn(J_m) − sgn(J_m₁) − n·(sgn(J_m₂) − sgn(J_m₁)). Un índice
    que no cae sobre una línea tiene amplitud esperada 0.
    """
    m1, m2 = _sideband_index(pm, [ref.omega1, ref.omega2])
    if np.isnan(m1) or np.isnan(m2):
        raise InvalidInputError(
            f"reference {ref.omega1}/{ref.omega2} Hz does not sit on the phase_mod lines "
            f"{pm.carrier} + m·{pm.mod_frequency} Hz"
        )
    n = np.asarray(n)
    m = _sideband_index(pm, ref.omega1 + n * ref.spacing)
    on_line = ~np.isnan(m)
    bessel = np.where(on_line, special.jv(np.nan_to_num(m), pm.mod_depth), 0.0)
    j1, j2 = special.jv(m1, pm.mod_depth), special.jv(m2, pm.mod_depth)

    def sign_phase(value):
        return np.where(np.asarray(value) < 0, np.pi, 0.0)

    phase = sign_phase(bessel) - sign_phase(j1) - n * (sign_phase(j2) - sign_phase(j1))
    return np.abs(bessel) / abs(j1), np.mod(phase + np.pi, 2 * np.pi) - np.pi


def _circular_spread(phases: np.ndarray) -> float:
    """Máxima distancia angular a la media circular"""
    centre = np.angle(np.mean(np.exp(1j * phases)))
    return float(np.max(np.abs(np.angle(np.exp(1j * (phases - centre))))))


def _comb_phase_errors(spectrum: Spectrum, ref: ReferenceSpec, frequencies: Sequence[float], n: Sequence[int]):
    """
    Error estándar de la fase corregida en cada línea del peine

    Suma en cuadratura el error propio y el de φ₁ + n·(φ₂ − φ₁).
    """
    e1 = phaselock.phase_error(spectrum, ref.omega1)
    e2 = phaselock.phase_error(spectrum, ref.omega2)
    return [
        math.sqrt(phaselock.phase_error(spectrum, f) ** 2 + ((1 - k) * e1) ** 2 + (k * e2) ** 2)
        for f, k in zip(frequencies, n)
    ]


@log_step("phase-coherent averaging")
def _run_phase_coherent(ctx: RunContext) -> dict:
    config, acquisition = ctx.config, ctx.config.acquisition
    settings_pc = config.phase or PhaseCoherentConfig()
    ref = settings_pc.reference
    drive = drive_for(config)
    gain = nvmodel.transduction_gain(config.odmr, drive)
    step = _grid_step(config)
    digest = config_digest(config)
    offsets = np.random.default_rng(ctx.seeds("offsets", 1)[0]).uniform(0.0, settings_pc.max_offset,
                                                                        settings_pc.n_traces)
    seeds = ctx.seeds("phase_traces", settings_pc.n_traces)

    def one(k: int):
        rate = _signal_rate(config, drive, float(offsets[k]))
        expected = photonsim.expected_counts(rate, acquisition.segment_duration, acquisition.bin_width,
                                             config.detector, grid_step=step)
        noiseless = spectral.psd(expected, acquisition.window)
        photons = int(round(expected.counts.sum()))
        spectrum = noiseless
        if settings_pc.shot_noise:
            stream = photonsim.simulate_stream(
                rate, acquisition.segment_duration, config.detector, seed=seeds[k],
                r_max=config.odmr.count_rate, grid_step=step, source_digest=digest,
            )
            photons = stream.count
            spectrum = spectral.psd(spectral.bin(stream, acquisition.bin_width), acquisition.window)
        try:
            locked = phaselock.lock(spectrum, ref, gain=gain)
            companion = phaselock.lock(noiseless, ref) if settings_pc.shot_noise else locked
        except ReferenceRejectedError as e:
            log_warning(f"Trace {k} rejected: {e}")
            return photons, None
        bins = [i for i in locked.comb_bins() if lo <= locked.comb_index[i] <= hi]
        n = [int(locked.comb_index[i]) for i in bins]
        errors = _comb_phase_errors(spectrum, ref, [float(spectrum.frequencies[i]) for i in bins], n)
        rows = [
            {
                "trace": k,
                "offset_s": float(offsets[k]),
                "n": n_i,
                "phase_rad": float(locked.phases[i]),
                "phase_error_rad": error,
                "noiseless_phase_rad": float(companion.phases[i]),
            }
            for i, n_i, error in zip(bins, n, errors)
        ]
        return photons, (locked, phaselock.phase_correct(spectrum, 0.0, 0.0, ref), rows)

    # Por lotes: coherent_average es asociativa y no hace falta retener cada espectro
    lo, hi = settings_pc.comb_range
    corrected = uncorrected = None
    trace_rows: List[dict] = []
    accepted = 0
    for start in range(0, settings_pc.n_traces, TRACE_BATCH):
        batch = _map(one, range(start, min(start + TRACE_BATCH, settings_pc.n_traces)))
        ctx.photons += sum(photons for photons, _ in batch)
        kept = [item for _, item in batch if item is not None]
        if not kept:
            continue
        corrected = phaselock.coherent_average(([corrected] if corrected else []) + [i[0] for i in kept])
        uncorrected = phaselock.coherent_average(([uncorrected] if uncorrected else []) + [i[1] for i in kept])
        trace_rows.extend(row for item in kept for row in item[2])
        accepted += len(kept)
    if not accepted:
        raise ReferenceRejectedError(f"all {settings_pc.n_traces} traces were rejected by the reference check")

    phaselock.write_phased_csv(corrected, ctx.path("phased_corrected.csv"))
    phaselock.write_phased_csv(uncorrected, ctx.path("phased_uncorrected.csv"))

    table = phaselock.comb_table(corrected, settings_pc.comb_range)
    bins = [corrected.spectrum.bin_index(f) for f in table["frequency_hz"]]
    table["power_corrected"] = corrected.spectrum.psd[bins]
    table["power_uncorrected"] = uncorrected.spectrum.psd[bins]
    _write_frame(table, ctx.path("comb.csv"))

    columns = ["trace", "offset_s", "n", "phase_rad", "phase_error_rad", "noiseless_phase_rad"]
    _write_frame(pd.DataFrame(trace_rows, columns=columns), ctx.path("comb_traces.csv"))

    results_payload = {"accepted": accepted, "rejected": settings_pc.n_traces - accepted}
    _write_json(results_payload, ctx.path(RESULTS_FILE))

    relative, _ = _expected_comb(_phase_mod(config), ref, table["n"].to_numpy())
    carrier = table.loc[table["n"] == 0, "amplitude"]
    plots.plot_comb(table, ctx.path("comb.png", "plot"), f"{config.name}: coherent average on the comb",
                    expected=relative * float(carrier.iloc[0]) if not carrier.empty else None)
    return results_payload


def _assess_phase_coherent(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    settings_pc = config.phase or PhaseCoherentConfig()
    table = pd.read_csv(run_dir / "comb.csv")
    traces = pd.read_csv(run_dir / "comb_traces.csv")
    accepted = _read_json(run_dir / RESULTS_FILE)["accepted"]
    relative, expected_phase = _expected_comb(_phase_mod(config), settings_pc.reference, table["n"].to_numpy())
    significant = relative >= 0.05
    carrier = float(table.loc[table["n"] == 0, "amplitude"].iloc[0])

    measured = table["amplitude"].to_numpy() / carrier
    error = np.abs(measured[significant] / relative[significant] - 1)
    gaps = np.abs(np.angle(np.exp(1j * (table["phase_rad"].to_numpy() - expected_phase))))[significant]
    ratio = table["power_uncorrected"].to_numpy() / table["power_corrected"].to_numpy()
    suppression = float(np.mean(ratio[significant])) * accepted

    keep = set(table.loc[significant, "n"].tolist())
    groups = [(n, group) for n, group in traces.groupby("n") if n in keep]
    invariance = max(_circular_spread(group["noiseless_phase_rad"].to_numpy()) for _, group in groups)

    checks = [
        _check("bessel_ratios", bool(np.all(error <= settings_pc.amplitude_tolerance)),
               f"max relative error {error.max():.4f} (tolerance {settings_pc.amplitude_tolerance})",
               float(error.max())),
        _check("comb_phase_pattern", bool(np.all(gaps < np.pi / 2)),
               f"max phase gap {gaps.max():.3g} rad from the Bessel sign pattern", float(gaps.max())),
        _check("uncorrected_suppression", 0.5 <= suppression <= 2.0,
               f"uncorrected/corrected comb power = {suppression:.3f}/M over M = {accepted} traces", suppression),
        _check("offset_invariant_phases", invariance <= settings_pc.phase_tolerance,
               f"max per-trace spread of the noiseless corrected phase {invariance:.3g} rad", invariance),
    ]
    if settings_pc.shot_noise:
        # Con ruido la dispersión por traza debe quedar dentro de 5σ del error de fase estimado
        worst = 0.0
        for _, group in groups:
            bound = max(5 * float(group["phase_error_rad"].median()), settings_pc.phase_tolerance)
            worst = max(worst, _circular_spread(group["phase_rad"].to_numpy()) / bound)
        checks.append(_check("phase_scatter", worst <= 1.0,
                             f"worst per-trace phase spread is {worst:.3f} of 5x the estimated phase error", worst))
    return checks


# ============================================================================
# telegraph
# ============================================================================

# Por encima de WHITE_FACTOR/(πT) la psd telegráfica es despreciable frente al ruido de disparo
WHITE_FACTOR = 100.0


def _dwell_label(dwell: float) -> str:
    return f"{dwell * 1e3:g}ms"


def _stream_average(function: Callable, items: Sequence, batch: int = 16) -> Dict[str, Spectrum]:
    """Promedios por clave sin retener todos los espectros en memoria"""
    totals: Dict[str, Spectrum] = {}
    for start in range(0, len(items), batch):
        for key, spectrum in _map(function, items[start:start + batch]):
            totals[key] = spectrum if key not in totals else spectral.average_psd([totals[key], spectrum])
    return totals


def _telegraph_frame(on: Spectrum, off: Spectrum, inputs: Spectrum, chord: float, dwell: float,
                     fmax_factor: float) -> pd.DataFrame:
    """
    Densidades de campo (T²/Hz) medida e ingresada en (0, f_max]

    La medida es la diferencia on − off sin recortar, con el desbalance de
    ruido blanco entre ambos estados descontado, dividida por la ganancia de
    cuerda y la atenuación del binning.
    """
    if on.psd_stderr is None or off.psd_stderr is None:
        raise InvalidInputError("telegraph needs at least two on and two off segments per dwell time")
    on.require_same_grid(off)
    f = on.frequencies
    difference = on.psd - off.psd
    white = f >= WHITE_FACTOR / (np.pi * dwell)
    if white.sum() >= 10:
        difference = difference - float(np.mean(difference[white]))
    else:
        log_warning(f"Dwell {dwell}s leaves no white band below Nyquist; on/off shot-noise imbalance kept")

    attenuation = spectral.binning_response(f, on.bin_width)
    counts_to_field = on.density_scale() / ((chord * on.bin_width) ** 2 * attenuation)
    keep = (f > 0) & (f <= fmax_factor / (np.pi * dwell))
    input_sigma = inputs.psd_stderr * inputs.density_scale() / attenuation if inputs.psd_stderr is not None \
        else np.full(f.size, np.nan)
    return pd.DataFrame({
        "frequency_hz": f[keep],
        "measured_density": (difference * counts_to_field)[keep],
        "measured_sigma": (np.hypot(on.psd_stderr, off.psd_stderr) * counts_to_field)[keep],
        "input_density": (inputs.density() / attenuation)[keep],
        "input_sigma": input_sigma[keep],
    })


def _telegraph_fits(frame: pd.DataFrame) -> Tuple[FitResult, FitResult]:
    """Ajuste de la traza ingresada y, partiendo de él, de la psd medida"""
    input_sigma = frame["input_sigma"].to_numpy()
    input_fit = fitkit.fit(
        "telegraph", frame["frequency_hz"], frame["input_density"],
        sigma=None if np.isnan(input_sigma).any() else input_sigma,
    )
    measured_fit = fitkit.fit(
        "telegraph", frame["frequency_hz"], frame["measured_density"], sigma=frame["measured_sigma"],
        init=input_fit.params,
    )
    return input_fit, measured_fit


@log_step("telegraph")
def _run_telegraph(ctx: RunContext) -> dict:
    config, acquisition = ctx.config, ctx.config.acquisition
    settings_tg = config.telegraph or TelegraphExperimentConfig()
    drive = drive_for(config)
    digest = config_digest(config)
    step = _grid_step(config)
    width, duration = acquisition.bin_width, acquisition.segment_duration
    off_rate = float(nvmodel.transduce(config.odmr, drive, 0.0))
    fits, results = {}, {}

    for dwell in settings_tg.dwell_times:
        label = _dwell_label(dwell)
        template = settings_tg.template.model_copy(update={
            "mean_dwell": dwell,
            "trace_duration": duration,
            "rng_seed": ctx.seeds(f"telegraph_traces_{label}", 1)[0],
        })
        half = template.amplitude / 2
        chord = float(nvmodel.transduce(config.odmr, drive, half) - nvmodel.transduce(config.odmr, drive, -half))
        chord /= template.amplitude
        traces = signals.generate_telegraph(template)
        signals.write_telegraph_csv(traces, ctx.path(f"telegraph_traces_{label}.csv"))
        schedule = signals.on_off_schedule(template)
        seeds = ctx.seeds(f"telegraph_{label}", len(schedule))
        photons = []

        def segment(j: int):
            trace_id, _, on = schedule[j]
            trace = traces[trace_id]
            if on:
                def rate(t):
                    return nvmodel.transduce(config.odmr, drive, trace.level_at(np.clip(t, 0.0, duration)))
            else:
                def rate(t):
                    return np.full(np.shape(t), off_rate)
            stream = photonsim.simulate_stream(rate, duration, config.detector, seed=seeds[j],
                                               r_max=config.odmr.count_rate, grid_step=step, source_digest=digest)
            photons.append(stream.count)
            return ("on" if on else "off"), spectral.psd(spectral.bin(stream, width), acquisition.window)

        def input_trace(trace_id: int):
            levels = TimeSeries(bin_width=width, counts=traces[trace_id].bin_average(width))
            return "input", spectral.psd(levels, acquisition.window)

        measured = _stream_average(segment, range(len(schedule)))
        inputs = _stream_average(input_trace, range(len(traces)))["input"]
        ctx.photons += sum(photons)

        subtracted = spectral.onoff_subtract(measured["on"], measured["off"])
        spectral.write_spectrum_csv(subtracted.with_metadata(mean_dwell=dwell),
                                    ctx.path(f"telegraph_subtracted_{label}.csv"))
        frame = _telegraph_frame(measured["on"], measured["off"], inputs, chord, dwell, settings_tg.fit_fmax_factor)
        _write_frame(frame, ctx.path(f"telegraph_{label}.csv"))
        input_fit, measured_fit = _telegraph_fits(frame)
        fits[f"input_{label}"], fits[f"measured_{label}"] = input_fit, measured_fit
        results[label] = {"dwell": dwell, "T_input": input_fit.params["T"], "T_measured": measured_fit.params["T"]}
        log_info(f"Telegraph {label}: T measured {measured_fit.params['T'] * 1e3:.4g} ms, "
                 f"input {input_fit.params['T'] * 1e3:.4g} ms")

        plots.plot_fit_overlay(
            [
                {"label": "measured", "x": frame["frequency_hz"], "y": frame["measured_density"].clip(lower=1e-300),
                 "fit": measured_fit},
                {"label": "input trace", "x": frame["frequency_hz"], "y": frame["input_density"], "fit": input_fit},
            ],
            ctx.path(f"telegraph_{label}.png", "plot"), f"{config.name}: telegraph PSD, T = {label}",
            "Frequency (Hz)", "Field PSD (T²/Hz)",
        )

    _write_fits(fits, ctx.path("fits.json"))
    _write_json(results, ctx.path(RESULTS_FILE))
    return results


def _assess_telegraph(run_dir: Path, config: ExperimentConfig) -> List[CheckResult]:
    settings_tg = config.telegraph or TelegraphExperimentConfig()
    tolerance = settings_tg.dwell_tolerance
    checks = []
    for dwell in settings_tg.dwell_times:
        label = _dwell_label(dwell)
        input_fit, measured_fit = _telegraph_fits(pd.read_csv(run_dir / f"telegraph_{label}.csv"))
        t_measured, t_input = measured_fit.params["T"], input_fit.params["T"]
        checks.append(_check(f"dwell:{label}", abs(t_measured / dwell - 1) <= tolerance,
                             f"T = {t_measured * 1e3:.4g} ms, expected {dwell * 1e3:g} ms ± {tolerance:.0%}",
                             t_measured))
        checks.append(_check(f"input_agreement:{label}", abs(t_measured / t_input - 1) <= tolerance,
                             f"measured/input T = {t_measured / t_input:.4f}", t_measured / t_input))
    return checks


# ============================================================================
# run / verify / inspect / bench
# ============================================================================

Pipeline = Callable[..., Tuple[dict, float]]
Assessment = Callable[[Path, ExperimentConfig], List[CheckResult]]

PIPELINES: Dict[str, Tuple[Pipeline, Assessment]] = {
    "sensitivity-table": (_run_sensitivity_table, _assess_sensitivity_table),
    "snr-scaling": (_run_snr_scaling, _assess_snr_scaling),
    "bandwidth-sweep": (_run_bandwidth_sweep, _assess_bandwidth_sweep),
    "lindblad-sweep": (_run_lindblad_sweep, _assess_lindblad_sweep),
    "multitone": (_run_multitone, _assess_multitone),
    "phase-coherent": (_run_phase_coherent, _assess_phase_coherent),
    "telegraph": (_run_telegraph, _assess_telegraph),
}


def write_config(config: ExperimentConfig, path: PathLike) -> Path:
    """JSON legible de la configuración; los infinitos se escriben como Infinity"""
    return _write_json(config.model_dump(mode="python"), Path(path))


def load_config(path: PathLike) -> ExperimentConfig:
    """
    Lee y valida una configuración JSON

    Raises:
        pydantic.ValidationError: campos faltantes o fuera de rango, todos listados
        InvalidInputError: el archivo no existe o no es JSON
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidInputError(f"cannot read config {path}: {e}") from e
    try:
        payload = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"config {path} is not valid JSON: {e}") from e
    return ExperimentConfig.model_validate(payload)


def _build_manifest(ctx: RunContext, started_at: str) -> RunManifest:
    entries = [
        ManifestEntry(
            path=name,
            sha256=sha256_file(ctx.directory / name),
            bytes=(ctx.directory / name).stat().st_size,
            role=role,
        )
        for name, role in sorted(ctx.files.items())
    ]
    return RunManifest(
        tool_version=__version__,
        kind=ctx.config.kind,
        config_digest=config_digest(ctx.config),
        seed=ctx.config.seed,
        started_at=started_at,
        finished_at=_now(),
        files=entries,
    )


def run_directory(config: ExperimentConfig, output_root: Optional[PathLike] = None) -> Path:
    return Path(output_root or get_settings().output_root) / config.name


def read_checks(run_dir: PathLike) -> List[CheckResult]:
    return [CheckResult.model_validate(item) for item in _read_json(Path(run_dir) / CHECKS_FILE)]


def run(config: ExperimentConfig, output_root: Optional[PathLike] = None) -> RunManifest:
    """
    Ejecuta el pipeline del tipo de experimento y escribe el directorio del run

    El directorio final es <output_root>/<config.name>; un run previo con el
    mismo nombre se reemplaza. Ante cualquier error no queda salida parcial.
    """
    final = run_directory(config, output_root)
    staging = final.parent / f".{config.name}.partial"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    ctx = RunContext(config=config, directory=staging)
    started_at = _now()
    start_time = time.time()
    log_info(f"Run '{config.name}' ({config.kind}), seed {config.seed}")
    try:
        write_config(config, ctx.path(CONFIG_FILE, "config"))
        pipeline, assess = PIPELINES[config.kind]
        pipeline(ctx, run_steps=ctx.steps)
        checks = assess(staging, config)
        _write_json([check.model_dump() for check in checks], ctx.path(CHECKS_FILE))
        manifest = _build_manifest(ctx, started_at)
        write_text_atomic(staging / MANIFEST_FILE, manifest.model_dump_json(indent=2))
        if final.exists():
            log_warning(f"Replacing previous run at {final}")
            shutil.rmtree(final)
        os.replace(staging, final)
    except Exception as e:
        shutil.rmtree(staging, ignore_errors=True)
        metrics_collector.log_run({
            "run_id": config.name, "kind": config.kind, "steps": ctx.steps,
            "total_time_ms": (time.time() - start_time) * 1000, "photons_simulated": ctx.photons,
            "success": False, "error": str(e),
        })
        raise

    failed = [check.name for check in checks if not check.passed]
    if failed:
        log_warning(f"Acceptance checks failed: {', '.join(failed)}")
    metrics_collector.log_run({
        "run_id": config.name, "kind": config.kind, "steps": ctx.steps,
        "total_time_ms": (time.time() - start_time) * 1000, "files_written": len(manifest.files),
        "photons_simulated": ctx.photons, "success": True,
    })
    return manifest


def verify(run_dir: PathLike) -> VerificationReport:
    """
    Recalcula checksums, digest y verificaciones de aceptación de un run

    Raises:
        VerificationError: falta el manifiesto o no se puede leer
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_FILE
    if not manifest_path.is_file():
        raise VerificationError(f"no {MANIFEST_FILE} in {run_dir}")
    try:
        manifest = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise VerificationError(f"unreadable manifest in {run_dir}: {e}") from e

    checks: List[CheckResult] = []
    missing = [entry.path for entry in manifest.files if not (run_dir / entry.path).is_file()]
    if missing:
        checks.append(_check("files_present", False, "missing files: " + ", ".join(missing)))
    for entry in manifest.files:
        if entry.path in missing:
            continue
        actual = sha256_file(run_dir / entry.path)
        if actual != entry.sha256:
            checks.append(_check(f"checksum:{entry.path}", False, f"checksum mismatch for {entry.path}"))

    intact = not checks
    if intact:
        checks.append(_check("checksums", True, f"{len(manifest.files)} files match the manifest"))
        config = load_config(run_dir / CONFIG_FILE)
        digest_ok = config_digest(config) == manifest.config_digest
        checks.append(_check("config_digest", digest_ok,
                             "config digest matches" if digest_ok else "config.json does not match the manifest digest"))
        checks.extend(PIPELINES[manifest.kind][1](run_dir, config))
    report = VerificationReport(
        run_dir=str(run_dir), kind=manifest.kind, passed=all(check.passed for check in checks), checks=checks,
    )
    (log_info if report.passed else log_warning)(
        f"Verification of {run_dir}: {'pass' if report.passed else 'FAIL'} ({len(checks)} checks)"
    )
    return report


def inspect(tagfile: PathLike) -> dict:
    """Header de un TagStream binario"""
    header = photonsim.read_tagstream_header(tagfile)
    header["mean_rate"] = header["count"] / header["duration_s"] if header["duration_s"] > 0 else 0.0
    return header


def bench(duration: float = 60.0, rate: float = 72_000.0, bin_width: float = 1e-7, seed: int = 0) -> dict:
    """Throughput de binning + PSD sobre un stream sintético de tasa constante, por segmentos de 1 s"""
    stream = photonsim.simulate_stream(lambda t: np.full(np.shape(t), rate), duration,
                                       DetectorModel(), seed=seed, r_max=rate)
    start = time.perf_counter()
    average = None
    for k in range(int(math.floor(duration))):
        spectrum = spectral.psd(spectral.bin(stream.window(float(k), float(k + 1)), bin_width))
        average = spectrum if average is None else spectral.average_psd([average, spectrum])
    elapsed = time.perf_counter() - start
    result = {
        "duration_s": duration,
        "photons": stream.count,
        "bin_width_s": bin_width,
        "segments": average.n_averages if average is not None else 0,
        "elapsed_s": elapsed,
        "photons_per_s": stream.count / elapsed if elapsed > 0 else math.inf,
    }
    log_info(f"Bench: {stream.count} photons, {result['segments']} segments in {elapsed:.2f}s")
    return result
