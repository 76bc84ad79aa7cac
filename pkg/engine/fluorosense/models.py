"""
Modelos Pydantic para validación de configuración y resultados
Todos los tipos de configuración del simulador viven aquí y se serializan a JSON
"""
import math
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fluorosense.logger import log_warning

SCHEMA_VERSION = "1"

# Valor estándar del espín electrónico del NV
NV_GYROMAGNETIC_RATIO = 2.8024e10  # Hz/T
NV_ANGLE_DEG = 54.7


def wrap_phase(phase: float) -> float:
    """Normaliza una fase a [-π, π)"""
    return (phase + math.pi) % (2 * math.pi) - math.pi


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ============================================================================
# Señales
# ============================================================================

class ToneSpec(_Frozen):
    """Tono sinusoidal A·cos(2πft + φ)"""
    kind: Literal["tone"] = "tone"
    frequency: float = Field(..., ge=0, description="Frecuencia (Hz)")
    amplitude: float = Field(..., ge=0, description="Amplitud (T)")
    phase: float = Field(0.0, description="Fase (rad), normalizada a [-π, π)")

    @field_validator("phase")
    @classmethod
    def _wrap(cls, v: float) -> float:
        return wrap_phase(v)


class PhaseModSpec(_Frozen):
    """Portadora modulada en fase A·cos(2πf_c t + β·sin(2πf_m t))"""
    kind: Literal["phase_mod"] = "phase_mod"
    carrier: float = Field(..., gt=0, description="Frecuencia portadora (Hz)")
    mod_frequency: float = Field(..., gt=0, description="Frecuencia de modulación (Hz)")
    mod_depth: float = Field(..., ge=0, description="Profundidad de modulación (rad)")
    amplitude: float = Field(..., ge=0, description="Amplitud (T)")

    @model_validator(mode="after")
    def _carrier_above_mod(self):
        if not self.carrier > self.mod_frequency:
            raise ValueError("carrier must be greater than mod_frequency")
        return self


class TelegraphSpec(_Frozen):
    """Ruido telegráfico de dos estados ±A/2 con permanencias exponenciales

    A es la amplitud pico a pico (amplitud completa de conmutación del modelo telegráfico).
    El protocolo on/off repite cada traza `on_repeats` veces, luego mide
    `off_repeats` segmentos sin señal, durante `cycles` ciclos.
    """
    kind: Literal["telegraph"] = "telegraph"
    mean_dwell: float = Field(..., gt=0, description="Permanencia media T (s)")
    amplitude: float = Field(..., ge=0, description="Amplitud pico a pico A (T)")
    trace_duration: float = Field(1.0, gt=0, description="Duración de cada traza (s)")
    n_traces: int = Field(1, ge=1, description="Número de trazas independientes")
    rng_seed: int = Field(0, description="Semilla del generador")
    on_repeats: int = Field(30, ge=1, description="Segmentos con la señal encendida por ciclo")
    off_repeats: int = Field(30, ge=0, description="Segmentos con la señal apagada por ciclo")
    cycles: int = Field(1, ge=1, description="Ciclos on/off por traza")

    @model_validator(mode="after")
    def _enough_transitions(self):
        if self.trace_duration < 10 * self.mean_dwell:
            log_warning(
                f"Telegraph trace of {self.trace_duration}s holds fewer than 10 mean dwells "
                f"({self.mean_dwell}s): too few transitions for PSD estimation"
            )
        return self


SignalComponent = Annotated[Union[ToneSpec, PhaseModSpec, TelegraphSpec], Field(discriminator="kind")]


class SignalSpec(_Frozen):
    """Suma de componentes proyectada sobre el eje NV"""
    components: List[SignalComponent] = Field(default_factory=list, description="Componentes de b(t)")
    projection_angle: float = Field(
        math.radians(NV_ANGLE_DEG), description="Ángulo entre eje NV y campo aplicado (rad)"
    )

    @property
    def projection_factor(self) -> float:
        return math.cos(self.projection_angle)

    def telegraph_components(self) -> List[TelegraphSpec]:
        return [c for c in self.components if isinstance(c, TelegraphSpec)]


# ============================================================================
# Modelo NV / ODMR
# ============================================================================

class OdmrParams(_Frozen):
    """Parámetros de la línea ODMR (todos los símbolos de la fórmula de sensibilidad)"""
    center_freq: float = Field(2.87e9, description="f₀ (Hz)")
    linewidth: float = Field(..., gt=0, description="Γ, FWHM (Hz)")
    contrast: float = Field(..., gt=0, lt=1, description="C, fracción de caída")
    count_rate: float = Field(..., gt=0, description="R (fotones/s)")
    gyromagnetic_ratio: float = Field(NV_GYROMAGNETIC_RATIO, gt=0, description="γ (Hz/T)")
    lineshape_kind: Literal["lorentzian", "hyperfine_triplet"] = "lorentzian"
    hyperfine_splitting: float = Field(2.1e6, ge=0, description="Separación hiperfina (Hz)")


class DrivePoint(_Frozen):
    """Frecuencia fija de microondas durante el sensado"""
    mw_freq: float = Field(..., description="Frecuencia de microondas (Hz)")

    @field_validator("mw_freq")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("mw_freq must be finite")
        return v


# ============================================================================
# Detección de fotones
# ============================================================================

class DetectorModel(_Frozen):
    """Filtro de respuesta de la tasa y tiempo muerto del detector"""
    bandwidth: float = Field(math.inf, gt=0, description="f_c del filtro de tasa (Hz), inf = sin filtro")
    rolloff_exponent: float = Field(1.0, ge=0.5, description="Exponente b del roll-off")
    dead_time: float = Field(0.0, ge=0, le=50e-9, description="Tiempo muerto (s)")

    @property
    def n_poles(self) -> int:
        return max(1, math.ceil(self.rolloff_exponent))


class CalibrationPoint(_Frozen):
    power: float = Field(..., gt=0, description="Potencia láser (W)")
    cutoff: float = Field(..., gt=0, description="f_c (Hz)")


# Marcador de posición NO autoritativo: sólo se conoce la tendencia en 30–300 µW
PLACEHOLDER_CALIBRATION: Tuple[CalibrationPoint, ...] = (
    CalibrationPoint(power=30e-6, cutoff=10e3),
    CalibrationPoint(power=100e-6, cutoff=40e3),
    CalibrationPoint(power=200e-6, cutoff=100e3),
    CalibrationPoint(power=300e-6, cutoff=160e3),
)


# ============================================================================
# Lindblad
# ============================================================================

class LindbladParams(_Frozen):
    """Sistema de dos niveles en el marco rotante de microondas"""
    detuning: float = Field(0.0, description="Δ (rad/s)")
    rabi: float = Field(0.0, ge=0, description="γ_e·B₁ (rad/s)")
    gamma1: float = Field(0.0, ge=0, description="Γ₁ (1/s), L₁ = √(Γ₁/2)σ₋")
    gamma2: float = Field(0.0, ge=0, description="Γ₂ (1/s), L₂ = √(Γ₂/2)σ_z")
    gyromagnetic_ratio_e: float = Field(2 * math.pi * NV_GYROMAGNETIC_RATIO, gt=0, description="γ_e (rad/s/T)")
    signal: ToneSpec = Field(default_factory=lambda: ToneSpec(frequency=0.0, amplitude=0.0))
    saturation: float = Field(0.0, ge=0, description="s usado para derivar Γ₁, Γ₂")


class SaturationMap(_Frozen):
    """Γ₁ = Γ₁⁰(1+s), Γ₂ = Γ₂⁰(1+αs); valores por defecto son marcadores de posición"""
    gamma1_0: float = Field(1.0e4, gt=0)
    gamma2_0: float = Field(5.0e4, ge=0)
    alpha: float = Field(0.0, ge=0)

    def apply(self, base: LindbladParams, s: float) -> LindbladParams:
        return base.model_copy(update={
            "gamma1": self.gamma1_0 * (1 + s),
            "gamma2": self.gamma2_0 * (1 + self.alpha * s),
            "saturation": s,
        })


# ============================================================================
# Phase lock
# ============================================================================

class ReferenceSpec(_Frozen):
    """Referencia bicromática ω₁, ω₂ (Hz)"""
    omega1: float = Field(..., gt=0, description="ω₁ (Hz)")
    omega2: float = Field(..., gt=0, description="ω₂ (Hz)")
    min_amplitude: float = Field(0.0, ge=0, description="Amplitud mínima de referencia (T)")
    max_phase_error: float = Field(0.1, gt=0, description="Error estándar de fase máximo (rad)")

    @model_validator(mode="after")
    def _positive_spacing(self):
        if not self.omega2 > self.omega1:
            raise ValueError("omega2 must be greater than omega1 (δω > 0)")
        return self

    @property
    def spacing(self) -> float:
        return self.omega2 - self.omega1


# ============================================================================
# Ajustes
# ============================================================================

class BandwidthModel(_Frozen):
    """Roll-off de ancho de banda: S(f) = A/(1+(f/f_c)²)^b + c"""
    A: float = Field(..., gt=0)
    f_c: float = Field(..., gt=0)
    b: float = Field(..., gt=0)
    c: float = Field(0.0, ge=0)


class TelegraphModel(_Frozen):
    """PSD telegráfica: S(f) = A²/(2T[(1/T)² + (πf)²])"""
    A: float = Field(..., gt=0, description="Amplitud de conmutación (T)")
    T: float = Field(..., gt=0, description="Permanencia media (s)")


class FitResult(BaseModel):
    """Resultado de un ajuste no lineal"""
    model: str
    params: Dict[str, float]
    sigmas: Dict[str, float]
    residual: float = Field(..., ge=0, description="Norma del residuo ponderado")
    converged: bool
    iterations: int
    clamped: List[str] = Field(default_factory=list, description="Parámetros fijados en su cota")
    residual_history: List[float] = Field(default_factory=list, exclude=True)

    @property
    def authoritative(self) -> bool:
        return self.converged

    def evaluate(self, x):
        from fluorosense.fitkit import model_function
        return model_function(self.model, x, self.params)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


# ============================================================================
# Experimentos
# ============================================================================

ExperimentKind = Literal[
    "sensitivity-table", "snr-scaling", "bandwidth-sweep", "lindblad-sweep",
    "multitone", "phase-coherent", "telegraph",
]


class AcquisitionConfig(_Frozen):
    """Segmentación de la adquisición (segmentos de 1 s, 30 o 60 repeticiones)"""
    segment_duration: float = Field(1.0, gt=0, description="Duración de segmento (s)")
    n_segments: int = Field(30, ge=1, description="Número de segmentos")
    bin_width: float = Field(1e-5, gt=0, description="Ancho de bin (s)")
    window: Literal["none", "hann"] = "none"
    save_tagstreams: int = Field(1, ge=0, description="Segmentos cuyo TagStream se guarda")


class SnrScalingConfig(_Frozen):
    block_sizes: List[int] = Field(default_factory=lambda: [30, 50, 100, 150, 300])
    band: Tuple[float, float] = Field((100.0, 20e3), description="Banda del piso de ruido (Hz)")
    exclusion_bins: int = Field(3, ge=0)
    exponent_tolerance: float = Field(0.05, gt=0)
    domain: Literal["power", "amplitude"] = Field(
        "amplitude",
        description="amplitude: media compleja de segmentos contiguos; power: promedio incoherente de la psd",
    )


class BandwidthSweepConfig(_Frozen):
    laser_powers: List[float] = Field(default_factory=lambda: [30e-6, 100e-6, 300e-6])
    calibration: List[CalibrationPoint] = Field(default_factory=lambda: list(PLACEHOLDER_CALIBRATION))
    frequency_factors: List[float] = Field(
        default_factory=lambda: [0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 3.0, 5.0, 7.0, 10.0]
    )
    modulation_depth: float = Field(0.5, gt=0, le=1)
    photons_per_point: float = Field(1.6e5, gt=0)
    cycles_per_cutoff: float = Field(2000.0, gt=0, description="Duración = cycles/f_c")


class LindbladSweepConfig(_Frozen):
    base: LindbladParams = Field(default_factory=lambda: LindbladParams(detuning=3.0e4, rabi=3.0e4))
    saturation_map: SaturationMap = Field(default_factory=SaturationMap)
    s_values: List[float] = Field(default_factory=lambda: [0.0, 3.0, 9.0])
    frequencies: List[float] = Field(
        default_factory=lambda: [float(f) for f in (100, 200, 500, 1e3, 2e3, 5e3, 1e4, 2e4, 5e4, 1e5, 2e5)]
    )
    signal_amplitude: float = Field(1e-8, ge=0, description="Amplitud de b(t) (T)")
    offset: float = Field(1e-8, ge=0, description="Piso de ruido c")
    dt_factor: float = Field(0.1, gt=0, le=0.1)


class MultitoneConfig(_Frozen):
    band: Tuple[float, float] = Field((1e3, 200e3))
    n_peaks: Optional[int] = Field(None, description="Picos esperados (por defecto, uno por tono)")


class PhaseCoherentConfig(_Frozen):
    reference: ReferenceSpec = Field(default_factory=lambda: ReferenceSpec(omega1=10e3, omega2=11e3))
    n_traces: int = Field(100, ge=1)
    max_offset: float = Field(1.0, gt=0, description="Inicio aleatorio de cada traza en [0, max_offset) s")
    shot_noise: bool = True
    comb_range: Tuple[int, int] = Field((-5, 5))
    amplitude_tolerance: float = Field(0.05, gt=0)
    phase_tolerance: float = Field(1e-2, gt=0)


class TelegraphExperimentConfig(_Frozen):
    dwell_times: List[float] = Field(default_factory=lambda: [1e-3, 1.67e-3, 5e-3])
    template: TelegraphSpec = Field(
        default_factory=lambda: TelegraphSpec(mean_dwell=1e-3, amplitude=3e-4, n_traces=200,
                                              on_repeats=30, off_repeats=30, cycles=4)
    )
    fit_fmax_factor: float = Field(20.0, gt=0, description="f_max = factor/(πT)")
    dwell_tolerance: float = Field(0.10, gt=0)


class ExperimentConfig(_Frozen):
    """Configuración completa de un experimento"""
    name: str = Field(..., min_length=1, description="Nombre del run (subdirectorio de salida)")
    kind: ExperimentKind
    seed: int = Field(..., description="Semilla maestra")
    odmr: OdmrParams = Field(default_factory=lambda: OdmrParams(linewidth=9.6e6, contrast=0.1162, count_rate=72000))
    drive: Optional[DrivePoint] = Field(None, description="Por defecto, el punto de máxima pendiente")
    signal: Optional[SignalSpec] = None
    detector: DetectorModel = Field(default_factory=DetectorModel)
    acquisition: AcquisitionConfig = Field(default_factory=AcquisitionConfig)
    snr: Optional[SnrScalingConfig] = None
    bandwidth: Optional[BandwidthSweepConfig] = None
    lindblad: Optional[LindbladSweepConfig] = None
    multitone: Optional[MultitoneConfig] = None
    phase: Optional[PhaseCoherentConfig] = None
    telegraph: Optional[TelegraphExperimentConfig] = None

    @model_validator(mode="after")
    def _sub_configs_for_kind(self):
        needs_signal = {"snr-scaling", "multitone", "phase-coherent"}
        if self.kind in needs_signal and (self.signal is None or not self.signal.components):
            raise ValueError(f"field 'signal' with at least one component is required for kind '{self.kind}'")
        if self.kind == "snr-scaling":
            tones = [c for c in self.signal.components if isinstance(c, ToneSpec)]
            if not tones:
                raise ValueError("field 'signal' must contain a tone for kind 'snr-scaling'")
            snr = self.snr or SnrScalingConfig()
            if max(snr.block_sizes) > self.acquisition.n_segments:
                raise ValueError("field 'snr.block_sizes' exceeds 'acquisition.n_segments'")
            cycles = tones[0].frequency * self.acquisition.segment_duration
            if snr.domain == "amplitude" and abs(cycles - round(cycles)) > 1e-6:
                raise ValueError(
                    "field 'signal' tone must complete an integer number of cycles per segment "
                    "for snr.domain 'amplitude'"
                )
        if self.kind == "phase-coherent":
            ref = (self.phase or PhaseCoherentConfig()).reference
            res = 1.0 / self.acquisition.segment_duration
            for name, value in (("omega1", ref.omega1), ("omega2", ref.omega2)):
                if abs(value / res - round(value / res)) > 1e-9:
                    raise ValueError(f"field 'phase.reference.{name}' must be a multiple of the resolution {res} Hz")
            if not any(isinstance(c, PhaseModSpec) for c in self.signal.components):
                raise ValueError("field 'signal' must contain a phase_mod component for kind 'phase-coherent'")
        return self


class ManifestEntry(BaseModel):
    path: str
    sha256: str
    bytes: int
    role: Literal["data", "plot", "config"] = "data"


class RunManifest(BaseModel):
    """Manifiesto de un run: digest, versión y archivos con checksums"""
    schema_version: str = SCHEMA_VERSION
    tool_version: str
    kind: ExperimentKind
    config_digest: str
    seed: int
    started_at: str
    finished_at: str
    files: List[ManifestEntry] = Field(default_factory=list)


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
    measured: Optional[float] = None


class VerificationReport(BaseModel):
    run_dir: str
    kind: Optional[str] = None
    passed: bool
    checks: List[CheckResult] = Field(default_factory=list)
