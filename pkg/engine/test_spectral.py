"""
Tests de la cadena de análisis espectral
"""
import numpy as np
import pandas as pd
import pytest

from fluorosense import spectral
from fluorosense.errors import FitRefusedError, GridMismatchError, InvalidInputError
from fluorosense.models import DetectorModel, DrivePoint, SignalSpec, ToneSpec
from fluorosense.nvmodel import sensitivity, sensing_point, transduce
from fluorosense.photonsim import expected_counts, simulate_stream, write_tagstream
from fluorosense.series import Spectrum, TagStream, TimeSeries
from fluorosense.signals import evaluate


def series_of(values, width=1e-3) -> TimeSeries:
    return TimeSeries(bin_width=width, counts=np.asarray(values, dtype=float))


def poisson_spectra(n, mean=10.0, size=4096, seed=0):
    rng = np.random.default_rng(seed)
    return [spectral.psd(series_of(rng.poisson(mean, size))) for _ in range(n)]


# ============================================================================
# Binning
# ============================================================================

def test_bin_reports_nyquist():
    stream = TagStream(timestamps=np.array([5, 150_000], dtype=np.int64), duration=1e-3)
    series = spectral.bin(stream, 100e-9)
    assert series.n_bins == 10_000
    assert spectral.psd(series).nyquist == pytest.approx(5e6)


def test_bin_empty_stream():
    stream = TagStream(timestamps=np.empty(0, dtype=np.int64), duration=1e-6)
    assert not spectral.bin(stream, 1e-8).counts.any()


def test_bin_boundary_convention():
    stream = TagStream(timestamps=np.array([0, 999, 1000, 1999, 2000, 3000], dtype=np.int64), duration=3e-9)
    counts = spectral.bin(stream, 1e-9).counts
    assert counts.tolist() == [2, 2, 2]
    assert counts.sum() == 6


def test_bin_drops_partial_trailing_interval():
    stream = TagStream(timestamps=np.array([100, 1100, 2200, 2400], dtype=np.int64), duration=2.5e-9)
    counts = spectral.bin(stream, 1e-9).counts
    assert counts.tolist() == [1, 1]


def test_bin_keeps_tag_at_duration_on_a_bin_edge():
    stream = TagStream(timestamps=np.array([500, 2000], dtype=np.int64), duration=2e-9)
    assert spectral.bin(stream, 1e-9).counts.tolist() == [1, 1]


def test_bin_file_drops_partial_trailing_interval(tmp_path):
    stream = TagStream(timestamps=np.array([100, 1100, 2200, 2400], dtype=np.int64), duration=2.5e-9)
    path = write_tagstream(stream, tmp_path / "tail.bin")
    assert spectral.bin_file(path, 1e-9).counts.tolist() == [1, 1]


def test_bin_rejects_sub_resolution_width():
    stream = TagStream(timestamps=np.empty(0, dtype=np.int64), duration=1e-9)
    with pytest.raises(InvalidInputError):
        spectral.bin(stream, 1e-12)


def test_bin_is_a_streaming_fold():
    rng = np.random.default_rng(4)
    stream = TagStream(timestamps=np.sort(rng.choice(10**9, 5000, replace=False)).astype(np.int64), duration=1e-3)
    whole = spectral.bin(stream, 1e-6).counts
    halves = [spectral.bin(stream.window(a, b), 1e-6).counts for a, b in ((0, 5e-4), (5e-4, 1e-3))]
    np.testing.assert_array_equal(whole, np.concatenate(halves))


def test_bin_file_matches_in_memory(tmp_path):
    rate = lambda t: np.full(np.shape(t), 2e5)
    stream = simulate_stream(rate, 0.05, DetectorModel(), seed=6, r_max=2e5)
    path = write_tagstream(stream, tmp_path / "tags.bin")
    np.testing.assert_array_equal(spectral.bin_file(path, 1e-5).counts, spectral.bin(stream, 1e-5).counts)


# ============================================================================
# PSD
# ============================================================================

def test_cosine_peak_height():
    n, k0, a = 1000, 50, 3.0
    spectrum = spectral.psd(series_of(a * np.cos(2 * np.pi * k0 * np.arange(n) / n)))
    assert spectrum.psd[k0] == pytest.approx((a * n / 2) ** 2, rel=1e-12)
    assert spectrum.frequencies.size == n // 2 + 1
    assert spectrum.resolution == pytest.approx(1.0)


def test_hann_window_keeps_peak_height():
    n, k0, a = 1000, 50, 3.0
    spectrum = spectral.psd(series_of(a * np.cos(2 * np.pi * k0 * np.arange(n) / n)), window="hann")
    assert spectrum.psd[k0] == pytest.approx((a * n / 2) ** 2, rel=1e-12)
    assert spectrum.window == "hann"


def test_constant_series_has_zero_psd():
    np.testing.assert_allclose(spectral.psd(series_of(np.full(64, 7.0))).psd, 0.0, atol=1e-20)


@pytest.mark.parametrize("n", [1000, 1001])
def test_parseval(n):
    x = np.random.default_rng(n).poisson(20, n).astype(float)
    spectrum = spectral.psd(series_of(x))
    total = np.sum(spectrum.fold_weights() * spectrum.psd) / n
    assert total == pytest.approx(np.sum((x - x.mean()) ** 2), rel=1e-9)


def test_psd_needs_two_bins():
    with pytest.raises(InvalidInputError):
        spectral.psd(series_of([1.0]))


def test_binning_response_is_sinc_squared():
    assert spectral.binning_response(0.0, 1e-6) == pytest.approx(1.0)
    assert spectral.binning_response(5e5, 1e-6) == pytest.approx((2 / np.pi) ** 2)


# ============================================================================
# Promedios y sustracción
# ============================================================================

def test_average_of_identical_spectra():
    (single,) = poisson_spectra(1)
    average = spectral.average_psd([single] * 5)
    np.testing.assert_allclose(average.psd, single.psd, rtol=1e-12)
    assert average.n_averages == 5


def test_average_is_associative():
    a, b, c = poisson_spectra(3, seed=1)
    nested = spectral.average_psd([spectral.average_psd([a, b]), c])
    flat = spectral.average_psd([a, b, c])
    np.testing.assert_allclose(nested.psd, flat.psd, rtol=1e-12)
    np.testing.assert_allclose(nested.psd_stderr, flat.psd_stderr, rtol=1e-9)
    assert nested.n_averages == 3


def test_average_preserves_common_peak():
    n = 4096
    tone = 50 * np.cos(2 * np.pi * 256 * np.arange(n) / n)
    spectra = [spectral.psd(series_of(tone)) for _ in range(4)]
    assert spectral.average_psd(spectra).psd[256] == spectra[0].psd[256]


def test_floor_variance_shrinks_with_averaging():
    singles = poisson_spectra(16, seed=2)
    averaged = [spectral.average_psd(poisson_spectra(16, seed=100 + i)) for i in range(8)]
    band = slice(10, 2000)
    single_var = np.mean([np.var(s.psd[band]) for s in singles])
    averaged_var = np.mean([np.var(s.psd[band]) for s in averaged])
    assert averaged_var / single_var == pytest.approx(1 / 16, rel=0.2)


def test_stderr_matches_floor_scatter():
    average = spectral.average_psd(poisson_spectra(30, seed=3))
    band = slice(10, 2000)
    assert np.median(average.psd_stderr[band]) == pytest.approx(np.mean(average.psd[band]) / np.sqrt(30), rel=0.15)


def test_average_rejects_grid_mismatch():
    (a,) = poisson_spectra(1, size=4096)
    (b,) = poisson_spectra(1, size=2048)
    with pytest.raises(GridMismatchError):
        spectral.average_psd([a, b])


def test_block_averages_are_disjoint():
    spectra = poisson_spectra(10, size=256, seed=4)
    blocks = spectral.block_averages(spectra, [3, 5, 10])
    assert [len(blocks[k]) for k in (3, 5, 10)] == [3, 2, 1]
    np.testing.assert_allclose(blocks[5][1].psd, spectral.average_psd(spectra[5:]).psd)


def test_average_leaves_complex_amplitudes_undefined():
    spectra = poisson_spectra(3, size=256, seed=5)
    average = spectral.average_psd(spectra)
    assert np.isnan(average.amplitudes).all()
    np.testing.assert_array_equal(spectral.average_psd(spectra[:1]).amplitudes, spectra[0].amplitudes)


def test_coherent_mean_keeps_phase_stable_tone():
    n = 1000
    tone = 5 * np.cos(2 * np.pi * 40 * np.arange(n) / n + 0.3)
    rng = np.random.default_rng(12)
    spectra = [spectral.psd(series_of(tone + rng.normal(0, 1, n))) for _ in range(50)]
    mean = spectral.coherent_mean(spectra)
    assert mean.n_averages == 50
    assert mean.metadata["averaging"] == "coherent"
    assert np.abs(mean.amplitudes[40]) == pytest.approx(5 * n / 2, rel=0.02)
    assert np.median(mean.psd[100:400]) == pytest.approx(n / 50 * np.log(2), rel=0.25)


def test_coherent_mean_is_associative():
    spectra = poisson_spectra(4, size=512, seed=6)
    nested = spectral.coherent_mean([spectral.coherent_mean(spectra[:3]), spectra[3]])
    np.testing.assert_allclose(nested.amplitudes, spectral.coherent_mean(spectra).amplitudes, rtol=1e-12)


def test_coherent_mean_rejects_incoherent_average():
    spectra = poisson_spectra(2, size=256, seed=7)
    with pytest.raises(InvalidInputError):
        spectral.coherent_mean([spectral.average_psd(spectra), spectra[0]])


def test_coherent_block_averages():
    spectra = poisson_spectra(6, size=256, seed=8)
    blocks = spectral.block_averages(spectra, [2, 3], coherent=True)
    np.testing.assert_allclose(blocks[3][1].amplitudes, spectral.coherent_mean(spectra[3:]).amplitudes)


def test_onoff_equal_spectra_subtract_to_zero():
    average = spectral.average_psd(poisson_spectra(4))
    result = spectral.onoff_subtract(average, average)
    np.testing.assert_array_equal(result.psd, 0.0)
    assert result.metadata["clamped_bins"] == 0


def test_onoff_clamps_and_flags_negative_bins():
    n = 1024
    base = np.full(n, 10.0)
    on = spectral.psd(series_of(base + np.cos(2 * np.pi * 30 * np.arange(n) / n)))
    off = spectral.psd(series_of(base + 5 * np.cos(2 * np.pi * 100 * np.arange(n) / n)))
    result = spectral.onoff_subtract(on, off)
    assert result.psd[100] == 0.0
    assert result.psd[30] == pytest.approx(on.psd[30])
    assert result.metadata["clamped_bins"] >= 1
    assert 100 in result.metadata["clamped_indices"]


def test_onoff_rejects_mismatched_averages():
    spectra = poisson_spectra(3)
    with pytest.raises(GridMismatchError):
        spectral.onoff_subtract(spectral.average_psd(spectra[:2]), spectra[2])


def test_onoff_removes_common_drift():
    rng = np.random.default_rng(8)
    n, width = 1000, 1e-3
    t = (np.arange(n) + 0.5) * width
    drift = 2e3 * np.cos(2 * np.pi * 1.0 * t)
    bump = 500 * np.cos(2 * np.pi * 200.0 * t)
    rate_on, rate_off = 1e4 + drift + bump, 1e4 + drift

    def averaged(rate):
        return spectral.average_psd([spectral.psd(series_of(rng.poisson(rate * width), width)) for _ in range(30)])

    on, off = averaged(rate_on), averaged(rate_off)
    result = spectral.onoff_subtract(on, off)
    noise = np.median(on.psd[300:480])
    assert on.psd[1] > 100 * noise
    assert result.psd[1] < 0.01 * on.psd[1]
    expected_bump = (0.5 * n / 2) ** 2
    assert result.psd[200] == pytest.approx(expected_bump, abs=4 * result.psd_stderr[200] + noise)


# ============================================================================
# Piso de ruido y SNR
# ============================================================================

def test_noise_floor_is_robust_to_spurious_peak():
    (spectrum,) = poisson_spectra(1, size=8192, seed=9)
    spectrum = spectral.average_psd([spectrum] + poisson_spectra(29, size=8192, seed=10))
    base, _ = spectral.noise_floor(spectrum, (10, 4000))
    spiked_psd = spectrum.psd.copy()
    spiked_psd[2000] *= 1e6
    spiked = Spectrum(spectrum.frequencies, spectrum.amplitudes, spiked_psd, spectrum.bin_width, spectrum.duration)
    changed, _ = spectral.noise_floor(spiked, (10, 4000), exclude=[500.0])
    assert abs(changed / base - 1) < 0.05


def test_noise_floor_excludes_known_peaks():
    (spectrum,) = poisson_spectra(1, size=4096, seed=11)
    psd = spectrum.psd.copy()
    psd[1000:1003] = 1e12
    spiked = Spectrum(spectrum.frequencies, spectrum.amplitudes, psd, spectrum.bin_width, spectrum.duration)
    f_peak = spectrum.frequencies[1001]
    _, sigma_excluded = spectral.noise_floor(spiked, (1, 2000), exclude=[f_peak])
    _, sigma_plain = spectral.noise_floor(spectrum, (1, 2000), exclude=[f_peak])
    assert sigma_excluded == pytest.approx(sigma_plain)


def _noiseless_runs():
    n = 1000
    tone = 10 * np.cos(2 * np.pi * 100 * np.arange(n) / n)
    single = spectral.psd(series_of(tone))
    return [spectral.average_psd([single] * k) for k in (1, 3, 10, 30)]


def test_snr_noiseless_input_refuses_fit():
    with pytest.raises(FitRefusedError) as excinfo:
        spectral.snr_scaling(_noiseless_runs(), 100.0, band=(10, 400))
    partial = excinfo.value.partial
    assert np.all(partial.floor == 0)


def test_snr_needs_a_decade():
    with pytest.raises(InvalidInputError):
        spectral.snr_scaling(_noiseless_runs()[:3], 100.0, band=(10, 400))


def test_snr_refused_when_signal_below_floor():
    runs = []
    for k, seed in zip((1, 3, 10, 30), range(4)):
        average = spectral.average_psd(poisson_spectra(k, size=1000, seed=seed))
        psd = average.psd.copy()
        psd[100] = 0.0
        runs.append(Spectrum(average.frequencies, average.amplitudes, psd, average.bin_width,
                             average.duration, n_averages=k))
    with pytest.raises(FitRefusedError):
        spectral.snr_scaling(runs, 100.0, band=(10, 400))


def _gaussian_tone_segments(n_segments, amplitude, seed, n=4000, k0=200):
    """Segmentos contiguos de un tono sobre la grilla con ruido N(0, 1)"""
    rng = np.random.default_rng(seed)
    tone = amplitude * np.cos(2 * np.pi * k0 * np.arange(n) / n)
    return [spectral.psd(series_of(tone + rng.normal(0.0, 1.0, n))) for _ in range(n_segments)]


def test_amplitude_snr_grows_as_square_root_of_time():
    spectra = _gaussian_tone_segments(200, 0.1, seed=13)
    blocks = spectral.block_averages(spectra, [10, 20, 50, 100, 200], coherent=True)
    scaling = spectral.snr_scaling([blocks[k] for k in sorted(blocks)], 50.0, band=(10.0, 450.0),
                                   domain="amplitude")
    assert scaling.domain == "amplitude"
    assert scaling.b == pytest.approx(0.5, abs=0.07)
    # Segmentos de 4 s: |X|² del tono = (0.1·2000)², el del ruido = 4000; SNR² = 2.5·t
    assert scaling.A * 200.0**scaling.b == pytest.approx(np.sqrt(2.5 * 200.0), rel=0.06)


def test_amplitude_sensitivity_does_not_depend_on_segment_length():
    spectra = _gaussian_tone_segments(200, 0.1, seed=14)
    blocks = spectral.block_averages(spectra, [10, 20, 50, 100, 200], coherent=True)
    scaling = spectral.snr_scaling([blocks[k] for k in sorted(blocks)], 50.0, band=(10.0, 450.0),
                                   domain="amplitude")
    eta = spectral.empirical_sensitivity(scaling, 1e-6, segment_duration=1.0)
    assert eta == pytest.approx(1e-6 / (2 * scaling.A))
    assert spectral.empirical_sensitivity(scaling, 1e-6, segment_duration=10.0) == eta


def test_snr_rejects_unknown_domain():
    with pytest.raises(InvalidInputError):
        spectral.snr_scaling(_noiseless_runs(), 100.0, band=(10, 400), domain="phase")


def test_peak_power_quadruples_with_doubled_amplitude(nv32):
    drive = DrivePoint(mw_freq=sensing_point(nv32))
    peaks = []
    for amplitude in (1e-6, 2e-6):
        spec = SignalSpec(components=[ToneSpec(frequency=1234.0, amplitude=amplitude)], projection_angle=0.0)
        series = expected_counts(lambda t: transduce(nv32, drive, evaluate(spec, t)), 1.0, 1e-4, DetectorModel())
        spectrum = spectral.psd(series)
        peaks.append(spectrum.psd[spectrum.bin_index(1234.0)])
    assert peaks[1] / peaks[0] == pytest.approx(4.0, rel=1e-3)


def _segment_spectra(params, amplitude, n_segments, seed, frequency=1234.0, duration=1.0, bin_width=1e-4):
    drive = DrivePoint(mw_freq=sensing_point(params))
    spec = SignalSpec(components=[ToneSpec(frequency=frequency, amplitude=amplitude)], projection_angle=0.0)
    seeds = np.random.SeedSequence(seed).generate_state(n_segments)
    spectra = []
    for k in range(n_segments):
        rate = lambda t, k=k: transduce(params, drive, evaluate(spec, t + k * duration))
        stream = simulate_stream(rate, duration, DetectorModel(), seed=int(seeds[k]), r_max=params.count_rate)
        spectra.append(spectral.psd(spectral.bin(stream, bin_width)))
    return spectra


@pytest.mark.slow
def test_shot_noise_snr_scaling(nv32):
    """Tono de 4.5 µT en NV32: por debajo del piso en cada segmento, resuelto por la media compleja"""
    amplitude = 4.5e-6
    spectra = _segment_spectra(nv32, amplitude, 600, seed=2024, frequency=123.4, duration=10.0, bin_width=1e-3)
    blocks = spectral.block_averages(spectra, [60, 100, 200, 300, 600], coherent=True)
    runs = [blocks[k] for k in sorted(blocks)]
    scaling = spectral.snr_scaling(runs, 123.4, band=(10.0, 450.0), domain="amplitude")
    assert scaling.b == pytest.approx(0.5, abs=0.05)
    assert scaling.times[0] == pytest.approx(600.0)

    empirical = spectral.empirical_sensitivity(scaling, amplitude, segment_duration=10.0)
    ratio = empirical / sensitivity(nv32)
    assert 1 / 1.5 <= ratio <= 1.5


@pytest.mark.slow
def test_power_snr_scaling_with_strong_tone(nv32):
    amplitude = 60e-6
    spectra = _segment_spectra(nv32, amplitude, 300, seed=2024)
    blocks = spectral.block_averages(spectra, [30, 50, 100, 150, 300])
    scaling = spectral.snr_scaling([blocks[k] for k in sorted(blocks)], 1234.0, band=(100.0, 4500.0))
    assert scaling.b == pytest.approx(0.5, abs=0.05)

    empirical = spectral.empirical_sensitivity(scaling, amplitude, segment_duration=1.0)
    assert 1 / 1.5 <= empirical / sensitivity(nv32) <= 1.5


def test_spectrum_csv_round_trip(tmp_path):
    average = spectral.average_psd(poisson_spectra(3, size=64))
    path = spectral.write_spectrum_csv(average.with_metadata(label="demo"), tmp_path / "spectrum.csv")
    header = spectral.read_spectrum_header(path)
    assert header["n_averages"] == "3"
    assert header["convention"] == spectral.CONVENTION
    loaded = spectral.read_spectrum_csv(path)
    np.testing.assert_array_equal(loaded.psd, average.psd)
    assert np.isnan(loaded.amplitudes).all()
    assert loaded.n_averages == 3
    assert loaded.metadata["label"] == "demo"


def test_incoherent_average_csv_leaves_re_im_empty(tmp_path):
    path = spectral.write_spectrum_csv(spectral.average_psd(poisson_spectra(2, size=64)), tmp_path / "avg.csv")
    frame = pd.read_csv(path, comment="#")
    assert frame["re"].isna().all() and frame["im"].isna().all()
    assert frame["psd"].notna().all()

    single = poisson_spectra(1, size=64)[0]
    loaded = spectral.read_spectrum_csv(spectral.write_spectrum_csv(single, tmp_path / "one.csv"))
    np.testing.assert_allclose(loaded.amplitudes, single.amplitudes, rtol=1e-15)
