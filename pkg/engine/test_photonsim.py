"""
Tests de simulación de streams de fotones y del formato binario
"""
import math

import numpy as np
import pandas as pd
import pytest

from fluorosense import spectral
from fluorosense.errors import InvalidInputError, ThinningBoundError
from fluorosense.models import PLACEHOLDER_CALIBRATION, CalibrationPoint, DetectorModel
from fluorosense.photonsim import (
    TAG_HEADER,
    bandwidth_from_power,
    expected_counts,
    iter_tag_chunks,
    read_tagstream,
    read_tagstream_header,
    simulate_stream,
    write_tagstream,
    write_tagstream_csv,
)

NO_FILTER = DetectorModel()


def constant(rate):
    return lambda t: np.full(np.shape(t), float(rate))


def test_constant_rate_count_is_poisson():
    stream = simulate_stream(constant(72_000), 10.0, NO_FILTER, seed=1, r_max=72_000)
    assert abs(stream.count - 720_000) < 3 * math.sqrt(720_000)
    stream.validate()


def test_zero_rate_gives_empty_stream():
    stream = simulate_stream(constant(0.0), 1.0, NO_FILTER, seed=1, r_max=0.0)
    assert stream.count == 0


def test_simulation_is_deterministic():
    rate = lambda t: 5e4 * (1 + 0.3 * np.cos(2 * np.pi * 1e3 * t))
    detector = DetectorModel(bandwidth=2e4)
    first = simulate_stream(rate, 0.5, detector, seed=99, r_max=6.5e4)
    second = simulate_stream(rate, 0.5, detector, seed=99, r_max=6.5e4)
    np.testing.assert_array_equal(first.timestamps, second.timestamps)
    assert first.metadata["rng_seed"] == 99


def test_rate_above_bound_is_rejected():
    with pytest.raises(ThinningBoundError):
        simulate_stream(constant(2e3), 1.0, NO_FILTER, seed=0, r_max=1e3)


def test_filter_attenuates_modulation_beyond_cutoff():
    f_mod, width, duration = 5e5, 1e-7, 0.1
    rate = lambda t: 1e6 * (1 + 0.5 * np.cos(2 * np.pi * f_mod * t))
    peaks = []
    for detector in (NO_FILTER, DetectorModel(bandwidth=1e5)):
        stream = simulate_stream(rate, duration, detector, seed=3, r_max=1.5e6, grid_step=1 / (20 * f_mod))
        spectrum = spectral.psd(spectral.bin(stream, width))
        peaks.append(spectrum.psd[spectrum.bin_index(f_mod)])
    assert peaks[1] / peaks[0] == pytest.approx(1 / 26, rel=0.2)


def test_cascade_matches_cutoff_at_minus_3db():
    f_c = 1e4
    rate = lambda t: 1e5 * (1 + 0.1 * np.cos(2 * np.pi * f_c * t))
    for rolloff in (1.0, 2.0, 3.0):
        detector = DetectorModel(bandwidth=f_c, rolloff_exponent=rolloff)
        series = expected_counts(rate, 0.05, 1e-6, detector, grid_step=1e-6)
        x = series.counts[series.n_bins // 2:]
        ref = 0.1 * 1e5 * 1e-6
        amplitude = 2 * np.abs(np.fft.rfft(x - x.mean()))[int(round(f_c * x.size * 1e-6))] / x.size
        assert (amplitude / ref) ** 2 == pytest.approx(0.5, rel=0.03), rolloff


def test_expected_counts_constant_rate():
    series = expected_counts(constant(72_000), 1.0, 1e-3, NO_FILTER)
    np.testing.assert_allclose(series.counts, 72.0)
    filtered = expected_counts(constant(72_000), 1.0, 1e-3, DetectorModel(bandwidth=1e3))
    np.testing.assert_allclose(filtered.counts, 72.0, rtol=1e-12)


def test_dead_time_changes_count_slightly():
    plain = simulate_stream(constant(72_000), 1.0, NO_FILTER, seed=5, r_max=72_000)
    dead = simulate_stream(constant(72_000), 1.0, DetectorModel(dead_time=50e-9), seed=5, r_max=72_000)
    assert dead.count <= plain.count
    assert (plain.count - dead.count) / plain.count < 0.005
    # el redondeo a ps puede restar 1 ps a la separación
    assert np.all(np.diff(dead.timestamps) >= 49_999)


def test_high_rate_stream_stays_strictly_increasing():
    stream = simulate_stream(constant(1e9), 1e-3, NO_FILTER, seed=8, r_max=1e9)
    stream.validate()
    assert stream.timestamps[-1] <= stream.duration_ps


@pytest.mark.slow
def test_constant_rate_psd_is_white():
    stream = simulate_stream(constant(72_000), 30.0, NO_FILTER, seed=12, r_max=72_000)
    average = spectral.average_psd(spectral.segment_spectra(stream, 1e-5, 1.0))
    f = average.frequencies
    medians = []
    low = 100.0
    while 2 * low <= 5e4:
        band = (f >= low) & (f < 2 * low)
        medians.append(np.median(average.psd[band]))
        low *= 2
    medians = np.array(medians)
    overall = np.median(medians)
    assert np.max(np.abs(medians / overall - 1)) < 0.10
    assert overall == pytest.approx(72_000, rel=0.05)


def test_bandwidth_from_power_interpolation(caplog):
    table = [CalibrationPoint(power=1e-4, cutoff=1e4), CalibrationPoint(power=3e-4, cutoff=5e4)]
    assert bandwidth_from_power(1e-4, table) == 1e4
    assert bandwidth_from_power(2e-4, table) == pytest.approx(3e4)
    assert bandwidth_from_power(1e-3, table) == 5e4
    assert "clamped" in caplog.text
    powers = np.linspace(30e-6, 300e-6, 50)
    cutoffs = [bandwidth_from_power(p, PLACEHOLDER_CALIBRATION) for p in powers]
    assert np.all(np.diff(cutoffs) >= 0)


def test_bandwidth_from_power_rejects_non_monotone_table():
    table = [CalibrationPoint(power=3e-4, cutoff=1e4), CalibrationPoint(power=1e-4, cutoff=5e4)]
    with pytest.raises(InvalidInputError):
        bandwidth_from_power(2e-4, table)


def test_tagstream_binary_contract(tmp_path):
    stream = simulate_stream(constant(5e4), 0.2, NO_FILTER, seed=77, r_max=5e4)
    path = write_tagstream(stream, tmp_path / "tags.bin")
    assert path.stat().st_size == TAG_HEADER.size + 8 * stream.count

    header = read_tagstream_header(path)
    assert header["magic"] == "FLTAGS"
    assert header["count"] == stream.count
    assert header["duration_ps"] == 200_000_000_000
    assert header["seed"] == 77

    chunks = list(iter_tag_chunks(path, chunk_size=1000))
    assert all(c.size <= 1000 for c in chunks)
    loaded = read_tagstream(path)
    np.testing.assert_array_equal(loaded.timestamps, stream.timestamps)
    assert loaded.duration == pytest.approx(0.2)


def test_tagstream_bad_magic(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"NOTTAGS!" + bytes(TAG_HEADER.size))
    with pytest.raises(InvalidInputError):
        read_tagstream_header(path)


def test_tagstream_csv_export(tmp_path):
    stream = simulate_stream(constant(1e4), 0.1, NO_FILTER, seed=2, r_max=1e4)
    frame = pd.read_csv(write_tagstream_csv(stream, tmp_path / "tags.csv"))
    assert frame["timestamp_ps"].tolist() == stream.timestamps.tolist()
