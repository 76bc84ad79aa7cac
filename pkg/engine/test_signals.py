"""
Tests de síntesis de señales
"""
import math

import numpy as np
import pandas as pd
import pytest
from scipy import special, stats

from fluorosense.errors import OutOfRangeError
from fluorosense.models import PhaseModSpec, SignalSpec, TelegraphSpec, ToneSpec
from fluorosense.signals import (
    build_waveform,
    clear_waveform_cache,
    evaluate,
    generate_telegraph,
    get_cache_stats,
    on_off_schedule,
    write_telegraph_csv,
)


def test_two_equal_tones_add_constructively():
    spec = SignalSpec(
        components=[ToneSpec(frequency=1e3, amplitude=1.0), ToneSpec(frequency=1e3, amplitude=1.0)],
        projection_angle=0.0,
    )
    assert float(evaluate(spec, 0.0)) == pytest.approx(2.0)


def test_projection_at_magic_angle():
    spec = SignalSpec(components=[ToneSpec(frequency=1e3, amplitude=1e-6)])
    assert float(evaluate(spec, 1e-3)) == pytest.approx(0.5779e-6, rel=2e-4)


def test_projection_scales_exactly():
    components = [
        ToneSpec(frequency=733.0, amplitude=2e-6, phase=0.4),
        PhaseModSpec(carrier=1e4, mod_frequency=1e3, mod_depth=math.pi / 2, amplitude=1e-6),
    ]
    t = np.linspace(0, 0.01, 1001)
    theta = 0.9
    flat = evaluate(SignalSpec(components=components, projection_angle=0.0), t)
    tilted = evaluate(SignalSpec(components=components, projection_angle=theta), t)
    np.testing.assert_array_equal(tilted, flat * math.cos(theta))


def test_tone_phase_is_wrapped():
    assert ToneSpec(frequency=1.0, amplitude=1.0, phase=math.pi).phase == pytest.approx(-math.pi)
    assert ToneSpec(frequency=1.0, amplitude=1.0, phase=7.0).phase == pytest.approx(7.0 - 2 * math.pi)


def test_phase_modulation_bessel_sidebands():
    spec = SignalSpec(
        components=[PhaseModSpec(carrier=1e4, mod_frequency=1e3, mod_depth=math.pi / 2, amplitude=1.0)],
        projection_angle=0.0,
    )
    fs, n = 200e3, 200_000
    t = np.arange(n) / fs
    spectrum = np.fft.rfft(evaluate(spec, t))
    amplitude = np.abs(spectrum) / (n / 2)
    expected = {0: 0.4720, 1: 0.5668, 2: 0.2497}
    for order, value in expected.items():
        for sign in (1, -1):
            k = int(round((1e4 + sign * order * 1e3)))
            assert amplitude[k] == pytest.approx(value, abs=2e-4)
            assert amplitude[k] == pytest.approx(abs(special.jv(order, math.pi / 2)), abs=1e-6)


def test_phase_mod_requires_carrier_above_modulation():
    with pytest.raises(ValueError):
        PhaseModSpec(carrier=1e3, mod_frequency=1e4, mod_depth=1.0, amplitude=1.0)


def test_telegraph_mean_dwell_and_transition_count():
    spec = TelegraphSpec(mean_dwell=1e-3, amplitude=1e-6, trace_duration=1.0, rng_seed=11)
    (trace,) = generate_telegraph(spec)
    dwells = trace.dwell_times()
    assert dwells.mean() == pytest.approx(1e-3, rel=0.10)
    assert trace.switch_times.size - 1 == pytest.approx(1000, rel=0.15)
    assert set(np.unique(trace.levels)) <= {5e-7, -5e-7}
    # niveles alternan
    assert np.all(trace.levels[1:] == -trace.levels[:-1])


def test_telegraph_dwells_pass_exponential_ks():
    spec = TelegraphSpec(mean_dwell=5e-3, amplitude=1e-6, trace_duration=1.0, n_traces=200, rng_seed=3)
    pooled = np.concatenate([trace.dwell_times() for trace in generate_telegraph(spec)])
    result = stats.kstest(pooled, "expon", args=(0, 5e-3))
    assert result.pvalue > 0.01


def test_telegraph_is_reproducible():
    spec = TelegraphSpec(mean_dwell=2e-3, amplitude=1e-6, n_traces=3, rng_seed=42)
    first, second = generate_telegraph(spec), generate_telegraph(spec)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.switch_times, b.switch_times)
        np.testing.assert_array_equal(a.levels, b.levels)


def test_telegraph_warns_on_short_trace(caplog):
    TelegraphSpec(mean_dwell=0.5, amplitude=1e-6, trace_duration=1.0)
    assert "fewer than 10 mean dwells" in caplog.text


def test_telegraph_ensemble_psd_half_power():
    mean_dwell, width = 1e-3, 50e-6
    spec = TelegraphSpec(mean_dwell=mean_dwell, amplitude=1.0, n_traces=200, rng_seed=5)
    power = None
    for trace in generate_telegraph(spec):
        series = trace.bin_average(width)
        periodogram = np.abs(np.fft.rfft(series - series.mean())) ** 2
        power = periodogram if power is None else power + periodogram
    half = int(round(1 / (math.pi * mean_dwell)))
    low = power[1:6].mean()
    knee = power[half - 10:half + 11].mean()
    assert low / knee == pytest.approx(2.0, rel=0.15)


def test_bin_average_matches_levels():
    spec = TelegraphSpec(mean_dwell=1e-2, amplitude=2.0, trace_duration=1.0, rng_seed=9)
    (trace,) = generate_telegraph(spec)
    averaged = trace.bin_average(1e-3)
    assert averaged.size == 1000
    assert np.all(np.abs(averaged) <= 1.0 + 1e-12)
    exact = np.mean(trace.level_at(np.linspace(0, 1, 200_001)[:-1]))
    assert averaged.mean() == pytest.approx(exact, abs=1e-3)


def test_evaluate_beyond_telegraph_traces_raises():
    spec = SignalSpec(
        components=[TelegraphSpec(mean_dwell=1e-3, amplitude=1e-6, trace_duration=0.1, n_traces=2)],
    )
    evaluate(spec, np.array([0.0, 0.15, 0.2]))
    with pytest.raises(OutOfRangeError):
        evaluate(spec, 0.2001)
    with pytest.raises(OutOfRangeError):
        evaluate(spec, -1e-9)


def test_evaluate_telegraph_uses_concatenated_traces():
    telegraph = TelegraphSpec(mean_dwell=1e-3, amplitude=1e-6, trace_duration=0.1, n_traces=2, rng_seed=1)
    spec = SignalSpec(components=[telegraph], projection_angle=0.0)
    traces = generate_telegraph(telegraph)
    t = np.array([0.0123, 0.1456])
    expected = [traces[0].level_at(0.0123), traces[1].level_at(0.0456)]
    np.testing.assert_allclose(evaluate(spec, t), expected)


def test_waveform_cache_is_bounded():
    clear_waveform_cache()
    spec = SignalSpec(components=[ToneSpec(frequency=10.0, amplitude=1.0)])
    assert build_waveform(spec) is build_waveform(spec)
    assert get_cache_stats()["waveforms"] == 1
    for i in range(40):
        build_waveform(SignalSpec(components=[ToneSpec(frequency=float(i), amplitude=1.0)]))
    assert get_cache_stats()["waveforms"] <= get_cache_stats()["max_waveforms"]


def test_on_off_schedule_counts():
    spec = TelegraphSpec(mean_dwell=1e-3, amplitude=1e-6, n_traces=2, on_repeats=3, off_repeats=2, cycles=4)
    schedule = on_off_schedule(spec)
    assert len(schedule) == 2 * 4 * 5
    assert sum(1 for _, _, on in schedule if on) == 24
    assert schedule[:5] == [(0, 0, True)] * 3 + [(0, 0, False)] * 2


def test_telegraph_csv_export(tmp_path):
    spec = TelegraphSpec(mean_dwell=1e-2, amplitude=1e-6, n_traces=2, rng_seed=4)
    traces = generate_telegraph(spec)
    path = write_telegraph_csv(traces, tmp_path / "switches.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["trace_id", "switch_time_s", "level"]
    assert len(frame) == sum(t.switch_times.size for t in traces)
    assert set(frame["trace_id"]) == {0, 1}
