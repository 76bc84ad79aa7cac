"""
Tests del modelo ODMR y la sensibilidad
"""
import math

import numpy as np
import pandas as pd
import pytest

from fluorosense.models import DrivePoint, OdmrParams
from fluorosense.nvmodel import (
    REFERENCE_DEVICES,
    REFERENCE_SENSITIVITY,
    acquisition_time,
    break_even_points,
    default_drive,
    harmonic_content,
    lineshape,
    lineshape_slope,
    linearity_bound,
    scan_time,
    sensing_point,
    sensitivity,
    sensitivity_table,
    transduce,
    transduction_gain,
    write_sensitivity_table_csv,
)


@pytest.fixture
def lorentz() -> OdmrParams:
    return OdmrParams(linewidth=8.0e6, contrast=0.1, count_rate=1e5)


def test_lineshape_landmarks(lorentz):
    f0, gamma = lorentz.center_freq, lorentz.linewidth
    assert float(lineshape(lorentz, f0)) == pytest.approx(0.9)
    assert float(lineshape(lorentz, f0 + gamma / 2)) == pytest.approx(0.95)
    assert float(lineshape(lorentz, f0 - gamma / 2)) == pytest.approx(0.95)
    assert float(lineshape(lorentz, 1e15)) == pytest.approx(1.0)


def test_sensing_point_closed_form(lorentz):
    assert sensing_point(lorentz) - lorentz.center_freq == pytest.approx(2.309401e6, rel=1e-6)
    wide = lorentz.model_copy(update={"linewidth": 16e6})
    assert sensing_point(wide) - wide.center_freq == pytest.approx(2 * (sensing_point(lorentz) - lorentz.center_freq))


def test_sensing_point_matches_dense_grid_argmax(lorentz):
    grid = lorentz.center_freq + np.linspace(0, 3 * lorentz.linewidth, 300_001)
    numeric = grid[np.argmax(np.abs(lineshape_slope(lorentz, grid)))]
    assert abs(numeric - sensing_point(lorentz)) <= grid[1] - grid[0]


def test_slope_matches_finite_differences(lorentz):
    f = sensing_point(lorentz)
    h = lorentz.linewidth * 1e-5
    numeric = (lineshape(lorentz, f + h) - lineshape(lorentz, f - h)) / (2 * h)
    assert float(lineshape_slope(lorentz, f)) == pytest.approx(float(numeric), rel=1e-6)
    assert abs(float(lineshape_slope(lorentz, f))) == pytest.approx(
        3 * math.sqrt(3) / 4 * lorentz.contrast / lorentz.linewidth, rel=1e-12
    )


def test_transduce_at_sensing_point(lorentz):
    drive = default_drive(lorentz)
    assert float(transduce(lorentz, drive, 0.0)) == pytest.approx(lorentz.count_rate * (1 - 0.75 * lorentz.contrast))
    far = 10 * lorentz.linewidth / lorentz.gyromagnetic_ratio
    assert float(transduce(lorentz, DrivePoint(mw_freq=lorentz.center_freq), far)) == pytest.approx(
        lorentz.count_rate, rel=5e-3
    )


def test_transduction_gain_matches_finite_difference(lorentz):
    drive = default_drive(lorentz)
    db = 1e-9
    numeric = (transduce(lorentz, drive, db) - transduce(lorentz, drive, -db)) / (2 * db)
    gain = transduction_gain(lorentz, drive)
    assert gain == pytest.approx(float(numeric), rel=1e-6)
    assert abs(gain) == pytest.approx(
        3 * math.sqrt(3) / 4 * lorentz.contrast * lorentz.count_rate * lorentz.gyromagnetic_ratio / lorentz.linewidth
    )


def test_transduce_bounded(lorentz):
    b = np.linspace(-1e-2, 1e-2, 10_001)
    rate = transduce(lorentz, default_drive(lorentz), b)
    assert rate.min() >= lorentz.count_rate * (1 - lorentz.contrast) - 1e-9
    assert rate.max() <= lorentz.count_rate


@pytest.mark.parametrize("name", ["NV15", "NV32", "Ensemble"])
def test_reference_device_sensitivities(name):
    assert sensitivity(REFERENCE_DEVICES[name]) == pytest.approx(REFERENCE_SENSITIVITY[name], rel=0.02)


def test_doubling_rate_scales_sensitivity(lorentz):
    doubled = lorentz.model_copy(update={"count_rate": 2 * lorentz.count_rate})
    assert sensitivity(lorentz) / sensitivity(doubled) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_linearity_bound(lorentz):
    assert linearity_bound(lorentz) == pytest.approx(494.5e-6, rel=2e-3)
    assert linearity_bound(lorentz) < 500e-6
    wide = lorentz.model_copy(update={"linewidth": 16e6})
    assert linearity_bound(wide) == pytest.approx(2 * linearity_bound(lorentz))


def test_second_harmonic_visible_only_for_large_drive(lorentz):
    drive = default_drive(lorentz)
    bound = linearity_bound(lorentz)
    assert harmonic_content(lorentz, drive, 0.3 * bound)[2] >= 0.01
    assert harmonic_content(lorentz, drive, 0.01 * bound)[2] < 5e-4


def test_triplet_converges_to_single_lorentzian(lorentz):
    triplet = lorentz.model_copy(update={"lineshape_kind": "hyperfine_triplet", "hyperfine_splitting": 0.0})
    f = lorentz.center_freq + np.linspace(-3e7, 3e7, 1001)
    np.testing.assert_allclose(lineshape(triplet, f), lineshape(lorentz, f), rtol=1e-12)
    nearly = triplet.model_copy(update={"hyperfine_splitting": 1.0})
    np.testing.assert_allclose(lineshape(nearly, f), lineshape(lorentz, f), atol=1e-6)


def test_triplet_sensing_point_is_steepest(lorentz):
    triplet = lorentz.model_copy(update={"lineshape_kind": "hyperfine_triplet", "linewidth": 4e6})
    f_sens = sensing_point(triplet)
    grid = triplet.center_freq + np.linspace(0, 1.5e7, 150_001)
    assert abs(float(lineshape_slope(triplet, f_sens))) >= np.abs(lineshape_slope(triplet, grid)).max() * (1 - 1e-9)


def test_acquisition_cost_comparison():
    assert acquisition_time(10e-6, 1e-6) == pytest.approx(100.0)
    assert scan_time(1e-6, 1e-6, n_points=50) == pytest.approx(50.0)
    assert break_even_points(10e-6, 1e-6) == pytest.approx(100.0)


def test_sensitivity_table_csv(tmp_path):
    table = sensitivity_table()
    assert list(table["name"]) == ["NV15", "NV32", "Ensemble"]
    np.testing.assert_allclose(table["eta_ut_per_sqrt_hz"], [8.5, 8.5, 13.3], rtol=0.02)
    path = write_sensitivity_table_csv(table, tmp_path / "table.csv")
    assert pd.read_csv(path)["eta_ut_per_sqrt_hz"].round(1).tolist() == [8.5, 8.5, 13.3]
