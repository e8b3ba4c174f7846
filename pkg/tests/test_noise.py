"""Flow-noise model: Burg fitting, synthesis, gain calibration, CSV
loading, pressure schedules."""

import numpy as np
import pytest
from scipy.signal import lfilter, welch

from diwsim import noise


def ar_series(coeffs, n, seed=0, gain=1.0):
    """Reference AR generator: x_N = -sum a_m x_{N-m} + eps."""
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, gain, size=n + 500)
    return lfilter([1.0], np.concatenate([[1.0], coeffs]), eps)[500:]


# ---------------------------------------------------------------------------
# burg_fit


def test_constant_series_zero_variance():
    with pytest.raises(noise.ZeroVariance):
        noise.burg_fit(noise.FlowSeries(np.full(100, 3.0)), 2)


def test_order_too_high():
    with pytest.raises(noise.InsufficientData):
        noise.burg_fit(noise.FlowSeries(np.arange(5.0)), 4)


def test_ar1_recovery():
    series = noise.FlowSeries(ar_series([-0.9], 100_000))
    model = noise.burg_fit(series, 1)
    assert -0.95 <= model.coeffs[0] <= -0.85


def test_ar2_recovery():
    true = np.array([-1.2, 0.5])
    series = noise.FlowSeries(ar_series(true, 100_000))
    model = noise.burg_fit(series, 2)
    assert np.abs(model.coeffs - true).max() < 0.05


def test_reflection_coefficients_bounded():
    series = noise.reference_measurement()
    model = noise.burg_fit(series, 8)
    assert (np.abs(model.reflection) <= 1.0 + 1e-12).all()


def test_mean_stored():
    x = ar_series([-0.5], 10_000) + 7.0
    model = noise.burg_fit(noise.FlowSeries(x), 1)
    assert abs(model.mean - x.mean()) < 1e-12


# ---------------------------------------------------------------------------
# synthesize


def test_order0_white_noise_std():
    model = noise.ARModel(order=0, coeffs=np.zeros(0), gain=2.0)
    out = noise.synthesize(model, 100_000, np.random.default_rng(1))
    assert abs(out.samples.std() - 2.0) / 2.0 < 0.02


def test_synthesis_deterministic():
    model = noise.burg_fit(noise.reference_measurement(), 4)
    a = noise.synthesize(model, 1000, np.random.default_rng(9)).samples
    b = noise.synthesize(model, 1000, np.random.default_rng(9)).samples
    assert np.array_equal(a, b)


def test_autocorrelation_match():
    src = ar_series([-0.9], 100_000)
    model = noise.burg_fit(noise.FlowSeries(src), 1)
    syn = noise.synthesize(model, 100_000, np.random.default_rng(2)).samples

    def rho1(x):
        x = x - x.mean()
        return float(np.dot(x[1:], x[:-1]) / np.dot(x, x))

    assert abs(rho1(syn) - rho1(src)) < 0.05


def test_long_synthesis_bounded():
    model = noise.burg_fit(noise.reference_measurement(), 8)
    out = noise.synthesize(model, 1_000_000, np.random.default_rng(3)).samples
    std = noise.stationary_std(model)
    assert np.abs(out - model.mean).max() < 20 * std


def test_fit_synthesize_roundtrip():
    true = np.array([-1.2, 0.5, -0.1, 0.05])
    src = noise.FlowSeries(ar_series(true, 100_000))
    model = noise.burg_fit(src, 4)
    resyn = noise.synthesize(model, 100_000, np.random.default_rng(4))
    refit = noise.burg_fit(resyn, 4)
    assert np.abs(refit.coeffs - model.coeffs).max() < 0.05


def test_spectral_match_beats_white():
    src = noise.reference_measurement().samples
    model = noise.burg_fit(noise.FlowSeries(src), 8)
    syn = noise.synthesize(model, len(src) * 10,
                           np.random.default_rng(5)).samples
    f, p_src = welch(src - src.mean(), nperseg=256)
    _, p_syn = welch(syn - syn.mean(), nperseg=256)
    white = np.full_like(p_src, (src - src.mean()).var() / 0.5 * 0.5)
    white *= p_src.mean() / white.mean()

    def lsd(a, b):
        return np.sqrt(np.mean((np.log10(a) - np.log10(b)) ** 2))

    assert lsd(p_syn, p_src) < lsd(white, p_src)


# ---------------------------------------------------------------------------
# calibrate_gain


def test_calibration_fixed_point():
    model = noise.burg_fit(noise.reference_measurement(), 8)
    cur = noise.stationary_std(model)
    cal = noise.calibrate_gain(model, cur)
    assert abs(cal.gain - model.gain) / model.gain < 0.01


def test_calibration_to_175um():
    model = noise.burg_fit(noise.reference_measurement(), 8)
    cal = noise.calibrate_gain(model, 0.175)
    out = noise.synthesize(cal, 100_000, np.random.default_rng(6)).samples
    assert abs(out.std() - 0.175) / 0.175 < 0.05


def test_calibration_linearity():
    model = noise.burg_fit(noise.reference_measurement(), 8)
    a = noise.calibrate_gain(model, 0.1)
    b = noise.calibrate_gain(model, 0.2)
    assert abs(b.gain - 2 * a.gain) / b.gain < 1e-9


# ---------------------------------------------------------------------------
# load_width_csv


def write_csv(path, rows):
    with open(path, "w") as f:
        f.write("position_mm,width_mm\n")
        for p, w in rows:
            f.write(f"{p},{w}\n")


def test_csv_knots_preserved(tmp_path):
    rows = [(i * 0.1, 0.4 + 0.01 * i) for i in range(10)]
    path = tmp_path / "w.csv"
    write_csv(path, rows)
    series = noise.load_width_csv(path, interval=0.1)
    assert np.allclose(series.samples, [w for _, w in rows], atol=1e-9)


def test_csv_linear_ramp(tmp_path):
    rows = [(i * 0.5, 1.0 + 0.2 * i * 0.5) for i in range(8)]
    path = tmp_path / "w.csv"
    write_csv(path, rows)
    series = noise.load_width_csv(path, interval=0.1)
    grid = np.arange(0.0, 3.5 + 1e-12, 0.1)
    assert np.abs(series.samples - (1.0 + 0.2 * grid)).max() < 1e-9


def test_csv_sinusoid_interpolation(tmp_path):
    # 0.25mm knots: linear-interp error bound h^2/8 * amp ~ 0.8% of amp
    xs = np.arange(0.0, 20.0, 0.25)
    rows = list(zip(xs, 0.4 + 0.05 * np.sin(xs)))
    path = tmp_path / "w.csv"
    write_csv(path, rows)
    series = noise.load_width_csv(path, interval=0.1)
    grid = np.arange(0.0, xs[-1] + 1e-12, 0.1)
    err = np.abs(series.samples - (0.4 + 0.05 * np.sin(grid))).max()
    assert err < 0.02 * 0.05


def test_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    write_csv(path, [(0, 1), (1, 1), (0.5, 1), (2, 1)])
    with pytest.raises(noise.NonMonotonePositions):
        noise.load_width_csv(path)
    write_csv(path, [(0, 1), (1, 1)])
    with pytest.raises(noise.TooFewRows):
        noise.load_width_csv(path)


# ---------------------------------------------------------------------------
# pressure_schedule


def test_schedule_zero_variance_constant():
    model = noise.ARModel(order=0, coeffs=np.zeros(0), gain=0.0, mean=0.4)
    p = noise.pressure_schedule(model, 30.0, 100)
    assert np.allclose(p, 30.0)


def test_schedule_mean_and_clamp():
    model = noise.calibrate_gain(
        noise.burg_fit(noise.reference_measurement(), 8), 0.175)
    p = noise.pressure_schedule(model, 30.0, 100_000,
                                np.random.default_rng(7))
    assert abs(p.mean() - 30.0) / 30.0 < 0.02
    assert p.min() >= 0.0 and p.max() <= 60.0


# ---------------------------------------------------------------------------
# persistence


def test_model_json_roundtrip(tmp_path):
    model = noise.burg_fit(noise.reference_measurement(), 6)
    path = tmp_path / "m.json"
    noise.save_model(model, path)
    loaded = noise.load_model(path)
    assert loaded.order == model.order
    assert np.allclose(loaded.coeffs, model.coeffs)
    assert loaded.gain == model.gain and loaded.mean == model.mean
