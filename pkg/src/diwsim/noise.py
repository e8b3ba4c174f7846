"""Data-driven flow-noise model.

Autoregressive fitting of measured deposition-width series via Burg's
lattice recursion, generative synthesis by filtering white Gaussian
noise, and conversion of the synthesized series into an emitter pressure
schedule.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.signal import lfilter


class NoiseError(Exception):
    pass


class InsufficientData(NoiseError):
    pass


class ZeroVariance(NoiseError):
    """Constant series carries no spectral information."""


class NonMonotonePositions(NoiseError):
    pass


class TooFewRows(NoiseError):
    pass


@dataclass
class FlowSeries:
    samples: np.ndarray
    interval: float = 0.1  # sample spacing along the path, mm

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.samples) < 2:
            raise InsufficientData("need at least 2 samples")
        if not np.isfinite(self.samples).all():
            raise NoiseError("non-finite samples")


@dataclass
class ARModel:
    """AR(M) model with coefficients in the prediction convention
    x_N = -sum_m a_m x_{N-m} + eps_N (a excludes the leading 1)."""

    order: int
    coeffs: np.ndarray          # a[1..M]
    gain: float                 # innovation std sigma_eps
    mean: float = 0.0
    reflection: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        self.reflection = np.asarray(self.reflection, dtype=np.float64)


def burg_fit(series: FlowSeries, order: int) -> ARModel:
    """Burg lattice recursion minimizing summed forward+backward
    prediction error; guarantees |k_m| <= 1, hence a stable filter."""
    x = series.samples
    n = len(x)
    if order >= n - 1:
        raise InsufficientData(f"order {order} needs more than {order + 1} samples")
    mu = float(x.mean())
    x = x - mu
    if float(np.dot(x, x)) / n < 1e-24:
        raise ZeroVariance("constant series")

    f = x.copy()
    b = x.copy()
    a = np.array([1.0])
    err = float(np.dot(x, x)) / n
    ks = np.zeros(order)
    for m in range(1, order + 1):
        fk = f[1:]
        bk = b[:-1]
        denom = float(np.dot(fk, fk) + np.dot(bk, bk))
        if denom <= 0:
            break
        k = -2.0 * float(np.dot(fk, bk)) / denom
        ks[m - 1] = k
        a = np.concatenate([a, [0.0]]) + k * np.concatenate([[0.0], a[::-1]])
        f, b = fk + k * bk, bk + k * fk
        err *= max(1.0 - k * k, 1e-16)
    return ARModel(order=order, coeffs=a[1:], gain=float(np.sqrt(err)),
                   mean=mu, reflection=ks)


def synthesize(model: ARModel, n: int, rng: np.random.Generator) -> FlowSeries:
    """Filter white Gaussian noise through the fitted all-pole filter.
    The first 10*M outputs are discarded as burn-in."""
    if n < 1:
        raise NoiseError("n must be >= 1")
    burn = 10 * model.order
    eps = rng.normal(0.0, model.gain, size=n + burn)
    denom = np.concatenate([[1.0], model.coeffs])
    q = lfilter([1.0], denom, eps)
    return FlowSeries(q[burn:] + model.mean, interval=0.1) if n >= 2 else \
        FlowSeries(np.array([q[burn], q[burn]]) + model.mean, interval=0.1)


def stationary_std(model: ARModel, n: int = 100_000, seed: int = 0) -> float:
    """Stationary output std estimated from a trial synthesis."""
    if model.order == 0 or len(model.coeffs) == 0:
        return model.gain
    trial = synthesize(model, n, np.random.default_rng(seed))
    return float(trial.samples.std())


def calibrate_gain(model: ARModel, target_std: float) -> ARModel:
    """Scale the innovation gain so the stationary output std matches
    ``target_std``."""
    if target_std <= 0:
        raise NoiseError("target_std must be positive")
    cur = stationary_std(model)
    if cur <= 0:
        raise ZeroVariance("model has zero output variance")
    return ARModel(order=model.order, coeffs=model.coeffs.copy(),
                   gain=model.gain * target_std / cur, mean=model.mean,
                   reflection=model.reflection.copy())


def load_width_csv(path, interval: float = 0.1) -> FlowSeries:
    """CSV of (position_mm, width_mm) rows, smoothed with a monotone cubic
    interpolant and resampled at a uniform interval."""
    pos, width = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for row in reader:
            if not row or row[0].strip().lower().startswith("position"):
                continue
            pos.append(float(row[0]))
            width.append(float(row[1]))
    if len(pos) < 4:
        raise TooFewRows(f"need >= 4 rows, got {len(pos)}")
    pos = np.asarray(pos)
    width = np.asarray(width)
    if not (np.diff(pos) > 0).all():
        raise NonMonotonePositions("positions must be strictly increasing")
    spline = PchipInterpolator(pos, width)
    grid = np.arange(pos[0], pos[-1] + 1e-12, interval)
    return FlowSeries(spline(grid), interval=interval)


def pressure_schedule(model: ARModel, nominal_pressure: float, n: int,
                      rng: np.random.Generator = None) -> np.ndarray:
    """Pressure series P_t = nominal * Q_t / mean, clamped to
    [0, 2*nominal] so flow never goes negative."""
    if nominal_pressure <= 0:
        raise NoiseError("nominal_pressure must be positive")
    rng = rng or np.random.default_rng(0)
    if model.order == 0 and model.gain == 0.0:
        return np.full(n, nominal_pressure)
    q = synthesize(model, n, rng).samples
    mu = model.mean if abs(model.mean) > 1e-12 else 1.0
    p = nominal_pressure * q / mu
    return np.clip(p, 0.0, 2.0 * nominal_pressure)


def reference_measurement(n: int = 2000, seed: int = 7,
                          mean_width: float = 0.4,
                          std: float = 0.175,
                          interval: float = 0.1) -> FlowSeries:
    """Synthetic stand-in for a measured width series: a seeded AR(2)
    process with a slow sinusoidal drift, in mm."""
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, size=n + 200)
    q = lfilter([1.0], [1.0, -1.6, 0.65], eps)[200:]
    q = q / q.std()
    drift = 0.4 * np.sin(np.arange(n) * interval * 2 * np.pi / 18.0)
    samples = mean_width + std * (0.9 * q + drift)
    return FlowSeries(samples, interval=interval)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: ARModel, path, units: str = "mm"):
    doc = {"order": model.order, "coeffs": model.coeffs.tolist(),
           "gain": model.gain, "mean": model.mean, "units": units}
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> ARModel:
    with open(path) as f:
        doc = json.load(f)
    return ARModel(order=int(doc["order"]), coeffs=np.asarray(doc["coeffs"]),
                   gain=float(doc["gain"]), mean=float(doc["mean"]))
