"""Controllers: calibrated open-loop baseline, scripted policies, and
CNN policy inference with a portable binary weight format.

The CNN is the standard 84x84x3 visual-control backbone: three valid
(no-padding) convolutions, a 512-unit fully connected layer, and three
heads (action mean, state-independent log-std, value).  Inference is
pure numpy so deployment needs no deep-learning runtime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import envmdp, fluid, geom
from .envmdp import Action


class PolicyError(Exception):
    pass


class CalibrationOutOfRange(PolicyError):
    pass


class BadMagic(PolicyError):
    pass


class ShapeMismatch(PolicyError):
    pass


class TruncatedFile(PolicyError):
    pass


# ---------------------------------------------------------------------------
# baseline calibration


@dataclass
class BaselineParams:
    pressure: float
    velocity: float

    def __post_init__(self):
        if not (envmdp.V_MIN <= self.velocity <= envmdp.V_MAX):
            raise PolicyError("velocity outside the actuator range")
        if self.pressure <= 0:
            raise PolicyError("pressure must be positive")


DEFAULT_PRESSURE_LATTICE = tuple(np.geomspace(8.0, 80.0, 12).round(2))
DEFAULT_VELOCITY_LATTICE = tuple(np.round(np.arange(0.2, 2.01, 0.2), 1))


def measure_line_width(material: fluid.MaterialParams, pressure: float,
                       velocity: float, length: float = 8.0, seed: int = 0,
                       settle: float = 1.0,
                       occupancy_eps: float = envmdp.OCCUPANCY_EPS) -> float:
    """Print a straight line and return its mean deposited width (mm),
    measured over the steady middle section."""
    state = fluid.SimState(material=material, seed=seed)
    x0, y0 = 7.0, 11.0
    state.nozzle.center = np.array([x0, y0])
    state.nozzle.travel_dir = np.array([1.0, 0.0])
    dt = state.config.dt
    n = int(round(length / velocity / dt))
    for j in range(n):
        state.nozzle.center = np.array([x0 + length * (j + 1) / n, y0])
        state.pressure = pressure
        fluid.step_sim(state)
    state.pressure = 0.0
    envmdp.settle(state, settle)
    grid = geom.BedGrid()
    heights = fluid.heightmap(state, grid)
    xs, _ = grid.centers()
    band = (xs > x0 + 2.0) & (xs < x0 + length - 2.0)
    occupied = heights[:, band] > occupancy_eps
    return float(occupied.sum(axis=0).mean() * grid.pitch)


def calibrate_baseline(material: fluid.MaterialParams,
                       target_width: float = 0.4,
                       pressures=DEFAULT_PRESSURE_LATTICE,
                       velocities=DEFAULT_VELOCITY_LATTICE,
                       seed: int = 0) -> BaselineParams:
    """Grid search over (pressure, velocity): print a short straight line
    per candidate and keep the pair whose measured width is closest to
    the planner width.  Ties break toward the higher velocity."""
    best = None
    for p in pressures:
        for v in velocities:
            w = measure_line_width(material, p, v, seed=seed)
            err = abs(w - target_width)
            if best is None or err < best[0] - 1e-12 or \
                    (abs(err - best[0]) <= 1e-12 and v > best[2]):
                best = (err, p, v)
    err, p, v = best
    if err > 0.2 * target_width:
        raise CalibrationOutOfRange(
            f"best width error {err:.3f} mm exceeds 20% of {target_width} mm")
    return BaselineParams(pressure=float(p), velocity=float(v))


# ---------------------------------------------------------------------------
# scripted policies


class BasePolicy:
    """Callable observation -> Action."""

    def __call__(self, obs: np.ndarray) -> Action:  # pragma: no cover
        raise NotImplementedError


class BaselinePolicy(BasePolicy):
    """Open-loop: calibrated constant velocity, zero offset, blind to obs."""

    def __init__(self, params: BaselineParams):
        self.params = params
        self._action = Action(envmdp.velocity_to_norm(params.velocity), 0.0)

    def __call__(self, obs) -> Action:
        return self._action


class ConstantPolicy(BasePolicy):
    def __init__(self, velocity_norm: float, offset_norm: float):
        self._action = Action(velocity_norm, offset_norm)

    def __call__(self, obs) -> Action:
        return self._action


class RandomPolicy(BasePolicy):
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs) -> Action:
        a = self.rng.uniform(-1.0, 1.0, size=2)
        return Action(a[0], a[1])


class OracleFlowPolicy(BasePolicy):
    """Cheating reference: reads the upcoming emitter pressure through a
    live environment handle and scales head speed to hold the deposited
    volume per unit length at a fixed setpoint.  The setpoint factor
    targets the width that minimizes expected average offset — with
    particle-scale edge raggedness comparable to the bead width, that
    optimum sits below the planned width, so the oracle prints slightly
    thin and jitter-free.  Establishes the headroom an adaptive
    controller has over the open-loop baseline."""

    def __init__(self, env: envmdp.PrintEnv, baseline: BaselineParams,
                 setpoint_factor: float = 1.35):
        self.env = env
        self.baseline = baseline
        self.setpoint_factor = setpoint_factor

    def __call__(self, obs) -> Action:
        horizon = self.env.config.step_distance / self.baseline.velocity
        p_next = self.env._flow.peek_mean(horizon)
        scale = p_next / self.env.config.nominal_pressure
        v = float(np.clip(self.baseline.velocity * self.setpoint_factor * scale,
                          envmdp.V_MIN, envmdp.V_MAX))
        return Action(envmdp.velocity_to_norm(v), 0.0)


# ---------------------------------------------------------------------------
# CNN inference


_LAYER_SPECS = (
    ("conv1.weight", (32, 3, 8, 8)), ("conv1.bias", (32,)),
    ("conv2.weight", (64, 32, 4, 4)), ("conv2.bias", (64,)),
    ("conv3.weight", (64, 64, 3, 3)), ("conv3.bias", (64,)),
    ("fc1.weight", (512, 3136)), ("fc1.bias", (512,)),
    ("head_mean.weight", (2, 512)), ("head_mean.bias", (2,)),
    ("head_logstd", (2,)),
    ("value_head.weight", (1, 512)), ("value_head.bias", (1,)),
)


@dataclass
class CNNWeights:
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, shape in _LAYER_SPECS:
            if name not in self.tensors:
                raise ShapeMismatch(f"missing tensor {name}")
            t = np.asarray(self.tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise ShapeMismatch(
                    f"{name}: expected {shape}, got {t.shape}")
            if not np.isfinite(t).all():
                raise PolicyError(f"{name} contains non-finite values")
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    @classmethod
    def random(cls, seed: int = 0, scale: float = 0.05) -> "CNNWeights":
        rng = np.random.default_rng(seed)
        return cls({name: rng.normal(0.0, scale, size=shape).astype(np.float32)
                    for name, shape in _LAYER_SPECS})

    @classmethod
    def zeros(cls) -> "CNNWeights":
        return cls({name: np.zeros(shape, dtype=np.float32)
                    for name, shape in _LAYER_SPECS})


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray,
            stride: int) -> np.ndarray:
    """Valid convolution via strided im2col; x is (C, H, W) float32."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(cin, oh, ow, kh, kw),
        strides=(sc, sh * stride, sw * stride, sh, sw))
    cols = patches.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T + b
    return out.T.reshape(cout, oh, ow)


def cnn_forward(weights: CNNWeights, obs: np.ndarray):
    """Forward pass: obs (84, 84, 3) in [0, 1] -> (mean[2], logstd[2],
    value).  Spatial chain 84 -> 20 -> 9 -> 7, flatten 3136 channel-major."""
    if obs.shape != (84, 84, 3):
        raise ShapeMismatch(f"expected (84, 84, 3), got {obs.shape}")
    x = np.ascontiguousarray(obs.transpose(2, 0, 1), dtype=np.float32)
    x = np.maximum(_conv2d(x, weights["conv1.weight"], weights["conv1.bias"], 4), 0)
    x = np.maximum(_conv2d(x, weights["conv2.weight"], weights["conv2.bias"], 2), 0)
    x = np.maximum(_conv2d(x, weights["conv3.weight"], weights["conv3.bias"], 1), 0)
    flat = x.reshape(-1)
    hid = np.maximum(weights["fc1.weight"] @ flat + weights["fc1.bias"], 0)
    mean = weights["head_mean.weight"] @ hid + weights["head_mean.bias"]
    value = float((weights["value_head.weight"] @ hid
                   + weights["value_head.bias"])[0])
    return mean.astype(np.float64), weights["head_logstd"].astype(np.float64), value


def act(mean: np.ndarray, logstd: np.ndarray, rng: np.random.Generator = None,
        stochastic: bool = False) -> Action:
    """Tanh-squashed Gaussian action head."""
    if stochastic:
        if rng is None:
            raise PolicyError("stochastic sampling needs an RNG")
        raw = rng.normal(mean, np.exp(logstd))
    else:
        raw = mean
    a = np.tanh(raw)
    return Action(float(a[0]), float(a[1]))


class CNNPolicy(BasePolicy):
    def __init__(self, weights: CNNWeights, stochastic: bool = False,
                 seed: int = 0):
        self.weights = weights
        self.stochastic = stochastic
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs) -> Action:
        mean, logstd, _ = cnn_forward(self.weights, obs)
        return act(mean, logstd, self.rng, self.stochastic)


# ---------------------------------------------------------------------------
# weight persistence

WEIGHT_MAGIC = b"DIWPOLICY1"


def save_weights(weights: CNNWeights, path):
    """Per-tensor records in fixed order: u16 name length + UTF-8 name,
    u8 rank, u32 dims, f32 little-endian row-major data."""
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        for name, _ in _LAYER_SPECS:
            t = weights[name]
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.astype("<f4").tobytes())


def load_weights(path) -> CNNWeights:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(WEIGHT_MAGIC):
        raise BadMagic("not a policy weight file")
    off = len(WEIGHT_MAGIC)
    tensors = {}
    for expected_name, expected_shape in _LAYER_SPECS:
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            raw = data[off:off + 4 * count]
            if len(raw) < 4 * count:
                raise TruncatedFile("tensor data ends early")
            off += 4 * count
        except struct.error as e:
            raise TruncatedFile(str(e)) from e
        if name != expected_name or tuple(shape) != expected_shape:
            raise ShapeMismatch(
                f"expected {expected_name}{expected_shape}, "
                f"got {name}{tuple(shape)}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return CNNWeights(tensors)


# ---------------------------------------------------------------------------
# selection by name (CLI plumbing)


def make_policy(spec: str, env: envmdp.PrintEnv = None,
                baseline: BaselineParams = None, seed: int = 0) -> BasePolicy:
    """Build a policy from a CLI-style spec string:
    baseline | random | oracle | constant:<v_norm>,<off_norm> | cnn:<path>."""
    if spec == "baseline":
        if baseline is None:
            raise PolicyError("baseline policy needs calibrated params")
        return BaselinePolicy(baseline)
    if spec == "random":
        return RandomPolicy(seed=seed)
    if spec == "oracle":
        if env is None or baseline is None:
            raise PolicyError("oracle policy needs env and baseline params")
        return OracleFlowPolicy(env, baseline)
    if spec.startswith("constant:"):
        v, off = (float(s) for s in spec.split(":", 1)[1].split(","))
        return ConstantPolicy(v, off)
    if spec.startswith("cnn:"):
        return CNNPolicy(load_weights(spec.split(":", 1)[1]))
    raise PolicyError(f"unknown policy spec {spec!r}")
