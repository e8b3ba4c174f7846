"""Policies: open-loop calibration, scripted controllers, CNN inference,
weight persistence."""

import numpy as np
import pytest

from diwsim import envmdp, fluid, policy

from conftest import CAL_PRESSURE, CAL_VELOCITY


# ---------------------------------------------------------------------------
# calibration


def test_measured_width_at_operating_point():
    mat = fluid.MaterialParams()
    w = policy.measure_line_width(mat, CAL_PRESSURE, CAL_VELOCITY)
    assert abs(w - 0.4) / 0.4 < 0.1


def test_calibrate_restricted_lattice():
    params = policy.calibrate_baseline(
        fluid.MaterialParams(), pressures=(30.0, 36.0), velocities=(1.0, 1.4))
    assert params.pressure == 36.0 and params.velocity == 1.0


def test_calibrate_out_of_range():
    with pytest.raises(policy.CalibrationOutOfRange):
        policy.calibrate_baseline(
            fluid.MaterialParams(), target_width=5.0,
            pressures=(30.0,), velocities=(1.0,))


# ---------------------------------------------------------------------------
# scripted policies


def test_baseline_policy_constant_action(baseline_params):
    pol = policy.BaselinePolicy(baseline_params)
    a = pol(None)
    assert a.velocity_norm == envmdp.velocity_to_norm(CAL_VELOCITY)
    assert a.offset_norm == 0.0
    assert pol(None) == a


def test_random_policy_seeded_and_bounded():
    a = [policy.RandomPolicy(seed=4)(None) for _ in range(10)]
    b = [policy.RandomPolicy(seed=4)(None) for _ in range(1)]
    assert a[0] == b[0]
    assert all(-1 <= x.velocity_norm <= 1 and -1 <= x.offset_norm <= 1
               for x in a)
    assert len({x.velocity_norm for x in a}) == 1  # fresh seed each ctor


def test_constant_policy():
    a = policy.ConstantPolicy(0.3, -0.5)(None)
    assert a.velocity_norm == 0.3 and a.offset_norm == -0.5


# ---------------------------------------------------------------------------
# CNN inference


def obs_fixture(seed=0):
    return np.random.default_rng(seed).uniform(
        0, 1, size=(84, 84, 3)).astype(np.float32)


def test_cnn_forward_shapes():
    mean, logstd, value = policy.cnn_forward(
        policy.CNNWeights.random(0), obs_fixture())
    assert mean.shape == (2,) and logstd.shape == (2,)
    assert isinstance(value, float)


def test_cnn_rejects_wrong_obs_shape():
    with pytest.raises(policy.ShapeMismatch):
        policy.cnn_forward(policy.CNNWeights.random(0),
                           np.zeros((84, 84, 4), dtype=np.float32))


def test_cnn_zero_weights_give_bias():
    w = policy.CNNWeights.zeros()
    w.tensors["head_mean.bias"][:] = [0.25, -0.5]
    w.tensors["value_head.bias"][:] = 3.0
    mean, logstd, value = policy.cnn_forward(w, obs_fixture())
    assert np.allclose(mean, [0.25, -0.5])
    assert np.allclose(logstd, 0.0) and value == 3.0


def test_cnn_forward_deterministic():
    w = policy.CNNWeights.random(1)
    obs = obs_fixture(1)
    a = policy.cnn_forward(w, obs)
    b = policy.cnn_forward(w, obs)
    assert np.array_equal(a[0], b[0]) and a[2] == b[2]


def test_cnn_sensitive_to_each_channel():
    w = policy.CNNWeights.random(2)
    base = policy.cnn_forward(w, obs_fixture(3))
    for c in range(3):
        obs = obs_fixture(3)
        obs[:, :, c] = 0.0
        out = policy.cnn_forward(w, obs)
        assert not np.allclose(out[0], base[0])


def test_conv_stack_dims():
    shapes = dict(policy._LAYER_SPECS)
    # 84 -(8,s4)-> 20 -(4,s2)-> 9 -(3,s1)-> 7; 64*7*7 = 3136
    assert shapes["conv1.weight"] == (32, 3, 8, 8)
    assert shapes["fc1.weight"] == (512, 3136)


def test_act_bounds_and_limits():
    rng = np.random.default_rng(0)
    mean = np.array([10.0, -10.0])
    a = policy.act(mean, np.array([0.0, 0.0]))
    assert a.velocity_norm == pytest.approx(1.0, abs=1e-6)
    assert a.offset_norm == pytest.approx(-1.0, abs=1e-6)
    s = policy.act(np.zeros(2), np.zeros(2), rng, stochastic=True)
    assert -1 <= s.velocity_norm <= 1 and -1 <= s.offset_norm <= 1
    with pytest.raises(policy.PolicyError):
        policy.act(np.zeros(2), np.zeros(2), stochastic=True)


def test_weights_validation():
    with pytest.raises(policy.ShapeMismatch):
        policy.CNNWeights({})
    t = {n: np.zeros(s, dtype=np.float32) for n, s in policy._LAYER_SPECS}
    t["conv1.weight"] = np.zeros((32, 3, 8, 7), dtype=np.float32)
    with pytest.raises(policy.ShapeMismatch):
        policy.CNNWeights(t)
    t = {n: np.zeros(s, dtype=np.float32) for n, s in policy._LAYER_SPECS}
    t["fc1.bias"][0] = np.nan
    with pytest.raises(policy.PolicyError):
        policy.CNNWeights(t)


# ---------------------------------------------------------------------------
# weight persistence


def test_weight_roundtrip_bitexact(tmp_path):
    w = policy.CNNWeights.random(5)
    path = tmp_path / "w.bin"
    policy.save_weights(w, path)
    loaded = policy.load_weights(path)
    for name, _ in policy._LAYER_SPECS:
        assert np.array_equal(loaded[name], w[name])
    assert path.read_bytes().startswith(policy.WEIGHT_MAGIC)


def test_weight_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTPOLICY!" + b"\x00" * 64)
    with pytest.raises(policy.BadMagic):
        policy.load_weights(path)


def test_weight_truncated(tmp_path):
    w = policy.CNNWeights.random(5)
    path = tmp_path / "w.bin"
    policy.save_weights(w, path)
    clipped = tmp_path / "clip.bin"
    clipped.write_bytes(path.read_bytes()[:2000])
    with pytest.raises(policy.TruncatedFile):
        policy.load_weights(clipped)


# ---------------------------------------------------------------------------
# make_policy


def test_make_policy_specs(tmp_path, baseline_params):
    assert isinstance(policy.make_policy("baseline", baseline=baseline_params),
                      policy.BaselinePolicy)
    assert isinstance(policy.make_policy("random"), policy.RandomPolicy)
    c = policy.make_policy("constant:0.5,-0.25")
    assert c(None).velocity_norm == 0.5 and c(None).offset_norm == -0.25
    path = tmp_path / "w.bin"
    policy.save_weights(policy.CNNWeights.random(0), path)
    assert isinstance(policy.make_policy(f"cnn:{path}"), policy.CNNPolicy)
    with pytest.raises(policy.PolicyError):
        policy.make_policy("nope")
    with pytest.raises(policy.PolicyError):
        policy.make_policy("baseline")
