"""Configuration layer, command-line interface, and the wire-protocol
environment server."""

import io
import json
import socket
import threading

import numpy as np
import pytest
from click.testing import CliRunner

from diwsim import cli, noise, server
from diwsim.config import Config, ConfigError

from conftest import make_box_mesh

FAST = ["--set", "episode.settle_time_end=0.0"]


@pytest.fixture()
def runner():
    return CliRunner()


def last_json(result):
    return json.loads(result.output.strip().split("\n")[-1])


# ---------------------------------------------------------------------------
# config


def test_config_overrides_and_types():
    cfg = Config()
    cfg.set_string("episode.nominal_pressure=20")
    cfg.set_string("episode.mode=infill")
    cfg.set_string("observation.show_path=false")
    ep = cfg.episode()
    assert ep.nominal_pressure == 20.0 and ep.mode == "infill"
    assert cfg.observation().show_path is False


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        Config().set_string("episode.typo=1")
    with pytest.raises(ConfigError):
        Config().set_string("nosection.key=1")
    with pytest.raises(ConfigError):
        Config({"episode": {"mode": 3}})


def test_config_toml_and_snapshot(tmp_path):
    toml = tmp_path / "run.toml"
    toml.write_text("[episode]\nnominal_pressure = 30.0\n"
                    "[grid]\nnx = 512\nny = 512\n")
    cfg = Config.load(toml, ["episode.mode=outline"])
    assert cfg.episode().nominal_pressure == 30.0
    assert cfg.grid().nx == 512
    snap = tmp_path / "resolved.json"
    cfg.save_snapshot(snap)
    resolved = json.loads(snap.read_text())
    assert resolved["episode"]["nominal_pressure"] == 30.0
    assert resolved["material"]["r_p"] > 0  # defaults filled in


def test_config_material_preset():
    cfg = Config({"material": {"preset": "high"}})
    assert cfg.material().xsph_c > Config().material().xsph_c


# ---------------------------------------------------------------------------
# CLI


def test_cli_slice_plan_roundtrip(runner, tmp_path):
    stl = tmp_path / "box.stl"
    from diwsim import geom
    geom.write_stl_binary(make_box_mesh(8, 8, 0, 14, 14, 6), stl)
    sl = tmp_path / "slice.json"
    res = runner.invoke(cli.main, ["slice", str(stl), "--z", "1.0",
                                   "-o", str(sl)])
    assert res.exit_code == 0, res.output
    assert last_json(res)["outer"] == 1

    plan = tmp_path / "plan.json"
    png = tmp_path / "plan.png"
    res = runner.invoke(cli.main, ["plan", str(sl), "-o", str(plan),
                                   "--preview", str(png)])
    assert res.exit_code == 0, res.output
    assert last_json(res)["paths"] >= 2  # outline + infill
    assert png.exists() and png.stat().st_size > 0


def test_cli_usage_error_exit_2(runner):
    res = runner.invoke(cli.main, ["slice", "/nonexistent.stl",
                                   "--z", "1", "-o", "/tmp/x.json"])
    assert res.exit_code == 2


def test_cli_runtime_error_exit_3(runner, tmp_path):
    stl = tmp_path / "box.stl"
    from diwsim import geom
    geom.write_stl_binary(make_box_mesh(8, 8, 0, 14, 14, 6), stl)
    res = runner.invoke(cli.main, ["slice", str(stl), "--z", "99.0",
                                   "-o", str(tmp_path / "x.json")])
    assert res.exit_code == 3
    assert "error" in last_json(res)


def test_cli_fit_noise(runner, tmp_path):
    csv_path = tmp_path / "widths.csv"
    series = noise.reference_measurement()
    with open(csv_path, "w") as f:
        f.write("position_mm,width_mm\n")
        for i, w in enumerate(series.samples):
            f.write(f"{i * 0.1},{w}\n")
    out = tmp_path / "model.json"
    res = runner.invoke(cli.main, ["fit-noise", str(csv_path),
                                   "-o", str(out)])
    assert res.exit_code == 0, res.output
    model = noise.load_model(out)
    assert model.order == 8
    assert last_json(res)["order"] == 8


def test_cli_gen_dataset(runner, tmp_path):
    out = tmp_path / "ds"
    res = runner.invoke(cli.main, ["gen-dataset", "-n", "2", "--seed", "1",
                                   "-o", str(out)])
    assert res.exit_code == 0, res.output
    files = sorted(out.glob("*.json"))
    assert len(files) == 2


def test_cli_run_artifacts(runner, tmp_path):
    out = tmp_path / "run"
    res = runner.invoke(cli.main, ["run", "square", "--policy", "baseline",
                                   "--seed", "0", "--out-dir", str(out)]
                        + FAST)
    assert res.exit_code == 0, res.output
    for name in ("config_resolved.json", "trace.jsonl", "height.pgm",
                 "height.f32", "metrics.json"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert np.isfinite(metrics["o_um"])
    trace = [json.loads(l) for l in (out / "trace.jsonl").read_text()
             .strip().split("\n")]
    assert len(trace) > 10 and "action" in trace[0]


def test_cli_run_bad_policy_exit_3(runner, tmp_path):
    res = runner.invoke(cli.main, ["run", "square", "--policy", "nope",
                                   "--out-dir", str(tmp_path / "x")] + FAST)
    assert res.exit_code == 3


def test_cli_run_rejects_unknown_override(runner, tmp_path):
    res = runner.invoke(cli.main, ["run", "square",
                                   "--out-dir", str(tmp_path / "x"),
                                   "--set", "episode.bogus=1"])
    assert res.exit_code != 0


def test_cli_bench_csv(runner, tmp_path):
    ds = tmp_path / "ds"
    assert runner.invoke(cli.main, ["gen-dataset", "-n", "1", "--seed", "3",
                                    "-o", str(ds)]).exit_code == 0
    out = tmp_path / "bench.csv"
    res = runner.invoke(cli.main, ["bench", str(ds),
                                   "--policies", "baseline",
                                   "-o", str(out)] + FAST)
    assert res.exit_code == 0, res.output
    lines = out.read_text().strip().split("\n")
    from diwsim import evaluation
    assert lines[0] == evaluation.CSV_HEADER
    assert len(lines) == 2


# ---------------------------------------------------------------------------
# wire protocol


def reset_msg(**kw):
    msg = {"cmd": "reset", "slice": "square",
           "config": {"episode": {"settle_time_end": 0.0}}}
    msg.update(kw)
    return json.dumps(msg)


def test_obs_codec_roundtrip():
    obs = np.random.default_rng(0).uniform(
        0, 1, size=(84, 84, 3)).astype(np.float32)
    assert np.array_equal(server.decode_obs(server.encode_obs(obs)), obs)
    with pytest.raises(ValueError):
        server.decode_obs(server.encode_obs(obs)[:100])


def test_session_happy_path():
    s = server.Session()
    r = json.loads(json.dumps(s.handle_line(reset_msg(seed=3))))
    assert "obs" in r and r["info"]["n_steps"] > 0
    obs = server.decode_obs(r["obs"])
    assert obs.shape == (84, 84, 3)
    r = s.handle_line(json.dumps({"cmd": "step", "action": [0.5, 0.0]}))
    assert "reward" in r and r["done"] is False
    assert "clamped_action" not in r["info"]
    assert s.handle_line(json.dumps({"cmd": "close"})) == {"ok": True}


def test_session_step_before_reset():
    r = server.Session().handle_line(
        json.dumps({"cmd": "step", "action": [0, 0]}))
    assert r["error"].startswith("NoEpisode")


def test_session_error_handling():
    s = server.Session()
    assert s.handle_line("{not json")["error"].startswith("BadJson")
    assert s.handle_line(json.dumps({"nope": 1}))["error"].startswith(
        "BadRequest")
    assert s.handle_line(json.dumps({"cmd": "dance"}))["error"].startswith(
        "BadRequest")
    r = s.handle_line(json.dumps({"cmd": "reset", "slice": "missing.json"}))
    assert "FileNotFoundError" in r["error"]
    # session still usable after errors
    assert "obs" in s.handle_line(reset_msg())


def test_session_clamp_notice():
    s = server.Session()
    s.handle_line(reset_msg())
    r = s.handle_line(json.dumps({"cmd": "step", "action": [4.0, -9.0]}))
    assert r["info"]["clamped_action"] == [1.0, -1.0]


def test_session_bad_action():
    s = server.Session()
    s.handle_line(reset_msg())
    for bad in ([1.0], "fast", [1.0, "x"], None):
        r = s.handle_line(json.dumps({"cmd": "step", "action": bad}))
        assert r["error"].startswith("BadRequest")


def test_session_config_error_reported():
    r = server.Session().handle_line(reset_msg(
        config={"episode": {"bogus": 1}}))
    assert "ConfigError" in r["error"]


def test_sequential_sessions_no_leakage():
    first = None
    for k in range(8):
        s = server.Session()
        r = s.handle_line(reset_msg(seed=5))
        step = s.handle_line(json.dumps({"cmd": "step", "action": [0.2, 0.1]}))
        key = (r["obs"], step["obs"], step["reward"])
        if first is None:
            first = key
        assert key == first  # same seed, identical payloads every session
        s.handle_line(json.dumps({"cmd": "close"}))


def test_stdio_server_transcript():
    lines = [
        reset_msg(seed=2),
        json.dumps({"cmd": "step", "action": [0.0, 0.0]}),
        json.dumps({"cmd": "close"}),
    ]
    out = io.StringIO()
    server.serve_stdio(stdin=io.StringIO("\n".join(lines) + "\n\n"),
                       stdout=out)
    responses = [json.loads(l) for l in out.getvalue().strip().split("\n")]
    assert len(responses) == 3
    assert "obs" in responses[0] and "reward" in responses[1]
    assert responses[2] == {"ok": True}


def test_tcp_smoke():
    srv = server.serve_tcp(0)
    port = srv.server_address[1]
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    try:
        with socket.create_connection(("127.0.0.1", port), timeout=30) as sk:
            f = sk.makefile("rw")
            f.write(reset_msg(seed=1) + "\n")
            f.flush()
            r = json.loads(f.readline())
            assert "obs" in r
            f.write(json.dumps({"cmd": "step", "action": [0.3, 0.0]}) + "\n")
            f.flush()
            assert "reward" in json.loads(f.readline())
    finally:
        srv.shutdown()
        srv.server_close()


def test_resolve_slice_specs(tmp_path):
    assert server.resolve_slice("square").outer
    assert server.resolve_slice("random:3").outer
    from diwsim import dataset, geom
    path = tmp_path / "s.json"
    geom.save_polygon_json(dataset.simple_slice("circle"), path)
    assert server.resolve_slice(str(path)).outer
    assert server.resolve_slice("s", slice_dir=str(tmp_path)).outer
    with pytest.raises(FileNotFoundError):
        server.resolve_slice("nope")
