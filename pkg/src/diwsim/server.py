"""Environment wire protocol: JSON lines over stdio or TCP.

One message per line.  Requests carry a ``cmd`` field (reset | step |
close); responses carry the observation as base64-encoded f32
little-endian data, channel-major (bed, target, path), 3*84*84 = 21168
values.  Malformed input yields ``{"error": "Code: message"}`` and the
session stays usable.  Each connection owns one independent environment.
"""

from __future__ import annotations

import base64
import json
import os
import socketserver
import sys

import numpy as np

from . import dataset, envmdp, geom
from .config import Config, ConfigError

OBS_VALUES = 3 * 84 * 84


def encode_obs(obs: np.ndarray) -> str:
    """(84, 84, 3) -> base64 of channel-major f32 little-endian."""
    flat = np.ascontiguousarray(obs.transpose(2, 0, 1), dtype="<f4")
    return base64.b64encode(flat.tobytes()).decode("ascii")


def decode_obs(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload)
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size != OBS_VALUES:
        raise ValueError(f"expected {OBS_VALUES} values, got {flat.size}")
    return flat.reshape(3, 84, 84).transpose(1, 2, 0)


def resolve_slice(spec: str, slice_dir=None) -> geom.SliceSet:
    """Slice lookup: fixture name, ``random:<seed>``, an id inside
    ``slice_dir``, or a polygon-JSON path."""
    if spec in ("square", "triangle", "circle"):
        return dataset.simple_slice(spec)
    if spec.startswith("random:"):
        return dataset.random_slice(int(spec.split(":", 1)[1]))
    if slice_dir:
        candidate = os.path.join(slice_dir, spec)
        for path in (candidate, candidate + ".json"):
            if os.path.exists(path):
                return geom.load_polygon_json(path)
    if os.path.exists(spec):
        return geom.load_polygon_json(spec)
    raise FileNotFoundError(f"unknown slice {spec!r}")


class Session:
    """One protocol session: a sequence of episodes on one environment."""

    def __init__(self, slice_dir=None):
        self.slice_dir = slice_dir
        self.env = None

    def handle_line(self, line: str) -> dict:
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as e:
            return {"error": f"BadJson: {e}"}
        if not isinstance(msg, dict) or "cmd" not in msg:
            return {"error": "BadRequest: message needs a 'cmd' field"}
        try:
            return self._dispatch(msg)
        except envmdp.EnvError as e:
            return {"error": f"{type(e).__name__}: {e}"}
        except (ConfigError, FileNotFoundError, ValueError, TypeError,
                KeyError, geom.GeomError) as e:
            return {"error": f"{type(e).__name__}: {e}"}

    def _dispatch(self, msg: dict) -> dict:
        cmd = msg["cmd"]
        if cmd == "reset":
            return self._reset(msg)
        if cmd == "step":
            return self._step(msg)
        if cmd == "close":
            self.env = None
            return {"ok": True}
        return {"error": f"BadRequest: unknown cmd {cmd!r}"}

    def _reset(self, msg: dict) -> dict:
        if "slice" not in msg:
            return {"error": "BadRequest: reset needs a 'slice' field"}
        slices = resolve_slice(str(msg["slice"]), self.slice_dir)
        seed = int(msg.get("seed", 0))
        cfg = Config(msg.get("config", {}))
        self.env = envmdp.PrintEnv(slices, cfg.episode(),
                                   obs_spec=cfg.observation(),
                                   grid=cfg.grid(), seed=seed)
        obs = self.env.reset(seed=seed)
        return {"obs": encode_obs(obs),
                "info": {"n_steps": self.env.n_steps, "seed": seed}}

    def _step(self, msg: dict) -> dict:
        if self.env is None:
            return {"error": "NoEpisode: call reset first"}
        raw = msg.get("action")
        if (not isinstance(raw, (list, tuple)) or len(raw) != 2
                or not all(isinstance(x, (int, float)) for x in raw)):
            return {"error": "BadRequest: action must be [v_norm, off_norm]"}
        action = envmdp.Action(float(raw[0]), float(raw[1]))
        clamped = (action.velocity_norm != float(raw[0])
                   or action.offset_norm != float(raw[1]))
        result = self.env.step(action)
        info = dict(result.info)
        info["bed_reward"] = float(info["bed_reward"])
        if clamped:
            info["clamped_action"] = [action.velocity_norm,
                                      action.offset_norm]
        return {"obs": encode_obs(result.obs), "reward": result.reward,
                "done": result.done, "info": info}


def serve_stdio(slice_dir=None, stdin=None, stdout=None):
    """Single-session loop over text streams; EOF ends the session."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    session = Session(slice_dir=slice_dir)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        response = session.handle_line(line)
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()


class _TCPHandler(socketserver.StreamRequestHandler):
    def handle(self):
        session = Session(slice_dir=self.server.slice_dir)
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            response = session.handle_line(line)
            self.wfile.write((json.dumps(response) + "\n").encode("utf-8"))


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(port: int, slice_dir=None, host: str = "127.0.0.1"):
    server = _TCPServer((host, port), _TCPHandler)
    server.slice_dir = slice_dir
    return server  # caller runs serve_forever()
