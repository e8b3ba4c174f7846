"""Wire-protocol client for the environment server.

One client = one session (one environment).  The server process speaks
JSON lines on stdio; observations arrive base64-encoded as channel-major
f32 little-endian (3, 84, 84).
"""

from __future__ import annotations

import base64
import json
import shutil
import subprocess
import sys

import numpy as np

OBS_SHAPE = (3, 84, 84)


class ProtocolError(Exception):
    pass


def default_server_cmd() -> list:
    """`diwsim serve` if the console script is on PATH, otherwise the
    module entry point of the current interpreter."""
    if shutil.which("diwsim"):
        return ["diwsim", "serve"]
    return [sys.executable, "-m", "diwsim.cli", "serve"]


def decode_obs(payload: str) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(payload), dtype="<f4")
    if flat.size != int(np.prod(OBS_SHAPE)):
        raise ProtocolError(f"bad observation payload size {flat.size}")
    return flat.reshape(OBS_SHAPE).copy()


class EnvClient:
    """Drives one environment session over a server subprocess."""

    def __init__(self, server_cmd: list = None):
        cmd = server_cmd or default_server_cmd()
        self.proc = subprocess.Popen(
            cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
            bufsize=1)

    def request(self, msg: dict) -> dict:
        if self.proc.poll() is not None:
            raise ProtocolError("server process has exited")
        self.proc.stdin.write(json.dumps(msg) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ProtocolError("server closed the connection")
        reply = json.loads(line)
        if "error" in reply:
            raise ProtocolError(reply["error"])
        return reply

    def reset(self, slice_spec: str, seed: int = 0,
              config: dict = None) -> np.ndarray:
        msg = {"cmd": "reset", "slice": slice_spec, "seed": seed}
        if config:
            msg["config"] = config
        reply = self.request(msg)
        self.n_steps = reply["info"]["n_steps"]
        return decode_obs(reply["obs"])

    def step(self, action):
        reply = self.request({"cmd": "step",
                              "action": [float(action[0]), float(action[1])]})
        return (decode_obs(reply["obs"]), float(reply["reward"]),
                bool(reply["done"]), reply["info"])

    def close(self):
        try:
            if self.proc.poll() is None:
                self.proc.stdin.write(json.dumps({"cmd": "close"}) + "\n")
                self.proc.stdin.close()
                self.proc.wait(timeout=10)
        except (OSError, subprocess.TimeoutExpired):
            self.proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
