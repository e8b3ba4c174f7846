"""Binary policy-weight exchange format (`DIWPOLICY1`).

Layout: 10-byte magic, then per tensor in fixed order: u16 LE name
length, UTF-8 name, u8 rank, u32 LE dims, f32 LE row-major data.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from .model import ActorCritic

MAGIC = b"DIWPOLICY1"

_LAYER_SPECS = (
    ("conv1.weight", (32, 3, 8, 8)), ("conv1.bias", (32,)),
    ("conv2.weight", (64, 32, 4, 4)), ("conv2.bias", (64,)),
    ("conv3.weight", (64, 64, 3, 3)), ("conv3.bias", (64,)),
    ("fc1.weight", (512, 3136)), ("fc1.bias", (512,)),
    ("head_mean.weight", (2, 512)), ("head_mean.bias", (2,)),
    ("head_logstd", (2,)),
    ("value_head.weight", (1, 512)), ("value_head.bias", (1,)),
)


class WeightError(Exception):
    pass


class ShapeMismatch(WeightError):
    pass


class BadMagic(WeightError):
    pass


class TruncatedFile(WeightError):
    pass


def export_weights(model: ActorCritic, path):
    """Write the model's parameters in the shared binary format."""
    state = {k: v.detach().cpu().numpy() for k, v in
             model.state_dict().items()}
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, shape in _LAYER_SPECS:
            if name not in state:
                raise ShapeMismatch(f"model is missing tensor {name}")
            t = state[name]
            if t.shape != shape:
                raise ShapeMismatch(
                    f"{name}: expected {shape}, got {t.shape}")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.astype("<f4").tobytes())


def import_weights(path) -> ActorCritic:
    """Load a weight file into a fresh model."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise BadMagic("not a policy weight file")
    off = len(MAGIC)
    state = {}
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
        state[name] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    model = ActorCritic()
    model.load_state_dict(state)
    return model
