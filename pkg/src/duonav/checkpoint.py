"""Binary checkpoint format for named parameter tensors.

Layout (little-endian): magic "LANA", format version u32, then per
parameter: name length u32, utf-8 name, rank u32, dims u32 each, raw f64
data. A JSON manifest of names and shapes is written alongside for
inspection.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"LANA"
VERSION = 1


def save_params(params: dict[str, Tensor], path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            arr = np.asarray(tensor.data, dtype="<f8")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    manifest = {name: list(t.shape) for name, t in params.items()}
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w") as f:
        json.dump({"version": VERSION, "parameters": manifest}, f, indent=1)


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> f64 array (insertion-ordered)."""
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.copy()
    return out


def save_optimizer_state(state: dict, path: str | Path) -> None:
    """Adam moment sidecar: reuses the checkpoint format plus a step count."""
    tensors = {}
    for name, (m, v) in state["moments"].items():
        tensors[f"m/{name}"] = Tensor(m)
        tensors[f"v/{name}"] = Tensor(v)
    tensors["step"] = Tensor(float(state["step"]))
    save_params(tensors, path)


def load_optimizer_state(path: str | Path) -> dict:
    arrays = load_arrays(path)
    step = int(arrays.pop("step"))
    moments = {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        moments.setdefault(name, [None, None])
        moments[name][0 if kind == "m" else 1] = arr
    return {"step": step, "moments": {k: tuple(v) for k, v in moments.items()}}
