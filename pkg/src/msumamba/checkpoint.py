"""Single-file checkpoint format.

Layout: magic b"MSUM", little-endian uint64 header length, UTF-8 JSON
header (format_version, model config, tensor manifest with name / dtype /
shape / byte offset), then raw row-major IEEE-754 tensor payloads in
manifest order. Loading is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .errors import CheckpointError
from .network import ModelConfig, MSUMamba, build_model

MAGIC = b"MSUM"
FORMAT_VERSION = 1

_DTYPES = {"f32": (torch.float32, np.float32), "f64": (torch.float64, np.float64),
           "i64": (torch.int64, np.int64), "u8": (torch.uint8, np.uint8)}
_DTYPE_NAMES = {torch.float32: "f32", torch.float64: "f64",
                torch.int64: "i64", torch.uint8: "u8"}


def _flatten_state(obj: Any, prefix: str, tensors: dict[str, torch.Tensor]) -> Any:
    """Replace tensor leaves in a nested structure with named placeholders."""
    if isinstance(obj, torch.Tensor):
        name = f"{prefix}#{len(tensors)}"
        tensors[name] = obj
        return {"__tensor__": name}
    if isinstance(obj, dict):
        return {str(k): _flatten_state(v, f"{prefix}/{k}", tensors) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_flatten_state(v, f"{prefix}/{i}", tensors) for i, v in enumerate(obj)]
    if isinstance(obj, (int, float, str, bool)) or obj is None:
        return obj
    raise CheckpointError(f"cannot serialize training-state value of type {type(obj).__name__}")


def _restore_state(obj: Any, tensors: dict[str, torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return tensors[obj["__tensor__"]]
        out = {}
        for k, v in obj.items():
            key: Any = int(k) if k.lstrip("-").isdigit() else k
            out[key] = _restore_state(v, tensors)
        return out
    if isinstance(obj, list):
        return [_restore_state(v, tensors) for v in obj]
    return obj


def save_checkpoint(model: MSUMamba, path: str | Path,
                    training_state: Optional[dict] = None) -> None:
    """Write model parameters (and optional training state) to one file."""
    tensors: dict[str, torch.Tensor] = {}
    for name, t in model.state_dict().items():
        tensors[name] = t
    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "param_names": [n for n, _ in model.state_dict().items()],
    }
    if training_state is not None:
        header["training_state"] = _flatten_state(training_state, "train", tensors)

    manifest = []
    offset = 0
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous()
        dtype = _DTYPE_NAMES.get(arr.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        raw = arr.numpy().tobytes()
        manifest.append({"name": name, "dtype": dtype,
                         "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header["tensors"] = manifest

    head = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[MSUMamba, Optional[dict]]:
    """Rebuild the model from the embedded config and restore every tensor.

    Returns (model, training_state or None). Raises CheckpointError naming
    the defect on corrupt or unsupported files.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(MAGIC) + 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    (head_len,) = struct.unpack("<Q", data[4:12])
    if 12 + head_len > len(data):
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version "
                              f"{header.get('format_version')!r} (expected {FORMAT_VERSION})")

    payload = data[12 + head_len:]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        torch_dt, np_dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dt).itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path} is truncated: tensor {entry['name']!r} "
                                  f"extends past end of file")
        arr = np.frombuffer(payload, dtype=np_dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=start).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dt)

    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg)
    state = {n: tensors[n] for n in header["param_names"] if n in tensors}
    missing = [n for n in header["param_names"] if n not in tensors]
    if missing:
        raise CheckpointError(f"{path} tensor manifest is missing parameters: {missing[:3]}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path} parameters do not fit the embedded config: {e}") from e

    training_state = None
    if "training_state" in header:
        training_state = _restore_state(header["training_state"], tensors)
    return model, training_state
