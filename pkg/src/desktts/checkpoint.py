"""Checkpoint directories: a JSON manifest plus one raw little-endian binary
blob per named array. Round-trips are bit-exact."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    step: int
    phase: str
    outputs_per_step: int
    config_text: str
    config_sha256: str
    arrays: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    *,
    step: int,
    phase: str,
    outputs_per_step: int,
    config_text: str,
    extra: dict | None = None,
) -> Path:
    """Write a checkpoint directory atomically (temp dir + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    index = {}
    try:
        for i, (name, arr) in enumerate(sorted(arrays.items())):
            arr = np.ascontiguousarray(arr)
            dtype_name = _DTYPE_NAMES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
            if dtype_name is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for array {name!r}")
            blob = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
            fname = f"{i:04d}.bin"
            (tmp / fname).write_bytes(blob)
            index[name] = {"shape": list(arr.shape), "dtype": dtype_name, "file": fname}
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "phase": phase,
        "outputs_per_step": int(outputs_per_step),
        "config_sha256": config_hash(config_text),
        "config_text": config_text,
        "params": index,
        "extra": extra or {},
    }
    (tmp / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {manifest.get('format_version')}"
        )
    arrays = {}
    for name, meta in manifest["params"].items():
        blob = (path / meta["file"]).read_bytes()
        try:
            arr = np.frombuffer(blob, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
        except ValueError as exc:
            raise CheckpointError(f"{path / meta['file']}: corrupt blob for {name!r}: {exc}") from exc
        arrays[name] = arr.copy()
    return Checkpoint(
        step=manifest["step"],
        phase=manifest["phase"],
        outputs_per_step=manifest["outputs_per_step"],
        config_text=manifest["config_text"],
        config_sha256=manifest["config_sha256"],
        arrays=arrays,
        extra=manifest.get("extra", {}),
    )


def module_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    """Named parameter and buffer tensors of a torch module as numpy arrays."""
    out = {}
    for name, p in module.state_dict().items():
        out[prefix + name] = p.detach().cpu().numpy().copy()
    return out


def load_module_arrays(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy checkpoint arrays into a module's parameters/buffers in place."""
    import torch

    state = module.state_dict()
    with torch.no_grad():
        for name, tensor in state.items():
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing array {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {key!r}: checkpoint {tuple(arr.shape)} vs module {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype))
