"""Single-file checkpoint format, byte-reproducible by construction.

Layout: 8-byte magic "VICLF01\\n", 8-byte big-endian header length, a
canonical-JSON header (stage, config hash, codebook geometry, tensor
table sorted by name), then raw little-endian tensor bytes in header
order, codebook entries first. No timestamps or environment data are
stored, so identical weights always serialize to identical bytes. A
.json sidecar mirrors the header for diffing without binary tooling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .tokenizer import Codebook

MAGIC = b"VICLF01\n"
STAGES = ("backbone", "pg", "multi")
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CheckpointData:
    stage: str
    config_hash: str
    state: dict[str, torch.Tensor]
    codebook: Codebook
    extra: dict


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


def save_checkpoint(
    path: Path | str,
    stage: str,
    state: dict[str, torch.Tensor],
    codebook: Codebook,
    config_hash: str,
    extra: dict | None = None,
) -> Path:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    path = Path(path)
    names = sorted(state)
    table = []
    for name in names:
        t = state[name]
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype}")
        table.append({"name": name, "shape": list(t.shape), "dtype": dtype})
    header = {
        "stage": stage,
        "config_hash": config_hash,
        "codebook": {
            "shape": list(codebook.entries.shape),
            "patch_size": codebook.patch_size,
        },
        "tensors": table,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(">Q", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(codebook.entries, dtype=np.float64).tobytes())
        for name in names:
            f.write(_tensor_bytes(state[name]))
    with open(str(path) + ".json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_checkpoint(
    path: Path | str,
    expect_stage: str | None = None,
    expect_config_hash: str | None = None,
) -> CheckpointData:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a VICLF01 checkpoint")
        (hlen,) = struct.unpack(">Q", f.read(8))
        header = json.loads(f.read(hlen))
        if header["stage"] not in STAGES:
            raise CheckpointError(f"{path}: unknown stage {header['stage']!r}")
        if expect_stage is not None and header["stage"] != expect_stage:
            raise CheckpointError(
                f"{path}: stage is {header['stage']!r}, expected {expect_stage!r}"
            )
        if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
            raise CheckpointError(
                f"{path}: config hash {header['config_hash']} does not match "
                f"current config {expect_config_hash}"
            )
        cb_shape = header["codebook"]["shape"]
        n = int(np.prod(cb_shape))
        entries = np.frombuffer(f.read(n * 8), dtype=np.float64).reshape(cb_shape)
        codebook = Codebook(
            entries=entries.copy(), patch_size=header["codebook"]["patch_size"]
        )
        state = {}
        for rec in header["tensors"]:
            dt = _DTYPES[rec["dtype"]]
            count = int(np.prod(rec["shape"])) if rec["shape"] else 1
            raw = f.read(count * dt().itemsize)
            arr = np.frombuffer(raw, dtype=dt).reshape(rec["shape"]).copy()
            state[rec["name"]] = torch.from_numpy(arr)
        trailing = f.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return CheckpointData(
        stage=header["stage"],
        config_hash=header["config_hash"],
        state=state,
        codebook=codebook,
        extra=header["extra"],
    )
