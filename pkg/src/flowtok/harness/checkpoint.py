"""Checkpoint container: a JSON header readable without the payload, followed by
raw little-endian tensor bytes. Round trips are bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FTCKPT01"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    kind: str
    step: int = 0
    config_hash: str = ""
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_module(self, prefix: str, module: torch.nn.Module):
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().contiguous()

    def module_state(self, prefix: str) -> dict:
        pre = prefix + "."
        out = {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}
        if not out:
            raise CheckpointError(f"no tensors under prefix {prefix!r}")
        return out


def save_checkpoint(bundle: CheckpointBundle, path):
    path = Path(path)
    names = sorted(bundle.tensors)
    entries, blobs = [], []
    for name in names:
        t = bundle.tensors[name].detach().cpu().contiguous()
        arr = t.numpy()
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "nbytes": len(blob)})
        blobs.append(blob)
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": bundle.kind,
        "step": bundle.step,
        "config_hash": bundle.config_hash,
        "meta": bundle.meta,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a flowtok checkpoint (bad magic)")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {header.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return header


def load_checkpoint(path, expect_config_hash: str | None = None,
                    allow_hash_mismatch: bool = False) -> CheckpointBundle:
    header = read_header(path)
    if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
        msg = (f"{path}: checkpoint config hash {header['config_hash'][:12]} does not match "
               f"expected {expect_config_hash[:12]}")
        if not allow_hash_mismatch:
            raise CheckpointError(msg + " (pass the override flag to proceed)")
        warnings.warn(msg + " (override active, proceeding)")
    tensors = {}
    with open(path, "rb") as f:
        f.seek(8)
        hlen = int.from_bytes(f.read(8), "little")
        f.seek(16 + hlen)
        for entry in header["tensors"]:
            blob = f.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise CheckpointError(
                    f"{path}: truncated payload while reading tensor {entry['name']!r}"
                )
            arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"])).copy()
            if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
                raise CheckpointError(
                    f"{path}: shape/length mismatch for tensor {entry['name']!r}"
                )
            tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]))
    return CheckpointBundle(kind=header["kind"], step=header["step"],
                            config_hash=header["config_hash"], tensors=tensors,
                            meta=header["meta"])
