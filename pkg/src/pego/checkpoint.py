"""Single-file binary container for models and datasets.

Layout, all integers little-endian:

    magic ``PEGO`` | u32 format version | u64 header length | header JSON
    | u64 tensor count | per tensor: u64 name length, name (UTF-8),
      u64 ndim, u64 dims..., row-major IEEE-754 payload

The header's ``dtype`` flag selects f64 or f32 payloads for the whole
file; loading always upcasts to f64. Files are written to a temp path
and renamed into place.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from .data import DomainDataset
from .errors import CheckpointError
from .vit import VitConfig, VitModel, model_from_arrays, model_to_arrays

MAGIC = b"PEGO"
FORMAT_VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4"}


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    dtype = header.get("dtype", "f64")
    if dtype not in _DTYPES:
        raise CheckpointError(f"unknown dtype flag {dtype!r}")
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated (needed {n} bytes at offset {self.off})")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(r.take(r.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    dtype = header.get("dtype", "f64")
    if dtype not in _DTYPES:
        raise CheckpointError(f"{path}: unknown dtype flag {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u64()):
        name = r.take(r.u64()).decode("utf-8")
        ndim = r.u64()
        if ndim > 8:
            raise CheckpointError(f"{path}: implausible rank {ndim} for tensor {name}")
        shape = tuple(r.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * np_dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=np_dtype).astype(np.float64).reshape(shape)
    return header, tensors


def save_model(path, model: VitModel, dtype: str = "f64") -> None:
    header = {"kind": "model", "dtype": dtype, "config": dataclasses.asdict(model.cfg)}
    write_container(path, header, model_to_arrays(model))


def load_model(path) -> VitModel:
    header, tensors = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found kind {header.get('kind')!r}")
    try:
        cfg = VitConfig(**header["config"])
        return model_from_arrays(cfg, tensors)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete model checkpoint: {exc}") from exc


def save_dataset(path, dataset: DomainDataset, dtype: str = "f64") -> None:
    header = {
        "kind": "dataset",
        "dtype": dtype,
        "config": {"num_classes": dataset.num_classes, "domains": list(dataset.domains)},
    }
    tensors: dict[str, np.ndarray] = {}
    for dom in dataset.domains:
        tensors[f"domain.{dom}.images"] = dataset.images[dom]
        tensors[f"domain.{dom}.labels"] = dataset.labels[dom].astype(np.float64)
    write_container(path, header, tensors)


def load_dataset(path) -> DomainDataset:
    header, tensors = read_container(path)
    if header.get("kind") != "dataset":
        raise CheckpointError(f"{path}: expected a dataset file, found kind {header.get('kind')!r}")
    try:
        domains = list(header["config"]["domains"])
        num_classes = int(header["config"]["num_classes"])
        images = {dom: tensors[f"domain.{dom}.images"] for dom in domains}
        labels = {dom: tensors[f"domain.{dom}.labels"].astype(np.int64) for dom in domains}
    except KeyError as exc:
        raise CheckpointError(f"{path}: incomplete dataset file: {exc}") from exc
    ds = DomainDataset(domains=domains, images=images, labels=labels, num_classes=num_classes)
    ds.validate()
    return ds
