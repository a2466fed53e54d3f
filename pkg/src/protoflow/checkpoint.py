"""PFPW parameter checkpoints.

Layout (little endian)::

    b"PFPW" | u32 version | u32 meta_len | meta_len bytes of JSON | u32 n_tensors
    per tensor: u16 name_len | name (utf-8) | u32 rank | rank x u32 dims | f64 data (C order)

The JSON header carries everything needed to rebuild the model: flow kind
and hyper-parameters, solver kind, integral time and step count, classifier
gamma, episode shape and mode.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import ArtifactMismatch, FormatError, TruncatedFileError
from .metatrain import MetaOptimizer, build_model
from .protoclass import ClassifierConfig
from .solvers import SolverConfig

PFPW_MAGIC = b"PFPW"
PFPW_VERSION = 1


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def encode(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [PFPW_MAGIC, struct.pack("<II", PFPW_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(raw)
    if r.take(4) != PFPW_MAGIC:
        raise FormatError("not a PFPW checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != PFPW_VERSION:
        raise FormatError(f"unsupported PFPW version {version}")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return tensors, metadata


def save_checkpoint(model: MetaOptimizer, path, extra: dict | None = None) -> None:
    meta = model.metadata()
    if extra:
        meta["extra"] = extra
    Path(path).write_bytes(encode(model.state_dict(), meta))


def model_from_metadata(meta: dict) -> MetaOptimizer:
    try:
        solver = SolverConfig(meta["solver"], float(meta["integral_time"]), int(meta["steps"]))
        classifier = ClassifierConfig(gamma=float(meta["gamma"]))
        hp = dict(meta.get("flow_hparams") or {})
        if meta["flow"] != "gradnet":
            hp = {k: v for k, v in hp.items() if k == "init_noise"}
        return build_model(meta["flow"], int(meta["n_way"]), int(meta["dim"]), solver, classifier,
                           meta["mode"], seed=int(meta.get("seed", 0)),
                           correction_hidden=meta.get("correction_hidden"), **hp)
    except KeyError as exc:
        raise FormatError(f"checkpoint metadata missing {exc}") from exc


def load_checkpoint(path) -> MetaOptimizer:
    tensors, meta = decode(Path(path).read_bytes())
    model = model_from_metadata(meta)
    expected = {p.name: p.shape for p in model.parameters()}
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        raise ArtifactMismatch(f"checkpoint tensors do not match model: missing {missing}, unexpected {unexpected}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ArtifactMismatch(f"tensor {name!r} has shape {tensors[name].shape}, model expects {shape}")
    model.load_state_dict(tensors)
    return model
