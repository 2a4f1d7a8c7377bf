"""Binary artifact formats (checkpoint, activation store, SAE) and the hash manifest.

All numbers are little-endian. Matrices are float32, row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import ActivationRecord, Checkpoint, ModelConfig, param_shapes
from .sae import SAEParams

CKPT_MAGIC = b"MLM1"
ACT_MAGIC = b"ACT1"
SAE_MAGIC = b"SAE1"
UNKNOWN_LABEL = 255
N_CONFIG_INTS = 7


class ArtifactError(RuntimeError):
    """A missing, malformed or tampered artifact."""


def _read_exact(buf: memoryview, pos: int, n: int) -> tuple[memoryview, int]:
    if pos + n > len(buf):
        raise ArtifactError("truncated artifact")
    return buf[pos : pos + n], pos + n


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- checkpoint ---------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """``MLM1``, the config ints, then each parameter in declared order; provenance goes in a JSON sidecar."""
    path = Path(path)
    shapes = param_shapes(ckpt.config)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack(f"<{N_CONFIG_INTS}i", *ckpt.config.as_ints()))
        for name, shape in shapes.items():
            t = ckpt.params[name]
            if tuple(t.shape) != shape:
                raise ValueError(f"{name} has shape {tuple(t.shape)}, expected {shape}")
            f.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    _write_json(_sidecar(path), {"provenance": list(ckpt.provenance)})


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    buf = memoryview(path.read_bytes())
    magic, pos = _read_exact(buf, 0, 4)
    if bytes(magic) != CKPT_MAGIC:
        raise ArtifactError(f"{path}: bad magic {bytes(magic)!r}")
    raw, pos = _read_exact(buf, pos, 4 * N_CONFIG_INTS)
    n_layers, d_model, n_heads, vocab, seq, seed, d_mlp = struct.unpack(f"<{N_CONFIG_INTS}i", raw)
    cfg = ModelConfig(vocab, n_layers, d_model, n_heads, seq, seed, d_mlp)
    params = {}
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        raw, pos = _read_exact(buf, pos, 4 * n)
        params[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if pos != len(buf):
        raise ArtifactError(f"{path}: {len(buf) - pos} trailing bytes")
    side = _sidecar(path)
    provenance = tuple(json.loads(side.read_text())["provenance"]) if side.exists() else ("base",)
    return Checkpoint(cfg, params, provenance)


# -- activation store ---------------------------------------------------------

_ACT_HEADER = struct.Struct("<iHB")


def save_activations(records: Sequence[ActivationRecord], path: str | os.PathLike) -> None:
    """``ACT1``, (n_records, d_model) as int32, then per record: problem_id i32, layer u16, label u8, vector."""
    d = len(records[0].vector) if records else 0
    with open(path, "wb") as f:
        f.write(ACT_MAGIC)
        f.write(struct.pack("<ii", len(records), d))
        for r in records:
            vec = np.asarray(r.vector, dtype="<f4")
            if vec.shape != (d,):
                raise ValueError("all records must share d_model")
            label = UNKNOWN_LABEL if r.label is None else int(bool(r.label))
            f.write(_ACT_HEADER.pack(r.problem_id, r.layer, label))
            f.write(vec.tobytes())


def load_activations(path: str | os.PathLike) -> list[ActivationRecord]:
    buf = memoryview(Path(path).read_bytes())
    magic, pos = _read_exact(buf, 0, 4)
    if bytes(magic) != ACT_MAGIC:
        raise ArtifactError(f"{path}: bad magic {bytes(magic)!r}")
    raw, pos = _read_exact(buf, pos, 8)
    n, d = struct.unpack("<ii", raw)
    out = []
    for _ in range(n):
        raw, pos = _read_exact(buf, pos, _ACT_HEADER.size)
        pid, layer, label = _ACT_HEADER.unpack(raw)
        raw, pos = _read_exact(buf, pos, 4 * d)
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        out.append(ActivationRecord(pid, layer, vec, None if label == UNKNOWN_LABEL else bool(label)))
    if pos != len(buf):
        raise ArtifactError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


# -- SAE ----------------------------------------------------------------------

def save_sae(sae: SAEParams, path: str | os.PathLike) -> None:
    """``SAE1``, (d_model, d_sae) as int32, then W_enc, b_enc, threshold, W_dec, b_dec; metadata in a sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(SAE_MAGIC)
        f.write(struct.pack("<ii", sae.d_model, sae.d_sae))
        for arr in (sae.W_enc, sae.b_enc, sae.threshold, sae.W_dec, sae.b_dec):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {k: v for k, v in sae.meta.items() if k != "history"}
    meta["layer"] = sae.layer
    _write_json(_sidecar(path), meta)


def load_sae(path: str | os.PathLike) -> SAEParams:
    path = Path(path)
    buf = memoryview(path.read_bytes())
    magic, pos = _read_exact(buf, 0, 4)
    if bytes(magic) != SAE_MAGIC:
        raise ArtifactError(f"{path}: bad magic {bytes(magic)!r}")
    raw, pos = _read_exact(buf, pos, 8)
    d, m = struct.unpack("<ii", raw)
    arrays = []
    for shape in ((d, m), (m,), (m,), (m, d), (d,)):
        raw, pos = _read_exact(buf, pos, 4 * int(np.prod(shape)))
        arrays.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if pos != len(buf):
        raise ArtifactError(f"{path}: {len(buf) - pos} trailing bytes")
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return SAEParams(*arrays, layer=int(meta.get("layer", 0)), meta=meta)


# -- manifest -----------------------------------------------------------------

def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Manifest:
    """Content hashes and producing stage of every artifact under ``root``, keyed by relative path."""

    root: Path
    entries: dict[str, dict] = field(default_factory=dict)

    FILENAME = "manifest.json"

    @classmethod
    def load(cls, root: str | os.PathLike) -> "Manifest":
        root = Path(root)
        p = root / cls.FILENAME
        entries = json.loads(p.read_text())["artifacts"] if p.exists() else {}
        return cls(root, entries)

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.root / self.FILENAME, {"artifacts": dict(sorted(self.entries.items()))})

    def record(self, rel: str, stage: str, provenance: str = "") -> None:
        path = self.root / rel
        self.entries[rel] = {"sha256": sha256_file(path), "stage": stage, "provenance": provenance}
        for extra in (_sidecar(path),):
            if extra.exists():
                self.entries[str(Path(rel).with_name(extra.name))] = {
                    "sha256": sha256_file(extra), "stage": stage, "provenance": provenance}

    def has(self, rel: str) -> bool:
        return rel in self.entries and (self.root / rel).exists()

    def verify(self, rel: str) -> Path:
        """Path of a listed artifact whose bytes (and sidecar, if listed) still match the recorded hash."""
        if rel not in self.entries:
            raise FileNotFoundError(f"artifact {rel} is not in the manifest")
        path = self.root / rel
        if not path.exists():
            raise FileNotFoundError(f"artifact {rel} is listed but missing on disk")
        side = str(Path(rel).with_name(_sidecar(path).name))
        for name in (rel, side):
            if name in self.entries:
                got = sha256_file(self.root / name)
                if got != self.entries[name]["sha256"]:
                    raise ArtifactError(f"hash mismatch for {name}: manifest {self.entries[name]['sha256'][:12]}, "
                                        f"file {got[:12]}")
        return path
