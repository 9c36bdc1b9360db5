"""Binary model checkpoints and a TSV debug export.

Layout: a 16-byte header (8-byte magic, u32 version, u32 flags), then a
CRC-protected payload: a fixed hyperparameter block, the parameter tensors
as little-endian float64 in declared order (aspects, mem_keys, mem_vals,
mlp_w, mlp_b, mlp_h), an optional optimizer section (flag bit 0) holding the
Adam step, the epoch counter, and the moment tensors, and finally a CRC-32
trailer over the payload.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import ABLATIONS, ModelParams
from .training import AdamState

MAGIC = b"REDAMDL1"
VERSION = 1
FLAG_OPTIMIZER = 1

_HEADER = struct.Struct("<8sII")
_HYPER = struct.Struct("<QIIIII12s")   # num_items, k, d, m, s, ablation, config hash
_OPT = struct.Struct("<QQ")            # adam step, epochs completed


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState | None
    epoch: int
    config_hash: str


def _tensor_bytes(t: np.ndarray) -> bytes:
    return np.ascontiguousarray(t, dtype="<f8").tobytes()


def save_checkpoint(
    path: str,
    params: ModelParams,
    config_hash: str = "",
    adam: AdamState | None = None,
    epoch: int = 0,
) -> None:
    params.check_finite()
    flags = FLAG_OPTIMIZER if adam is not None else 0
    parts = [
        _HYPER.pack(
            params.num_items, params.k, params.dim,
            params.mem_slices, params.hidden,
            ABLATIONS.index(params.ablation),
            config_hash.encode("ascii")[:12].ljust(12, b"\0"),
        )
    ]
    for t in params.tensors():
        parts.append(_tensor_bytes(t))
    if adam is not None:
        parts.append(_OPT.pack(adam.step, epoch))
        for name in AdamState.TENSORS:
            parts.append(_tensor_bytes(adam.m[name]))
            parts.append(_tensor_bytes(adam.v[name]))
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def tensor(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    magic, version, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    payload = blob[_HEADER.size:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch (stored {stored_crc:#x}, computed {crc:#x})")

    rd = _Reader(payload)
    num_items, k, d, m, s, abl_code, hash_raw = _HYPER.unpack(rd.take(_HYPER.size))
    if abl_code >= len(ABLATIONS):
        raise CheckpointError(f"{path}: unknown ablation code {abl_code}")
    params = ModelParams(
        aspects=rd.tensor((num_items, k, d)),
        mem_keys=rd.tensor((m, d)),
        mem_vals=rd.tensor((m, d)),
        mlp_w=rd.tensor((s, d)),
        mlp_b=rd.tensor((s,)),
        mlp_h=rd.tensor((s,)),
        ablation=ABLATIONS[abl_code],
    )
    adam = None
    epoch = 0
    if flags & FLAG_OPTIMIZER:
        step, epoch = _OPT.unpack(rd.take(_OPT.size))
        adam = AdamState(step=int(step))
        for name, t in zip(AdamState.TENSORS, params.tensors()):
            adam.m[name] = rd.tensor(t.shape)
            adam.v[name] = rd.tensor(t.shape)
    if rd.pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - rd.pos} trailing payload bytes")
    return Checkpoint(params=params, adam=adam, epoch=int(epoch),
                      config_hash=hash_raw.rstrip(b"\0").decode("ascii", "replace"))


def export_params_tsv(params: ModelParams, out_dir: str, config_hash: str = "") -> list[str]:
    """Write each tensor as a TSV (debug view of a checkpoint); returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    hdr = f"# config_hash={config_hash}" if config_hash else None
    written = []

    def dump(name, rows, row_label):
        path = os.path.join(out_dir, f"params_{name}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            if hdr:
                fh.write(hdr + "\n")
            for label, vec in zip(row_label, rows):
                cells = "\t".join(f"{x:.12g}" for x in vec)
                fh.write(f"{label}\t{cells}\n")
        written.append(path)

    n, k, _ = params.aspects.shape
    dump(
        "aspects",
        params.aspects.reshape(n * k, -1),
        (f"{i}:{a}" for i in range(n) for a in range(k)),
    )
    dump("mem_keys", params.mem_keys, range(params.mem_slices))
    dump("mem_vals", params.mem_vals, range(params.mem_slices))
    dump("mlp_w", params.mlp_w, range(params.hidden))
    dump("mlp_b", [params.mlp_b], ["b"])
    dump("mlp_h", [params.mlp_h], ["h"])
    return written
