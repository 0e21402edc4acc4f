"""Binary instance datasets, their text export, and parameter checkpoints.

All numbers are little-endian; floats are IEEE-754 doubles so every round trip
is bit-exact.

Dataset layout::

    magic[8] version:u32 count:u32
    per instance: flags:u8 n:u32 capacity:f64
                  depot[2] coords[2n] demands[n] (L[1]) (tw_start[n+1] tw_end[n+1] service[n])

Checkpoint layout::

    magic[8] version:u32 embed_dim:u32 num_heads:u32 num_layers:u32 clip:f64
    num_tensors:u32 { name_len:u16 name ndim:u8 dims:u32* }
    meta_len:u32 meta(json) count:u64 data:f64[count]
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import BinaryIO, List, Optional, Sequence, Tuple

import numpy as np

from .policy_net import ArchConfig, Layout, ParamVector, build_layout
from .vrp_core import Instance, make_variant

DATASET_MAGIC = b"FRVRPDS\x00"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"FRCKPT\x00\x00"
CHECKPOINT_VERSION = 1

_F_OPEN, _F_BACK, _F_LIMIT, _F_TW, _F_LHF = 1, 2, 4, 8, 16


class CorruptFile(ValueError):
    """Raised when a file is truncated, has the wrong magic, or an unknown version."""


class LayoutMismatch(ValueError):
    pass


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise CorruptFile(f"unexpected end of file (wanted {size} bytes, got {len(buf)})")
    return buf


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def _read_f64(fh: BinaryIO, count: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)


def _write_f64(fh: BinaryIO, arr) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


# datasets ---------------------------------------------------------------------

def _flags(inst: Instance) -> int:
    s = inst.spec
    return (_F_OPEN * s.open | _F_BACK * s.backhaul | _F_LIMIT * s.duration_limit
            | _F_TW * s.time_windows | _F_LHF * inst.linehaul_first)


def write_dataset(instances: Sequence[Instance], path) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(instances)))
    for inst in instances:
        buf.write(struct.pack("<BId", _flags(inst), inst.n, inst.capacity))
        _write_f64(buf, inst.depot)
        _write_f64(buf, inst.coords.ravel())
        _write_f64(buf, inst.demands)
        if inst.spec.duration_limit:
            _write_f64(buf, [inst.duration_limit])
        if inst.spec.time_windows:
            _write_f64(buf, inst.tw_start)
            _write_f64(buf, inst.tw_end)
            _write_f64(buf, inst.service)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_instance(fh: BinaryIO) -> Instance:
    flags, n, cap = _unpack(fh, "<BId")
    if flags >= 32:
        raise CorruptFile(f"unknown flag bits {flags:#x}")
    spec = make_variant(bool(flags & _F_OPEN), bool(flags & _F_BACK), bool(flags & _F_LIMIT),
                        bool(flags & _F_TW))
    depot = _read_f64(fh, 2)
    coords = _read_f64(fh, 2 * n).reshape(n, 2)
    demands = _read_f64(fh, n)
    limit = float(_read_f64(fh, 1)[0]) if spec.duration_limit else None
    tw = (None, None, None)
    if spec.time_windows:
        tw = (_read_f64(fh, n + 1), _read_f64(fh, n + 1), _read_f64(fh, n))
    return Instance(depot, coords, demands, spec, capacity=cap, duration_limit=limit,
                    tw_start=tw[0], tw_end=tw[1], service=tw[2],
                    linehaul_first=bool(flags & _F_LHF))


def read_dataset(path) -> List[Instance]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != DATASET_MAGIC:
            raise CorruptFile("not an instance dataset (bad magic)")
        version, count = _unpack(fh, "<II")
        if version != DATASET_VERSION:
            raise CorruptFile(f"unsupported dataset version {version}")
        out = [_read_instance(fh) for _ in range(count)]
        if fh.read(1):
            raise CorruptFile("trailing bytes after the last instance")
    return out


def _fmt(arr) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(arr))


def export_text(instances: Sequence[Instance], path) -> None:
    """Human-readable dump, one ``key: value`` block per instance."""
    with open(path, "w") as fh:
        for k, inst in enumerate(instances):
            fh.write(f"instance: {k}\n")
            fh.write(f"variant: {inst.spec.name}\n")
            fh.write(f"n: {inst.n}\n")
            fh.write(f"capacity: {inst.capacity!r}\n")
            fh.write(f"linehaul_first: {int(inst.linehaul_first)}\n")
            fh.write(f"depot: {_fmt(inst.depot)}\n")
            fh.write(f"coords: {_fmt(inst.coords)}\n")
            fh.write(f"demands: {_fmt(inst.demands)}\n")
            if inst.spec.duration_limit:
                fh.write(f"duration_limit: {inst.duration_limit!r}\n")
            if inst.spec.time_windows:
                fh.write(f"tw_start: {_fmt(inst.tw_start)}\n")
                fh.write(f"tw_end: {_fmt(inst.tw_end)}\n")
                fh.write(f"service: {_fmt(inst.service)}\n")
            fh.write("\n")


# checkpoints ------------------------------------------------------------------

def save_checkpoint(params: ParamVector, meta: Optional[dict], path, arch: Optional[ArchConfig] = None) -> None:
    arch = arch or params.arch
    if arch is None:
        raise ValueError("checkpoint needs an ArchConfig")
    if build_layout(arch) != params.layout:
        raise LayoutMismatch("parameter layout does not match the given arch")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIIId", CHECKPOINT_VERSION, arch.embed_dim, arch.num_heads,
                          arch.num_layers, arch.clip))
    buf.write(struct.pack("<I", len(params.layout.entries)))
    for name, shape in params.layout.entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<Q", len(params.data)))
    _write_f64(buf, params.data)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expect_arch: Optional[ArchConfig] = None) -> Tuple[ParamVector, dict]:
    """Read a checkpoint; if ``expect_arch`` is given its layout must match."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise CorruptFile("not a checkpoint (bad magic)")
        version, d, h, layers, clip = _unpack(fh, "<IIIId")
        if version != CHECKPOINT_VERSION:
            raise CorruptFile(f"unsupported checkpoint version {version}")
        try:
            arch = ArchConfig(d, h, layers, clip)
        except ValueError as exc:
            raise CorruptFile(f"invalid arch in checkpoint: {exc}") from None
        (count,) = _unpack(fh, "<I")
        entries = []
        for _ in range(count):
            (ln,) = _unpack(fh, "<H")
            name = _read_exact(fh, ln).decode()
            (ndim,) = _unpack(fh, "<B")
            entries.append((name, tuple(_unpack(fh, f"<{ndim}I"))))
        (mlen,) = _unpack(fh, "<I")
        meta = json.loads(_read_exact(fh, mlen).decode())
        (size,) = _unpack(fh, "<Q")
        data = _read_f64(fh, size)
        if fh.read(1):
            raise CorruptFile("trailing bytes after parameter data")
    layout = Layout(tuple(entries))
    if layout != build_layout(arch) or layout.total_len != size:
        raise CorruptFile("stored layout is inconsistent with the stored arch")
    if expect_arch is not None and build_layout(expect_arch) != layout:
        raise LayoutMismatch(f"checkpoint arch {arch} does not match expected {expect_arch}")
    return ParamVector(data, layout, arch), meta
