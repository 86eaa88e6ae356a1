"""Binary and text file formats.

SWF1 field dump: 8-byte magic "SWFIELD1", little-endian u32 nx, u32 ny,
f64 lx, f64 ly, then nx*ny little-endian f64 values row-major over
(x index, y index).  Every other on-disk artifact reuses SWF1 blocks as its
payload: trajectory bundles (SWB1) and calibration datasets (SWDS1).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import Grid, ScalarField

SWF1_MAGIC = b"SWFIELD1"
BUNDLE_MAGIC = b"SWBNDL1\n"
DATASET_MAGIC = b"SWDS1\n"


class FormatError(ValueError):
    """File does not follow the advertised layout."""


def pack_field(f: ScalarField) -> bytes:
    g = f.grid
    header = SWF1_MAGIC + struct.pack("<IIdd", g.nx, g.ny, g.lx, g.ly)
    return header + f.values.astype("<f8").tobytes(order="C")


def unpack_field(buf: bytes, offset: int = 0) -> tuple[ScalarField, int]:
    """Decode one SWF1 block starting at offset; returns (field, next offset)."""
    if buf[offset:offset + 8] != SWF1_MAGIC:
        raise FormatError("bad SWF1 magic")
    nx, ny, lx, ly = struct.unpack_from("<IIdd", buf, offset + 8)
    start = offset + 8 + 24
    n = nx * ny
    vals = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(nx, ny)
    field = ScalarField(Grid(nx, ny, lx, ly), vals.copy())
    if not field.is_finite():
        raise FormatError("SWF1 payload contains non-finite values")
    return field, start + 8 * n


def write_field(path: str | Path, f: ScalarField) -> None:
    Path(path).write_bytes(pack_field(f))


def read_field(path: str | Path) -> ScalarField:
    field, _ = unpack_field(Path(path).read_bytes())
    return field


def write_state_checkpoint(prefix: str | Path, state, params_text: str = "") -> None:
    """Three SWF1 files (u, v, eta) plus a plain-text sidecar with t and step."""
    prefix = Path(prefix)
    write_field(prefix.with_suffix(".u.swf"), state.vel.u)
    write_field(prefix.with_suffix(".v.swf"), state.vel.v)
    write_field(prefix.with_suffix(".eta.swf"), state.eta)
    sidecar = f"t = {state.t!r}\nstep = {state.step}\n" + params_text
    prefix.with_suffix(".txt").write_text(sidecar)


def read_state_checkpoint(prefix: str | Path):
    from .grid import VectorField
    from .rsw import FlowState

    prefix = Path(prefix)
    u = read_field(prefix.with_suffix(".u.swf"))
    v = read_field(prefix.with_suffix(".v.swf"))
    eta = read_field(prefix.with_suffix(".eta.swf"))
    meta = {}
    for line in prefix.with_suffix(".txt").read_text().splitlines():
        if "=" in line:
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    return FlowState(
        vel=VectorField(u, v),
        eta=eta,
        t=float(meta.get("t", 0.0)),
        step=int(meta.get("step", 0)),
    )


def write_bundle(path: str | Path, records: list[dict]) -> None:
    """Trajectory bundle: header JSON line, then per record a JSON meta line
    followed by its SWF1 blocks (one per listed field name)."""
    chunks = [BUNDLE_MAGIC]
    names = sorted(records[0].keys() - {"t", "step"}) if records else []
    chunks.append(json.dumps({"count": len(records), "fields": names}).encode() + b"\n")
    for rec in records:
        meta = {"t": rec["t"], "step": rec["step"]}
        chunks.append(json.dumps(meta).encode() + b"\n")
        for name in names:
            chunks.append(pack_field(rec[name]))
    Path(path).write_bytes(b"".join(chunks))


def read_bundle(path: str | Path) -> list[dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(BUNDLE_MAGIC):
        raise FormatError("bad bundle magic")
    offset = len(BUNDLE_MAGIC)
    nl = buf.index(b"\n", offset)
    header = json.loads(buf[offset:nl])
    offset = nl + 1
    records = []
    for _ in range(header["count"]):
        nl = buf.index(b"\n", offset)
        meta = json.loads(buf[offset:nl])
        offset = nl + 1
        rec = {"t": meta["t"], "step": meta["step"]}
        for name in header["fields"]:
            field, offset = unpack_field(buf, offset)
            rec[name] = field
        records.append(rec)
    return records


def write_dataset(path: str | Path, dataset) -> None:
    """Calibration dataset: magic, JSON header (count, grid, provenance),
    then per sample u32 step index, f64 residual norm and the SWF1 payload."""
    g = dataset.grid
    header = {
        "count": len(dataset.samples),
        "nx": g.nx,
        "ny": g.ny,
        "lx": g.lx,
        "ly": g.ly,
        "provenance": dataset.provenance,
    }
    chunks = [DATASET_MAGIC, json.dumps(header).encode() + b"\n"]
    for s in dataset.samples:
        chunks.append(struct.pack("<Id", s.step_index, s.residual_norm))
        chunks.append(pack_field(s.stream))
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path: str | Path):
    from .calibrate import CalibrationDataset, CalibrationSample

    buf = Path(path).read_bytes()
    if not buf.startswith(DATASET_MAGIC):
        raise FormatError("bad dataset magic")
    offset = len(DATASET_MAGIC)
    nl = buf.index(b"\n", offset)
    header = json.loads(buf[offset:nl])
    offset = nl + 1
    samples = []
    for _ in range(header["count"]):
        step_index, residual = struct.unpack_from("<Id", buf, offset)
        offset += struct.calcsize("<Id")
        field, offset = unpack_field(buf, offset)
        samples.append(
            CalibrationSample(stream=field, step_index=step_index, residual_norm=residual)
        )
    grid = Grid(header["nx"], header["ny"], header["lx"], header["ly"])
    return CalibrationDataset(samples=samples, grid=grid, provenance=header["provenance"])


def write_kv(path: str | Path, mapping: dict) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"malformed key-value line: {line!r}")
        out[key.strip()] = val.strip()
    return out


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)  # shortest exact-roundtrip form
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)
