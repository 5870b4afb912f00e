"""PERCFLD v1 field files.

One ASCII header line

    PERCFLD v1 d=<d> sides=<n1,...> t=<t> y=<y1,...> method=<tag> [origin=<o1,...>]

then one little-endian float64 per vertex in row-major order. A field with a
vertex mask gets a sidecar ``<path>.mask``: header
``PERCMSK v1 d=<d> sides=<n1,...>`` and one byte (0 or 1) per vertex.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .env import LatticeBox, _parse_header
from .errors import FieldFormatError
from .parabolic import KernelSnapshot

FIELD_MAGIC = "PERCFLD v1"
MASK_MAGIC = "PERCMSK v1"

__all__ = ["save_field", "load_field", "mask_path"]


def mask_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".mask")


def _centered_origin(sides) -> tuple:
    return tuple(-((s - 1) // 2) for s in sides)


def _split_header(raw: bytes, magic: str) -> tuple:
    nl = raw.find(b"\n")
    if nl < 0:
        raise FieldFormatError("missing header line")
    try:
        line = raw[:nl].decode("ascii")
    except UnicodeDecodeError:
        raise FieldFormatError("header is not ASCII") from None
    return _parse_header(line, magic), raw[nl + 1:]


def save_field(
    field,
    path,
    box: Optional[LatticeBox] = None,
    t: float = 0.0,
    y=None,
    method: str = "none",
    mask: Optional[np.ndarray] = None,
) -> None:
    """Write a lattice field, and its mask sidecar when there is one.

    Parameters
    ----------
    field : KernelSnapshot or ndarray
        A snapshot supplies ``box``, ``t``, ``y``, ``method`` and ``mask``.
    box : LatticeBox, optional
        Needed for plain arrays; default is the centered box of that shape.
    """
    if isinstance(field, KernelSnapshot):
        values, box, t, y, method, mask = field.values, field.box, field.t, field.y, field.method, field.mask
    else:
        values = np.asarray(field, dtype=np.float64)
        box = box or LatticeBox(_centered_origin(values.shape), values.shape)
    if values.shape != box.sides:
        raise FieldFormatError(f"field shape {values.shape} != box shape {box.sides}")
    if " " in method or "=" in method:
        raise FieldFormatError("method tag may not contain spaces or '='")
    y = (0,) * box.d if y is None else tuple(int(c) for c in y)
    header = (
        f"{FIELD_MAGIC} d={box.d} sides={','.join(map(str, box.sides))} t={float(t)!r} "
        f"y={','.join(map(str, y))} method={method}"
    )
    if box.origin != _centered_origin(box.sides):
        header += f" origin={','.join(map(str, box.origin))}"
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    Path(path).write_bytes(header.encode("ascii") + b"\n" + payload)
    mp = mask_path(path)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != box.sides:
            raise FieldFormatError(f"mask shape {mask.shape} != box shape {box.sides}")
        mh = f"{MASK_MAGIC} d={box.d} sides={','.join(map(str, box.sides))}"
        mp.write_bytes(mh.encode("ascii") + b"\n" + mask.astype(np.uint8).tobytes())
    elif mp.exists():
        mp.unlink()


def load_field(path, d: Optional[int] = None) -> KernelSnapshot:
    """Read a PERCFLD v1 file (and its mask sidecar if present).

    Parameters
    ----------
    d : int, optional
        Expected dimension; a mismatch raises :class:`FieldFormatError`.

    Returns
    -------
    KernelSnapshot
        Without a sidecar the mask is all True.
    """
    meta, body = _split_header(Path(path).read_bytes(), FIELD_MAGIC)
    try:
        dim = int(meta["d"])
        sides = tuple(int(v) for v in meta["sides"].split(","))
        t = float(meta["t"])
        y = tuple(int(v) for v in meta["y"].split(","))
        method = meta["method"]
    except (KeyError, ValueError) as exc:
        raise FieldFormatError(f"bad PERCFLD header: {exc}") from None
    if d is not None and dim != d:
        raise FieldFormatError(f"file has d={dim}, expected d={d}")
    if len(sides) != dim or len(y) != dim:
        raise FieldFormatError(f"header d={dim} disagrees with sides {sides} or y {y}")
    origin = tuple(int(v) for v in meta["origin"].split(",")) if "origin" in meta else _centered_origin(sides)
    box = LatticeBox(origin, sides)
    n = box.n_vertices
    if len(body) != 8 * n:
        raise FieldFormatError(f"payload has {len(body)} bytes, expected {8 * n}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(sides)
    mp = mask_path(path)
    if mp.exists():
        mmeta, mbody = _split_header(mp.read_bytes(), MASK_MAGIC)
        if tuple(int(v) for v in mmeta.get("sides", "").split(",") if v) != sides:
            raise FieldFormatError("mask sidecar shape disagrees with the field")
        if len(mbody) != n:
            raise FieldFormatError(f"mask payload has {len(mbody)} bytes, expected {n}")
        raw = np.frombuffer(mbody, dtype=np.uint8)
        if raw.max(initial=0) > 1:
            raise FieldFormatError("mask bytes must be 0 or 1")
        mask = raw.astype(bool).reshape(sides)
    else:
        mask = np.ones(sides, dtype=bool)
    return KernelSnapshot(t, y, values, mask, box, method, {})
