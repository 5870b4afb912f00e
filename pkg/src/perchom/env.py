"""Lattice geometry and reproducible i.i.d. conductance environments.

Vertices of a box are enumerated in row-major order (last axis fastest).
Bonds are grouped by direction ``k = 0..d-1`` and, inside a direction,
ordered by the row-major index of their base vertex ``x`` (the bond joins
``x`` and ``x + e_k``). Conductances are stored per direction as arrays of
shape ``sides`` with axis ``k`` shortened by one.

Every conductance is a pure function of the seed, the absolute lattice
coordinates of the bond and the law tag, obtained from a counter-based
hash. Generating a sub-box therefore reproduces the shared bonds of any
super-box bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FieldFormatError, GeometryError, ParameterError, SubcriticalError

LAWS = ("bernoulli-unit", "uniform-on-[lambda,1]")
_LAW_ALIASES = {
    "bernoulli-unit": "bernoulli-unit",
    "bernoulli": "bernoulli-unit",
    "uniform-on-[lambda,1]": "uniform-on-[lambda,1]",
    "uniform-on-[λ,1]": "uniform-on-[lambda,1]",
    "uniform": "uniform-on-[lambda,1]",
}
_LAW_IDS = {"bernoulli-unit": 1, "uniform-on-[lambda,1]": 2, "custom": 3}

SUBCRITICAL_GUARD = {2: 0.51}

_M64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_C3 = np.uint64(0xD6E8FEB86659FD93)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = z ^ (z >> np.uint64(30))
    z = z * _C1
    z = z ^ (z >> np.uint64(27))
    z = z * _C2
    return z ^ (z >> np.uint64(31))


def _as_u64(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(np.uint64)
    return arr.astype(np.uint64)


def hash_uniform(seed, coords: np.ndarray, k: int, law_id: int, stream: int) -> np.ndarray:
    """Uniform draws in [0, 1) from a keyed hash of bond coordinates.

    Parameters
    ----------
    seed : int or ndarray of uint64
        Seed(s); arrays broadcast against the leading axes of ``coords``.
    coords : ndarray of int, shape (..., d)
        Absolute base-vertex coordinates of the bonds.
    k : int
        Bond direction.
    law_id : int
        Numeric law tag mixed into the key.
    stream : int
        Independent stream index (0 decides open/closed, 1 the value).

    Returns
    -------
    ndarray of float64, shape coords.shape[:-1] broadcast with seed
    """
    coords = np.asarray(coords, dtype=np.int64)
    with np.errstate(over="ignore"):
        key = np.uint64((law_id * 131 + stream * 7 + k * 1_000_003 + 1) & _M64)
        h = _mix(_as_u64(seed) ^ _mix(np.asarray(key * _GOLDEN, dtype=np.uint64)))
        for i in range(coords.shape[-1]):
            c = coords[..., i].view(np.uint64)
            h = _mix(h ^ (c * _C3 + np.uint64(i + 1) * _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(seed: int, *counters: int) -> int:
    """Derive a child seed from a parent seed and integer counters."""
    with np.errstate(over="ignore"):
        h = _mix(np.array([seed & _M64], dtype=np.uint64))
        for c in counters:
            h = _mix(h ^ (np.array([c & _M64], dtype=np.uint64) * _C3 + _GOLDEN))
    return int(h[0])


def normalize_law(law: str) -> str:
    try:
        return _LAW_ALIASES[law]
    except KeyError:
        raise ParameterError(f"unknown conductance law {law!r}; expected one of {LAWS}") from None


def check_supercritical(p: float, d: int, force: bool = False) -> None:
    """Refuse parameters at or below the supercritical guard (d=2: p <= 0.51)."""
    limit = SUBCRITICAL_GUARD.get(d)
    if limit is not None and p <= limit and not force:
        raise SubcriticalError(
            f"p={p} is not safely supercritical for d={d} (guard p > {limit}); "
            "pass force=True to run anyway"
        )


@dataclass(frozen=True)
class LatticeBox:
    """Axis-aligned box of lattice vertices ``origin + [0, sides)``.

    Parameters
    ----------
    origin : tuple of int
        Coordinates of the lexicographically smallest vertex.
    sides : tuple of int
        Number of vertices per axis. Environments need at least 2 per axis;
        side 1 is allowed so that level-0 triadic cubes have a box view.
    """

    origin: tuple
    sides: tuple

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        sides = tuple(int(v) for v in self.sides)
        if len(origin) != len(sides):
            raise GeometryError("origin and sides have different lengths")
        if len(sides) not in (2, 3):
            raise GeometryError(f"dimension must be 2 or 3, got {len(sides)}")
        if min(sides) < 1:
            raise GeometryError(f"side lengths must be positive, got {sides}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "sides", sides)

    @classmethod
    def centered(cls, side: int, d: int = 2) -> "LatticeBox":
        """Box of ``side`` vertices per axis whose middle vertex is the origin.

        For odd sides this is the cube ``[-(side-1)/2, (side-1)/2]^d``; for
        even sides the extra layer sits on the positive side.
        """
        lo = -((side - 1) // 2)
        return cls((lo,) * d, (side,) * d)

    @property
    def d(self) -> int:
        return len(self.sides)

    @property
    def shape(self) -> tuple:
        return self.sides

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.sides))

    @property
    def hi(self) -> tuple:
        """Largest vertex coordinates (inclusive)."""
        return tuple(o + s - 1 for o, s in zip(self.origin, self.sides))

    @property
    def n_bonds(self) -> int:
        return sum(int(np.prod(self.bond_shape(k))) for k in range(self.d))

    def bond_shape(self, k: int) -> tuple:
        s = list(self.sides)
        s[k] -= 1
        return tuple(s)

    def axes(self) -> list:
        """Per-axis coordinate ranges."""
        return [np.arange(o, o + s, dtype=np.int64) for o, s in zip(self.origin, self.sides)]

    def coords(self) -> np.ndarray:
        """All vertex coordinates, shape ``sides + (d,)``, row-major."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    def bond_coords(self, k: int) -> np.ndarray:
        """Base-vertex coordinates of the direction-``k`` bonds."""
        ax = self.axes()
        ax[k] = ax[k][:-1]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def contains(self, x) -> bool:
        x = tuple(int(v) for v in x)
        return all(o <= v < o + s for v, o, s in zip(x, self.origin, self.sides))

    def contains_box(self, other: "LatticeBox") -> bool:
        return self.contains(other.origin) and self.contains(other.hi)

    def index_of(self, x) -> int:
        """Row-major index of vertex ``x``."""
        if not self.contains(x):
            raise GeometryError(f"vertex {tuple(x)} outside box")
        rel = [int(v) - o for v, o in zip(x, self.origin)]
        return int(np.ravel_multi_index(rel, self.sides))

    def vertex_of(self, index: int) -> tuple:
        rel = np.unravel_index(int(index), self.sides)
        return tuple(int(r) + o for r, o in zip(rel, self.origin))

    def local(self, x) -> tuple:
        """Array index tuple of vertex ``x``."""
        if not self.contains(x):
            raise GeometryError(f"vertex {tuple(x)} outside box")
        return tuple(int(v) - o for v, o in zip(x, self.origin))

    def slices_of(self, inner: "LatticeBox") -> tuple:
        """Array slices selecting ``inner`` inside this box."""
        if not self.contains_box(inner):
            raise GeometryError(f"{inner} is not contained in {self}")
        return tuple(
            slice(io - o, io - o + s) for io, o, s in zip(inner.origin, self.origin, inner.sides)
        )

    def boundary_mask(self) -> np.ndarray:
        """Vertices on the geometric boundary (some coordinate extremal)."""
        mask = np.zeros(self.sides, dtype=bool)
        for k in range(self.d):
            idx = [slice(None)] * self.d
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        return mask

    def ball_mask(self, center, r: float) -> np.ndarray:
        """Vertices with Euclidean distance ``< r`` from ``center``."""
        dist2 = np.zeros(self.sides, dtype=np.float64)
        for k, ax in enumerate(self.axes()):
            shape = [1] * self.d
            shape[k] = -1
            dist2 = dist2 + ((ax - center[k]).astype(np.float64) ** 2).reshape(shape)
        return dist2 < float(r) ** 2

    def distance2_from(self, y) -> np.ndarray:
        """Squared Euclidean distance of every vertex to ``y``."""
        dist2 = np.zeros(self.sides, dtype=np.float64)
        for k, ax in enumerate(self.axes()):
            shape = [1] * self.d
            shape[k] = -1
            dist2 = dist2 + ((ax - y[k]).astype(np.float64) ** 2).reshape(shape)
        return dist2


@dataclass(frozen=True)
class TriadicCube:
    """Triadic cube ``z + (-3^m/2, 3^m/2)^d`` with ``z`` in ``3^m Z^d``."""

    level: int
    center: tuple

    def __post_init__(self):
        center = tuple(int(v) for v in self.center)
        if self.level < 0:
            raise GeometryError("level must be nonnegative")
        side = 3 ** self.level
        if any(c % side for c in center):
            raise GeometryError(f"center {center} not in 3^{self.level} Z^d")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "level", int(self.level))

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def side(self) -> int:
        return 3 ** self.level

    @property
    def size(self) -> int:
        return self.side

    @property
    def lo(self) -> tuple:
        h = (self.side - 1) // 2
        return tuple(c - h for c in self.center)

    @property
    def hi(self) -> tuple:
        h = (self.side - 1) // 2
        return tuple(c + h for c in self.center)

    @property
    def volume(self) -> int:
        return self.side ** self.d

    def as_box(self) -> LatticeBox:
        return LatticeBox(self.lo, (self.side,) * self.d)

    def contains(self, x) -> bool:
        h = (self.side - 1) // 2
        return all(abs(int(v) - c) <= h for v, c in zip(x, self.center))

    def parent(self) -> "TriadicCube":
        return triadic_cube_of(self.center, self.level + 1)

    def children(self) -> list:
        if self.level == 0:
            return []
        s = 3 ** (self.level - 1)
        offs = np.stack(np.meshgrid(*([(-1, 0, 1)] * self.d), indexing="ij"), -1).reshape(-1, self.d)
        return [
            TriadicCube(self.level - 1, tuple(c + s * o for c, o in zip(self.center, off)))
            for off in offs
        ]


def triadic_cube_of(x, m: int) -> TriadicCube:
    """The unique level-``m`` triadic cube containing vertex ``x``."""
    if m < 0:
        raise GeometryError("level must be nonnegative")
    s = 3 ** m
    h = (s - 1) // 2
    return TriadicCube(m, tuple(s * ((int(v) + h) // s) for v in x))


def triadic_box(level: int, d: int = 2) -> LatticeBox:
    """Box covering the triadic cube of the given level centered at 0."""
    return TriadicCube(level, (0,) * d).as_box()


@dataclass(frozen=True, eq=False)
class Environment:
    """Conductance assignment on the bonds of a box.

    Attributes
    ----------
    box : LatticeBox
    p : float
        Open-bond probability (nan for hand-built environments).
    lam : float
        Ellipticity: open conductances lie in ``[lam, 1]``.
    law : str
        ``"bernoulli-unit"``, ``"uniform-on-[lambda,1]"`` or ``"custom"``.
    seed : int
    conductances : tuple of ndarray
        One read-only float64 array per direction.
    """

    box: LatticeBox
    p: float
    lam: float
    law: str
    seed: int
    conductances: tuple = field(repr=False)

    def __post_init__(self):
        conds = []
        for k, arr in enumerate(self.conductances):
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            if arr.shape != self.box.bond_shape(k):
                raise GeometryError(
                    f"direction {k} conductances have shape {arr.shape}, "
                    f"expected {self.box.bond_shape(k)}"
                )
            if arr.size and not (np.all(np.isfinite(arr)) and arr.min() >= 0.0 and arr.max() <= 1.0):
                raise ParameterError(f"direction {k} conductances must lie in [0, 1]")
            if arr.size and np.any((arr > 0) & (arr < self.lam)):
                raise ParameterError(f"direction {k} has open conductances below lambda={self.lam}")
            arr.setflags(write=False)
            conds.append(arr)
        if len(conds) != self.box.d:
            raise GeometryError("one conductance array per direction required")
        object.__setattr__(self, "conductances", tuple(conds))

    @classmethod
    def from_arrays(cls, box: LatticeBox, arrays: Sequence[np.ndarray], lam: float = 0.0) -> "Environment":
        """Wrap hand-built conductances (law tag ``custom``)."""
        return cls(box, float("nan"), float(lam), "custom", 0, tuple(np.asarray(a, float) for a in arrays))

    @property
    def d(self) -> int:
        return self.box.d

    def bond(self, k: int) -> np.ndarray:
        return self.conductances[k]

    def flat(self) -> np.ndarray:
        """Conductances in canonical bond order."""
        return np.concatenate([c.ravel() for c in self.conductances])

    def n_open(self) -> int:
        return int(sum(np.count_nonzero(c) for c in self.conductances))

    def open_fraction(self) -> float:
        return self.n_open() / self.box.n_bonds

    def degree(self) -> np.ndarray:
        """Total conductance ``sum_z a(x, z)`` at every vertex."""
        deg = np.zeros(self.box.sides)
        for k, c in enumerate(self.conductances):
            lo = [slice(None)] * self.d
            hi = [slice(None)] * self.d
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            deg[tuple(lo)] += c
            deg[tuple(hi)] += c
        return deg

    def restrict(self, sub: LatticeBox) -> "Environment":
        """Environment on a sub-box (identical to regenerating it)."""
        sl = self.box.slices_of(sub)
        conds = []
        for k, c in enumerate(self.conductances):
            s = list(sl)
            s[k] = slice(sl[k].start, sl[k].stop - 1)
            conds.append(c[tuple(s)])
        return Environment(sub, self.p, self.lam, self.law, self.seed, tuple(conds))


def _draw(seed, coords: np.ndarray, k: int, p: float, lam: float, law: str) -> np.ndarray:
    lid = _LAW_IDS[law]
    u = hash_uniform(seed, coords, k, lid, 0)
    is_open = u < p
    if law == "bernoulli-unit":
        return is_open.astype(np.float64)
    v = hash_uniform(seed, coords, k, lid, 1)
    return np.where(is_open, lam + (1.0 - lam) * v, 0.0)


def _check_params(p, lam, seed):
    if not (0.0 < p <= 1.0) or not np.isfinite(p):
        raise ParameterError(f"open probability must lie in (0, 1], got {p}")
    if not (0.0 < lam <= 1.0) or not np.isfinite(lam):
        raise ParameterError(f"ellipticity must lie in (0, 1], got {lam}")
    if not (0 <= int(seed) <= _M64):
        raise ParameterError("seed must be an unsigned 64-bit integer")


def generate_environment(
    box: LatticeBox, p: float, lam: float = 1.0, law: str = "bernoulli-unit", seed: int = 0
) -> Environment:
    """Sample an i.i.d. environment on ``box``.

    Each bond is open with probability ``p``. Open conductances equal 1 for
    ``bernoulli-unit`` and are uniform on ``[lam, 1]`` for
    ``uniform-on-[lambda,1]``.

    Raises
    ------
    ParameterError
        If ``p`` or ``lam`` is outside ``(0, 1]`` or the law is unknown.
    """
    law = normalize_law(law)
    _check_params(p, lam, seed)
    if min(box.sides) < 2:
        raise GeometryError("environment boxes need at least 2 vertices per axis")
    seed_u = np.uint64(int(seed))
    conds = tuple(_draw(seed_u, box.bond_coords(k), k, p, lam, law) for k in range(box.d))
    return Environment(box, float(p), float(lam), law, int(seed), conds)


def generate_batch(
    box: LatticeBox, p: float, lam: float, law: str, seeds: np.ndarray
) -> list:
    """Conductance arrays for many seeds at once.

    Returns a list over directions of arrays with shape
    ``(len(seeds),) + box.bond_shape(k)``; row ``i`` equals
    ``generate_environment(box, p, lam, law, seeds[i])``.
    """
    law = normalize_law(law)
    seeds = np.asarray(seeds, dtype=np.uint64)
    out = []
    for k in range(box.d):
        bc = box.bond_coords(k)
        s = seeds.reshape((-1,) + (1,) * box.d)
        out.append(_draw(s, bc[None], k, p, lam, law))
    return out


_ENV_MAGIC = "PERCENV v1"


def _fmt_float(v: float) -> str:
    return repr(float(v))


def save_environment(env: Environment, path) -> None:
    """Write ``env`` in the PERCENV v1 format."""
    header = (
        f"{_ENV_MAGIC} d={env.d} sides={','.join(map(str, env.box.sides))} "
        f"p={_fmt_float(env.p)} lambda={_fmt_float(env.lam)} law={env.law} seed={env.seed}"
    )
    if env.box.origin != tuple(-((s - 1) // 2) for s in env.box.sides):
        header += f" origin={','.join(map(str, env.box.origin))}"
    payload = env.flat().astype("<f8").tobytes()
    Path(path).write_bytes(header.encode("ascii") + b"\n" + payload)


def _parse_header(line: str, magic: str) -> dict:
    if not line.startswith(magic + " "):
        raise FieldFormatError(f"expected header starting with {magic!r}")
    out = {}
    for tok in line[len(magic) + 1:].split():
        if "=" not in tok:
            raise FieldFormatError(f"malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        out[key] = val
    return out


def load_environment(path) -> Environment:
    """Read a PERCENV v1 file.

    Boxes without an explicit ``origin`` token are centered as in
    :meth:`LatticeBox.centered`.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FieldFormatError("missing header line")
    meta = _parse_header(raw[:nl].decode("ascii"), _ENV_MAGIC)
    try:
        d = int(meta["d"])
        sides = tuple(int(v) for v in meta["sides"].split(","))
        p = float(meta["p"])
        lam = float(meta["lambda"])
        law = meta["law"]
        seed = int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise FieldFormatError(f"bad PERCENV header: {exc}") from None
    if len(sides) != d:
        raise FieldFormatError(f"header d={d} disagrees with sides {sides}")
    if "origin" in meta:
        origin = tuple(int(v) for v in meta["origin"].split(","))
    else:
        origin = tuple(-((s - 1) // 2) for s in sides)
    box = LatticeBox(origin, sides)
    data = np.frombuffer(raw[nl + 1:], dtype="<f8")
    if data.size != box.n_bonds:
        raise FieldFormatError(f"payload has {data.size} values, expected {box.n_bonds}")
    conds, pos = [], 0
    for k in range(d):
        n = int(np.prod(box.bond_shape(k)))
        conds.append(data[pos:pos + n].astype(np.float64).reshape(box.bond_shape(k)))
        pos += n
    return Environment(box, p, lam, law, seed, tuple(conds))
