"""Good cubes, the triadic partition built from them, and coarsening.

A cube of side ``N`` is pregood when one open cluster of the cube touches
all ``2d`` faces and every other cluster has l-infinity diameter below
``N/10``; it is good when in addition every cube of side between ``N/10``
and ``N`` meeting it is pregood. Clusters are computed with the bonds inside
the cube only, so a vertex without an open bond in the cube is a cluster of
diameter zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cluster import ClusterLabeling
from .env import Environment, LatticeBox, TriadicCube
from .errors import CoarseningError, GeometryError, ParameterError, PartitionError

__all__ = [
    "CubeClassification",
    "GoodnessOracle",
    "TriadicPartition",
    "PartitionCheck",
    "PartitionStats",
    "classify_cube",
    "build_partition",
    "check_partition",
    "coarsen",
    "coarsening_points",
    "partition_stats",
    "coarsening_gradient_ratio",
    "save_partition_csv",
]

_KERNELS = None


def _kernels():
    """Compile the union-find kernels on first use."""
    global _KERNELS
    if _KERNELS is not None:
        return _KERNELS
    import numba

    @numba.njit(cache=True)
    def find(parent, i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    @numba.njit(cache=True)
    def label_box(open_, gstr, lo, ext, member, parent):
        # parent[l] <- root of local vertex l, -1 off the member set
        d = ext.shape[0]
        n = parent.shape[0]
        lstr = np.empty(d, np.int64)
        acc = 1
        for k in range(d - 1, -1, -1):
            lstr[k] = acc
            acc *= ext[k]
        for l in range(n):
            parent[l] = l if member[l] else -1
        for l in range(n):
            if not member[l]:
                continue
            rem = l
            g = 0
            for k in range(d):
                c = rem // lstr[k]
                rem -= c * lstr[k]
                g += (lo[k] + c) * gstr[k]
            for k in range(d):
                c = (l // lstr[k]) % ext[k]
                if c < ext[k] - 1 and open_[k, g] and member[l + lstr[k]]:
                    a = find(parent, l)
                    b = find(parent, l + lstr[k])
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        for l in range(n):
            if parent[l] >= 0:
                parent[l] = find(parent, l)

    @numba.njit(cache=True)
    def pregood_many(open_, gstr, los, s, out):
        d = los.shape[1]
        n = s ** d
        ext = np.full(d, s, np.int64)
        member = np.ones(n, np.bool_)
        parent = np.empty(n, np.int64)
        faces = np.zeros(n, np.int64)
        mn = np.empty((n, d), np.int64)
        mx = np.empty((n, d), np.int64)
        full = (1 << (2 * d)) - 1
        for c in range(los.shape[0]):
            label_box(open_, gstr, los[c], ext, member, parent)
            for l in range(n):
                faces[l] = 0
                for k in range(d):
                    mn[l, k] = s
                    mx[l, k] = -1
            for l in range(n):
                r = parent[l]
                rem = l
                for k in range(d - 1, -1, -1):
                    x = rem % s
                    rem //= s
                    if x == 0:
                        faces[r] |= 1 << (2 * k)
                    if x == s - 1:
                        faces[r] |= 1 << (2 * k + 1)
                    if x < mn[r, k]:
                        mn[r, k] = x
                    if x > mx[r, k]:
                        mx[r, k] = x
            ncross = 0
            ok = True
            for l in range(n):
                if parent[l] != l:
                    continue
                if faces[l] == full:
                    ncross += 1
                else:
                    diam = 0
                    for k in range(d):
                        if mx[l, k] - mn[l, k] > diam:
                            diam = mx[l, k] - mn[l, k]
                    if 10 * diam >= s:
                        ok = False
                        break
            out[c] = ok and ncross == 1

    _KERNELS = (label_box, pregood_many)
    return _KERNELS


def _open_array(env: Environment) -> np.ndarray:
    """``open[k, i]``: bond from vertex ``i`` in direction ``k`` is open."""
    sides = env.box.sides
    out = np.zeros((env.d,) + sides, dtype=np.bool_)
    for k in range(env.d):
        sl = [slice(None)] * env.d
        sl[k] = slice(0, sides[k] - 1)
        out[(k,) + tuple(sl)] = env.bond(k) > 0
    return out.reshape(env.d, -1)


def _row_strides(sides) -> np.ndarray:
    st = np.ones(len(sides), dtype=np.int64)
    for k in range(len(sides) - 2, -1, -1):
        st[k] = st[k + 1] * sides[k + 1]
    return st


@dataclass(frozen=True)
class CubeClassification:
    """Goodness of one triadic cube.

    Attributes
    ----------
    cube : TriadicCube
    pregood, good : bool
    crossing : ndarray of int64
        Row-major environment-box indices of the crossing cluster, sorted.
        Empty when no cluster touches all faces; when several do, the one
        with the most vertices (then the smallest first index) is kept.
    crossing_id : int
        Smallest index in ``crossing``, or -1.
    n_family : int
        Number of family cubes examined for goodness.
    n_clipped : int
        Number of family cubes skipped because they leave the box.
    """

    cube: TriadicCube
    pregood: bool
    good: bool
    crossing: np.ndarray = field(repr=False)
    crossing_id: int
    n_family: int
    n_clipped: int


class GoodnessOracle:
    """Memoized pregood/good tests for cubes inside one environment.

    Parameters
    ----------
    env : Environment
    stride : int, optional
        Anchor and side stride of the goodness family. ``None`` uses
        ``max(1, N // 30)`` for a cube of side ``N > 30`` and 1 otherwise;
        ``1`` checks every integer cube.

    Notes
    -----
    The family of a cube ``Q`` of side ``N`` is every axis-aligned cube of
    integer side ``s`` in ``[ceil(N/10), N]`` whose vertex set meets ``Q``.
    Family cubes that leave the environment box are skipped and counted.
    Sides are visited from the smallest up and the test stops at the first
    cube that is not pregood.
    """

    def __init__(self, env: Environment, stride: Optional[int] = None):
        if stride is not None and int(stride) < 1:
            raise ParameterError("stride must be >= 1")
        self.env = env
        self.stride = None if stride is None else int(stride)
        self.open = _open_array(env)
        self.gstr = _row_strides(env.box.sides)
        self._pregood: dict = {}
        self._good: dict = {}

    def _stride_for(self, n: int) -> int:
        if self.stride is not None:
            return self.stride
        return max(1, n // 30) if n > 30 else 1

    def pregood_many(self, side: int, los: np.ndarray) -> np.ndarray:
        """Pregood flags of cubes with local lower corners ``los``."""
        los = np.asarray(los, dtype=np.int64).reshape(-1, self.env.d)
        side = int(side)
        memo = self._pregood.get(side)
        if memo is None:
            # -1 unknown, else the cached flag, indexed by lower corner
            memo = np.full(self.env.box.sides, -1, dtype=np.int8)
            self._pregood[side] = memo
        idx = tuple(los.T)
        cur = memo[idx]
        todo = np.flatnonzero(cur < 0)
        if todo.size:
            if side == 1:
                res = np.ones(todo.size, dtype=np.bool_)
            else:
                res = np.empty(todo.size, dtype=np.bool_)
                _kernels()[1](self.open, self.gstr, np.ascontiguousarray(los[todo]), side, res)
            memo[tuple(los[todo].T)] = res
            cur = memo[idx]
        return cur.astype(bool)

    def _local_lo(self, cube: TriadicCube) -> np.ndarray:
        box = self.env.box
        if not box.contains_box(cube.as_box()):
            raise GeometryError(f"{cube} is not inside the environment box")
        return np.array(cube.lo, dtype=np.int64) - np.array(box.origin, dtype=np.int64)

    def is_pregood(self, cube: TriadicCube) -> bool:
        return bool(self.pregood_many(cube.side, self._local_lo(cube))[0])

    def family(self, cube: TriadicCube):
        """Iterate ``(side, anchors, n_clipped)`` over the goodness family."""
        lo = self._local_lo(cube)
        n = cube.side
        st = self._stride_for(n)
        sides = sorted(set(range(math.ceil(n / 10), n + 1, st)) | {n})
        bsides = np.array(self.env.box.sides, dtype=np.int64)
        for s in sides:
            axes = []
            clipped_total = 1
            for k in range(self.env.d):
                amin, amax = lo[k] - s + 1, lo[k] + n - 1
                clipped_total *= amax - amin + 1
                a0, a1 = max(0, amin), min(int(bsides[k]) - s, amax)
                if a1 < a0:
                    axes.append(np.empty(0, dtype=np.int64))
                    continue
                first = -(-a0 // st) * st
                ax = np.arange(first, a1 + 1, st, dtype=np.int64)
                if ax.size == 0:
                    ax = np.array([a0], dtype=np.int64)
                axes.append(ax)
            kept = int(np.prod([a.size for a in axes]))
            if kept:
                anchors = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.env.d)
            else:
                anchors = np.empty((0, self.env.d), dtype=np.int64)
            # clipped count is for the unstrided family, for reporting only
            inside = int(np.prod([max(0, min(int(bsides[k]) - s, lo[k] + n - 1) - max(0, lo[k] - s + 1) + 1)
                                  for k in range(self.env.d)]))
            yield s, anchors, clipped_total - inside

    def is_good(self, cube: TriadicCube) -> bool:
        key = (cube.level, cube.center)
        if key in self._good:
            return self._good[key][0]
        ok = self.is_pregood(cube)
        n_family = n_clipped = 0
        if ok:
            for s, anchors, clipped in self.family(cube):
                n_family += len(anchors)
                n_clipped += clipped
                if len(anchors) and not self.pregood_many(s, anchors).all():
                    ok = False
                    break
        self._good[key] = (ok, n_family, n_clipped)
        return ok

    def crossing(self, cube: TriadicCube) -> np.ndarray:
        """Crossing-cluster vertices of ``cube`` (environment-box indices)."""
        lo = self._local_lo(cube)
        s = cube.side
        d = self.env.d
        n = s ** d
        if s == 1:
            return np.array([int(lo @ self.gstr)], dtype=np.int64)
        parent = np.empty(n, dtype=np.int64)
        _kernels()[0](self.open, self.gstr, lo, np.full(d, s, np.int64), np.ones(n, np.bool_), parent)
        local = np.stack(np.unravel_index(np.arange(n), (s,) * d), -1)
        touch = np.zeros(n, dtype=np.int64)
        for k in range(d):
            np.bitwise_or.at(touch, parent[local[:, k] == 0], 1 << (2 * k))
            np.bitwise_or.at(touch, parent[local[:, k] == s - 1], 1 << (2 * k + 1))
        roots = np.flatnonzero(touch == (1 << (2 * d)) - 1)
        if roots.size == 0:
            return np.empty(0, dtype=np.int64)
        counts = np.bincount(parent, minlength=n)[roots]
        # roots are component minima, so argmax breaks ties by first vertex
        root = roots[int(np.argmax(counts))]
        members = np.flatnonzero(parent == root)
        return np.sort((local[members] + lo) @ self.gstr)

    def classify(self, cube: TriadicCube) -> CubeClassification:
        good = self.is_good(cube)
        _, n_family, n_clipped = self._good[(cube.level, cube.center)]
        cross = self.crossing(cube)
        return CubeClassification(
            cube=cube,
            pregood=self.is_pregood(cube),
            good=good,
            crossing=cross,
            crossing_id=int(cross[0]) if cross.size else -1,
            n_family=n_family,
            n_clipped=n_clipped,
        )


def classify_cube(env: Environment, cube: TriadicCube, stride: Optional[int] = None) -> CubeClassification:
    """Pregood and good status of a triadic cube, with its crossing cluster.

    Parameters
    ----------
    env : Environment
    cube : TriadicCube
        Must lie inside ``env.box``.
    stride : int, optional
        Goodness family stride, see :class:`GoodnessOracle`.

    Returns
    -------
    CubeClassification

    Raises
    ------
    GeometryError
        If the cube leaves the environment box.
    """
    return GoodnessOracle(env, stride).classify(cube)


@dataclass
class TriadicPartition:
    """Tiling of a triadic root cube by triadic cubes.

    Attributes
    ----------
    root : TriadicCube
    env : Environment
    levels : ndarray of int8, shape ``root.as_box().sides``
        Level of the element containing each vertex of the root cube.
    elements : list of TriadicCube
        Sorted by level, then center.
    good : dict
        ``(level, center) -> bool`` for every element.
    diagnostics : dict
        Per-level counts of examined and good cubes, ``root_good`` and the
        number of balancing merges.
    oracle : GoodnessOracle
    """

    root: TriadicCube
    env: Environment
    levels: np.ndarray = field(repr=False)
    elements: list = field(repr=False)
    good: dict = field(repr=False)
    diagnostics: dict
    oracle: GoodnessOracle = field(repr=False)

    @property
    def box(self) -> LatticeBox:
        return self.root.as_box()

    def sizes(self) -> np.ndarray:
        """``size(cube_P(x))`` for every vertex of the root cube."""
        return 3 ** self.levels.astype(np.int64)

    def cube_of(self, x) -> TriadicCube:
        """The element containing vertex ``x``."""
        from .env import triadic_cube_of

        lvl = int(self.levels[self.box.local(x)])
        return triadic_cube_of(x, lvl)

    def element_ids(self) -> np.ndarray:
        """Index into ``elements`` for every vertex of the root cube."""
        box = self.box
        ids = np.empty(box.sides, dtype=np.int64)
        for i, c in enumerate(self.elements):
            ids[box.slices_of(c.as_box())] = i
        return ids

    def n_elements(self) -> int:
        return len(self.elements)


def _cube_index_map(box: LatticeBox, level: int) -> list:
    """Per-axis index of the level-``level`` triadic cube for each coordinate."""
    s = 3 ** level
    h = (s - 1) // 2
    return [(ax + h) // s for ax in box.axes()]


def _elements_from_levels(box: LatticeBox, levels: np.ndarray) -> list:
    out = []
    coords = box.coords()
    for lvl in sorted(set(np.unique(levels).tolist())):
        s = 3 ** lvl
        at = (levels == lvl) & np.all(coords % s == 0, axis=-1)
        for c in coords[at]:
            out.append(TriadicCube(int(lvl), tuple(int(v) for v in c)))
    out.sort(key=lambda c: (c.level, c.center))
    return out


def _face_dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for k in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[k], hi[k] = slice(0, -1), slice(1, None)
        out[tuple(lo)] |= mask[tuple(hi)]
        out[tuple(hi)] |= mask[tuple(lo)]
    return out


def _root_cube(env: Environment, box: Optional[LatticeBox]) -> TriadicCube:
    if box is None:
        side = min(env.box.sides)
        m = int(math.floor(math.log(side, 3) + 1e-12))
        while m >= 0:
            cube = TriadicCube(m, (0,) * env.d)
            if env.box.contains_box(cube.as_box()):
                return cube
            m -= 1
        raise GeometryError("the environment box contains no triadic cube around the origin")
    side = box.sides[0]
    m = round(math.log(side, 3)) if side > 0 else -1
    if len(set(box.sides)) != 1 or 3 ** m != side:
        raise GeometryError(f"partition box sides must be a common power of 3, got {box.sides}")
    h = (side - 1) // 2
    center = tuple(o + h for o in box.origin)
    try:
        cube = TriadicCube(m, center)
    except GeometryError as exc:
        raise GeometryError(f"partition box {box} is not a triadic cube") from exc
    if not env.box.contains_box(cube.as_box()):
        raise GeometryError("partition box is not inside the environment box")
    return cube


def build_partition(
    env: Environment,
    box: Optional[LatticeBox] = None,
    *,
    stride: Optional[int] = None,
    require_good_root: bool = False,
    oracle: Optional[GoodnessOracle] = None,
) -> TriadicPartition:
    """Partition a triadic root cube into triadic cubes with good predecessors.

    Top-down pass: the root is always split; below it a cube is split into
    its ``3^d`` children exactly when it is good, so every strict
    predecessor of an element is good (the root stands in for the larger
    scales outside the box). A bottom-up balancing pass then merges any
    element that is face-adjacent to an element more than one level larger
    into its ancestor one level below that neighbour. Merging replaces
    elements by an ancestor, which keeps the predecessor property.

    Parameters
    ----------
    env : Environment
    box : LatticeBox, optional
        A triadic cube inside ``env.box``; default is the largest triadic
        cube centered at the origin that fits.
    stride : int, optional
        Goodness family stride, see :class:`GoodnessOracle`.
    require_good_root : bool
        Raise :class:`PartitionError` when the root cube itself is not good.
    oracle : GoodnessOracle, optional
        Reuse memoized goodness tests.

    Returns
    -------
    TriadicPartition

    Raises
    ------
    GeometryError
        If ``box`` is not a triadic cube inside the environment box.
    PartitionError
        If ``require_good_root`` and the root is not good.
    """
    root = _root_cube(env, box)
    oracle = oracle or GoodnessOracle(env, stride)
    rbox = root.as_box()
    examined = {}
    good_count = {}
    root_good = oracle.is_good(root)
    if require_good_root and not root_good:
        raise PartitionError(
            f"root cube of side {root.side} is not good; the box is too small or p too close to critical",
            {"root_level": root.level, "root_good": False},
        )
    levels = np.full(rbox.sides, root.level, dtype=np.int8)
    frontier = [root]
    while frontier:
        nxt = []
        for cube in frontier:
            if cube.level == 0:
                continue
            if cube is not root:
                g = oracle.is_good(cube)
                examined[cube.level] = examined.get(cube.level, 0) + 1
                good_count[cube.level] = good_count.get(cube.level, 0) + int(g)
                if not g:
                    continue
            levels[rbox.slices_of(cube.as_box())] = cube.level - 1
            nxt.extend(cube.children())
        frontier = nxt

    merges = 0
    for lvl in range(root.level, 1, -1):
        big = _face_dilate(levels == lvl)
        bad = big & (levels < lvl - 1)
        if not bad.any():
            continue
        # ancestors at level lvl-1 of the offending vertices
        idx = _cube_index_map(rbox, lvl - 1)
        hits = np.argwhere(bad)
        cells = {tuple(int(idx[k][h[k]]) for k in range(env.d)) for h in hits}
        s = 3 ** (lvl - 1)
        for cell in sorted(cells):
            cube = TriadicCube(lvl - 1, tuple(s * c for c in cell))
            levels[rbox.slices_of(cube.as_box())] = lvl - 1
            merges += 1

    elements = _elements_from_levels(rbox, levels)
    good = {(c.level, c.center): oracle.is_good(c) for c in elements}
    diagnostics = {
        "root_level": root.level,
        "root_good": bool(root_good),
        "examined": dict(sorted(examined.items())),
        "good": dict(sorted(good_count.items())),
        "merges": merges,
        "n_elements": len(elements),
        "n_good_elements": int(sum(good.values())),
    }
    return TriadicPartition(root, env, levels, elements, good, diagnostics, oracle)


@dataclass(frozen=True)
class PartitionCheck:
    """Outcome of the partition invariant suite.

    Attributes
    ----------
    tiling, neighbor_ratio, predecessor_good, connectivity : bool
    n_pairs : int
        Face-adjacent element pairs.
    n_connectivity_pairs : int
        Adjacent pairs with both elements good (the ones the connectivity
        property applies to).
    failures : dict
        Offending elements or pairs per property.
    """

    tiling: bool
    neighbor_ratio: bool
    predecessor_good: bool
    connectivity: bool
    n_pairs: int
    n_connectivity_pairs: int
    failures: dict

    @property
    def ok(self) -> bool:
        return self.tiling and self.neighbor_ratio and self.predecessor_good and self.connectivity


def _adjacent_pairs(ids: np.ndarray) -> np.ndarray:
    pairs = []
    for k in range(ids.ndim):
        a = np.moveaxis(ids, k, 0)
        u, v = a[:-1].ravel(), a[1:].ravel()
        diff = u != v
        pairs.append(np.stack([np.minimum(u[diff], v[diff]), np.maximum(u[diff], v[diff])], 1))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pairs), axis=0)


def check_partition(partition: TriadicPartition, recheck_goodness: bool = False) -> PartitionCheck:
    """Verify tiling, neighbour sizes, predecessor goodness and connectivity.

    Parameters
    ----------
    partition : TriadicPartition
    recheck_goodness : bool
        Re-derive goodness with a fresh oracle instead of the memoized one.

    Notes
    -----
    Connectivity is tested for every face-adjacent pair of good elements with
    size ratio in ``[1/3, 3]``: the crossing clusters of both must lie in one
    cluster of the open bonds inside the union of the two cubes.
    """
    env = partition.env
    rbox = partition.box
    oracle = GoodnessOracle(env, partition.oracle.stride) if recheck_goodness else partition.oracle
    failures = {"tiling": [], "neighbor_ratio": [], "predecessor_good": [], "connectivity": []}

    vol = sum(c.volume for c in partition.elements)
    ids = partition.element_ids()
    cover = np.zeros(rbox.sides, dtype=np.int64)
    for c in partition.elements:
        cover[rbox.slices_of(c.as_box())] += 1
    tiling = vol == int(np.prod(rbox.sides)) and bool((cover == 1).all())
    if not tiling:
        failures["tiling"].append({"volume": vol, "max_cover": int(cover.max())})

    pairs = _adjacent_pairs(ids)
    lv = np.array([c.level for c in partition.elements], dtype=np.int64)
    bad = pairs[np.abs(lv[pairs[:, 0]] - lv[pairs[:, 1]]) > 1]
    failures["neighbor_ratio"] = [(partition.elements[i], partition.elements[j]) for i, j in bad]

    seen = set()
    for c in partition.elements:
        a = c
        while a.level + 1 < partition.root.level:
            a = a.parent()
            key = (a.level, a.center)
            if key in seen:
                break
            seen.add(key)
            if not oracle.is_good(a):
                failures["predecessor_good"].append(a)

    label_box = _kernels()[0]
    env_lo = np.array(env.box.origin, dtype=np.int64)
    good = np.array([oracle.is_good(c) for c in partition.elements], dtype=bool)
    n_conn = 0
    rep = {}
    for i, j in pairs:
        if not (good[i] and good[j]) or abs(lv[i] - lv[j]) > 1:
            continue
        n_conn += 1
        ci, cj = partition.elements[i], partition.elements[j]
        for c in (i, j):
            if c not in rep:
                rep[c] = oracle.crossing(partition.elements[c])
        lo = np.minimum(np.array(ci.lo), np.array(cj.lo))
        hi = np.maximum(np.array(ci.hi), np.array(cj.hi))
        ext = (hi - lo + 1).astype(np.int64)
        member = np.zeros(tuple(ext), dtype=bool)
        for c in (ci, cj):
            sl = tuple(slice(a - b, a - b + c.side) for a, b in zip(c.lo, lo))
            member[sl] = True
        parent = np.empty(member.size, dtype=np.int64)
        llo = (lo - env_lo).astype(np.int64)
        label_box(oracle.open, oracle.gstr, llo, ext, member.ravel(), parent)
        vi = np.array(np.unravel_index(rep[i][0], env.box.sides)) - llo
        vj = np.array(np.unravel_index(rep[j][0], env.box.sides)) - llo
        li = int(np.ravel_multi_index(tuple(vi), tuple(ext)))
        lj = int(np.ravel_multi_index(tuple(vj), tuple(ext)))
        if parent[li] != parent[lj]:
            failures["connectivity"].append((ci, cj))

    return PartitionCheck(
        tiling=tiling,
        neighbor_ratio=not failures["neighbor_ratio"],
        predecessor_good=not failures["predecessor_good"],
        connectivity=not failures["connectivity"],
        n_pairs=int(len(pairs)),
        n_connectivity_pairs=n_conn,
        failures=failures,
    )


def coarsening_points(partition: TriadicPartition, labeling: ClusterLabeling) -> dict:
    """The point ``z(cube)`` used by :func:`coarsen` for each element.

    ``z`` is the vertex of the element's crossing cluster, restricted to the
    proxy cluster, closest to the cube center in Euclidean distance; ties go
    to the lexicographically smallest vertex. When that restriction is empty
    (small elements around a finite cluster, e.g. a unit cube holding an
    isolated vertex) the smallest ancestor inside the root whose crossing
    cluster meets the proxy is used instead, with distances still measured
    from the element center.

    Returns
    -------
    dict
        ``(level, center) -> vertex tuple``, or ``None`` when no such cube
        exists up to the root.
    """
    env = partition.env
    proxy = labeling.proxy.ravel()
    out = {}
    for c in partition.elements:
        a = c
        while True:
            cross = partition.oracle.crossing(a)
            cross = cross[proxy[cross]] if cross.size else cross
            if cross.size or a.level >= partition.root.level:
                break
            a = a.parent()
        if cross.size == 0:
            out[(c.level, c.center)] = None
            continue
        xs = np.stack(np.unravel_index(cross, env.box.sides), -1) + np.array(env.box.origin)
        d2 = ((xs - np.array(c.center)) ** 2).sum(axis=1)
        # cross is row-major sorted, i.e. lexicographic, so argmin keeps the first tie
        out[(c.level, c.center)] = tuple(int(v) for v in xs[int(np.argmin(d2))])
    return out


def coarsen(field, partition: TriadicPartition, labeling: ClusterLabeling) -> np.ndarray:
    """Extend a proxy-cluster function to every vertex of the partition box.

    ``[u](x) = u(x)`` on the proxy cluster and ``u(z(x))`` elsewhere, with
    ``z`` from :func:`coarsening_points` for the element containing ``x``.

    Parameters
    ----------
    field : ndarray or KernelSnapshot
        Values on ``env.box``; only proxy-cluster entries are read.
    partition : TriadicPartition
    labeling : ClusterLabeling

    Returns
    -------
    ndarray, shape ``partition.box.sides``

    Raises
    ------
    CoarseningError
        If an element containing an off-cluster vertex has no crossing
        cluster meeting the proxy, in itself or in any ancestor.
    """
    env = partition.env
    values = np.asarray(getattr(field, "values", field), dtype=np.float64)
    if values.shape != env.box.sides:
        from .errors import ShapeError

        raise ShapeError(f"field shape {values.shape} != box shape {env.box.sides}")
    rbox = partition.box
    sl = env.box.slices_of(rbox)
    u = values[sl].copy()
    proxy = labeling.proxy[sl]
    zs = coarsening_points(partition, labeling)
    for c in partition.elements:
        csl = rbox.slices_of(c.as_box())
        off = ~proxy[csl]
        if not off.any():
            continue
        z = zs[(c.level, c.center)]
        if z is None:
            raise CoarseningError(f"{c} has no crossing cluster on the proxy")
        block = u[csl]
        block[off] = values[env.box.local(z)]
        u[csl] = block
    return u


@dataclass(frozen=True)
class PartitionStats:
    """Size statistics of a partition around the root center.

    Attributes
    ----------
    q : float
    radii : ndarray
        Dyadic radii ``R``.
    moments : ndarray
        ``R^-d * sum_{x in B_R} size(cube_P(x))^q``.
    max_sizes : ndarray
        Largest element size met by ``B_R``.
    bound_holds : ndarray of bool
        ``max_size <= R^(1/q)``.
    tail_sizes, tail_probs : ndarray
        Sizes present and the fraction of vertices with at least that size.
    """

    q: float
    radii: np.ndarray
    moments: np.ndarray
    max_sizes: np.ndarray
    bound_holds: np.ndarray
    tail_sizes: np.ndarray
    tail_probs: np.ndarray

    def rows(self):
        return [
            (int(r), float(m), int(s), bool(b))
            for r, m, s, b in zip(self.radii, self.moments, self.max_sizes, self.bound_holds)
        ]


def partition_stats(partition: TriadicPartition, q: float = 2.0, radii=None) -> PartitionStats:
    """Moments, maxima and tail of element sizes.

    Parameters
    ----------
    partition : TriadicPartition
    q : float
        Moment exponent, ``q >= 1``.
    radii : sequence of float, optional
        Default is the powers of two up to the root half-side, plus the
        half-side itself.
    """
    if q < 1:
        raise ParameterError("q must be >= 1")
    rbox = partition.box
    half = (rbox.sides[0] - 1) // 2
    if radii is None:
        radii = [2 ** j for j in range(1, int(math.log2(max(half, 2))) + 1) if 2 ** j < half] + [half]
    radii = np.asarray(radii, dtype=np.float64)
    sizes = partition.sizes().astype(np.float64)
    dist2 = rbox.distance2_from(partition.root.center)
    d = rbox.d
    moments, maxes = [], []
    for r in radii:
        ball = dist2 <= r * r
        moments.append(float((sizes[ball] ** q).sum() / r ** d))
        maxes.append(int(sizes[ball].max()))
    maxes = np.array(maxes, dtype=np.int64)
    present = np.unique(sizes).astype(np.int64)
    tail = np.array([float((sizes >= s).mean()) for s in present])
    return PartitionStats(
        q=float(q),
        radii=radii,
        moments=np.array(moments),
        max_sizes=maxes,
        bound_holds=maxes <= radii ** (1.0 / q) + 1e-12,
        tail_sizes=present,
        tail_probs=tail,
    )


def coarsening_gradient_ratio(
    field, partition: TriadicPartition, labeling: ClusterLabeling, r: Optional[float] = None
) -> float:
    """Ratio of ``||grad [u]||^2`` to the size-weighted cluster energy.

    Numerator: sum over lattice bonds inside ``B_r`` of squared differences
    of the coarsened field. Denominator: sum over proxy vertices ``x`` in
    ``B_r`` of ``size(cube_P(x))^(2d-1)`` times the sum of squared
    differences of ``u`` along the open bonds of ``x`` inside the proxy.
    The inequality ``numerator <= C * denominator`` holds with a constant
    that does not depend on the field, so the ratio is an empirical lower
    estimate of that constant.
    """
    env = partition.env
    rbox = partition.box
    sl = env.box.slices_of(rbox)
    values = np.asarray(getattr(field, "values", field), dtype=np.float64)
    cu = coarsen(values, partition, labeling)
    u = values[sl]
    proxy = labeling.proxy[sl]
    if r is None:
        r = (rbox.sides[0] - 1) / 2
    ball = rbox.distance2_from(partition.root.center) < r * r
    d = rbox.d
    num = 0.0
    energy = np.zeros(rbox.sides)
    sub = env.restrict(rbox)
    for k in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[k], hi[k] = slice(0, -1), slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        both = ball[lo] & ball[hi]
        num += float((((cu[hi] - cu[lo]) ** 2)[both]).sum())
        open_ = (sub.bond(k) > 0) & proxy[lo] & proxy[hi]
        g2 = np.where(open_, (u[hi] - u[lo]) ** 2, 0.0)
        energy[lo] += g2
        energy[hi] += g2
    w = partition.sizes().astype(np.float64) ** (2 * d - 1)
    den = float((w * energy)[ball & proxy].sum())
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def save_partition_csv(partition: TriadicPartition, path) -> None:
    """Write ``level, c0, c1[, c2], good`` rows, one per element."""
    d = partition.root.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level"] + [f"center_{k}" for k in range(d)] + ["good"])
        for c in partition.elements:
            w.writerow([c.level, *c.center, int(partition.good[(c.level, c.center)])])
