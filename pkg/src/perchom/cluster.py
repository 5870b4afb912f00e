"""Open-bond cluster labeling, the infinite-cluster proxy and density statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .env import (
    Environment,
    LatticeBox,
    derive_seed,
    generate_batch,
    generate_environment,
    normalize_law,
)
from .errors import ParameterError, StatisticsError

Z95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    """Connected components of the open-bond graph of a box.

    Attributes
    ----------
    box : LatticeBox
    labels : ndarray of int64, shape box.sides
        Component label per vertex, numbered by first vertex in row-major
        order; ``-1`` marks vertices with no open bond.
    sizes : ndarray of int64
        ``sizes[c]`` is the vertex count of component ``c``.
    proxy : ndarray of bool, shape box.sides
        Largest component (ties broken by the smallest member), used as the
        finite-volume stand-in for the infinite cluster. Empty when no bond
        is open.
    proxy_label : int
        Label of the proxy component or ``-1``.
    """

    box: LatticeBox
    labels: np.ndarray
    sizes: np.ndarray
    proxy: np.ndarray
    proxy_label: int

    @property
    def n_components(self) -> int:
        return int(self.sizes.size)

    def component_mask(self, label: int) -> np.ndarray:
        return self.labels == label


def open_bond_graph(env: Environment, mask: Optional[np.ndarray] = None, weighted: bool = False):
    """Sparse symmetric adjacency matrix of the open bonds.

    Parameters
    ----------
    env : Environment
    mask : ndarray of bool, optional
        Keep only bonds whose two endpoints are in ``mask``.
    weighted : bool
        Use conductances as weights instead of ones.

    Returns
    -------
    scipy.sparse.coo_matrix of shape (n_vertices, n_vertices)
    """
    box = env.box
    idx = np.arange(box.n_vertices, dtype=np.int64).reshape(box.sides)
    rows, cols, vals = [], [], []
    for k, c in enumerate(env.conductances):
        lo = [slice(None)] * box.d
        hi = [slice(None)] * box.d
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        keep = c > 0
        if mask is not None:
            keep = keep & mask[tuple(lo)] & mask[tuple(hi)]
        rows.append(idx[tuple(lo)][keep])
        cols.append(idx[tuple(hi)][keep])
        vals.append(c[keep] if weighted else np.ones(int(keep.sum())))
    r = np.concatenate(rows)
    q = np.concatenate(cols)
    v = np.concatenate(vals)
    n = box.n_vertices
    return coo_matrix((np.concatenate([v, v]), (np.concatenate([r, q]), np.concatenate([q, r]))), shape=(n, n))


def _canonical_labels(raw: np.ndarray, has_bond: np.ndarray):
    """Relabel components by first vertex; vertices without bonds get -1."""
    n = raw.size
    comp_of = raw.copy()
    comp_of[~has_bond] = -1
    valid = comp_of >= 0
    uniq, first = np.unique(comp_of[valid], return_index=True)
    order = np.argsort(np.flatnonzero(valid)[first], kind="stable")
    remap = np.full(raw.max() + 1 if n else 0, -1, dtype=np.int64)
    remap[uniq[order]] = np.arange(uniq.size, dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)
    labels[valid] = remap[comp_of[valid]]
    sizes = np.bincount(labels[valid], minlength=uniq.size).astype(np.int64)
    return labels, sizes


def label_components(env: Environment, mask: Optional[np.ndarray] = None) -> ClusterLabeling:
    """Label clusters of the open bonds whose endpoints lie in ``mask``.

    Used both for the whole box and for restrictions to cubes or balls.
    Vertices outside ``mask`` get label -1.
    """
    box = env.box
    graph = open_bond_graph(env, mask).tocsr()
    _, raw = connected_components(graph, directed=False)
    has_bond = np.diff(graph.indptr) > 0
    labels, sizes = _canonical_labels(raw.astype(np.int64), has_bond)
    labels = labels.reshape(box.sides)
    if sizes.size:
        # argmax returns the first maximum, i.e. the lexicographically smallest
        proxy_label = int(np.argmax(sizes))
        proxy = labels == proxy_label
    else:
        proxy_label = -1
        proxy = np.zeros(box.sides, dtype=bool)
    return ClusterLabeling(box, labels, sizes, proxy, proxy_label)


def label_clusters(env: Environment) -> ClusterLabeling:
    """Exact connected-component labeling of the open bonds of ``env``.

    Labels are deterministic: components are numbered in the row-major
    order of their first vertex. The proxy is the largest component, with
    ties going to the component holding the lexicographically smallest
    vertex.

    Examples
    --------
    >>> from perchom.env import LatticeBox, generate_environment
    >>> env = generate_environment(LatticeBox.centered(8), 1.0)
    >>> bool(label_clusters(env).proxy.all())
    True
    """
    return label_components(env)


def central_window(sides: Sequence[int]) -> tuple:
    """Slices of the central sub-box with half the side (at least 1)."""
    out = []
    for s in sides:
        w = max(1, s // 2)
        start = (s - w) // 2
        out.append(slice(start, start + w))
    return tuple(out)


@dataclass(frozen=True)
class ThetaEstimate:
    """Monte Carlo estimate of the cluster density with a 95% interval."""

    theta: float
    ci: tuple
    stderr: float
    n_samples: int

    def __iter__(self):
        yield self.theta
        yield self.ci


def _batch_proxy_density(
    box: LatticeBox, p: float, lam: float, law: str, seeds: np.ndarray
) -> np.ndarray:
    """Proxy density in the central window for many small environments."""
    nb = len(seeds)
    nv = box.n_vertices
    conds = generate_batch(box, p, lam, law, seeds)
    idx = np.arange(nb * nv, dtype=np.int64).reshape((nb,) + box.sides)
    rows, cols = [], []
    for k, c in enumerate(conds):
        lo = [slice(None)] * (box.d + 1)
        hi = [slice(None)] * (box.d + 1)
        lo[k + 1] = slice(0, -1)
        hi[k + 1] = slice(1, None)
        keep = c > 0
        rows.append(idx[tuple(lo)][keep])
        cols.append(idx[tuple(hi)][keep])
    r = np.concatenate(rows)
    q = np.concatenate(cols)
    n = nb * nv
    graph = coo_matrix((np.ones(2 * r.size), (np.concatenate([r, q]), np.concatenate([q, r]))), shape=(n, n)).tocsr()
    _, raw = connected_components(graph, directed=False)
    has_bond = np.diff(graph.indptr) > 0
    labels, sizes = _canonical_labels(raw.astype(np.int64), has_bond)
    labels = labels.reshape(nb, nv)
    if sizes.size == 0:
        return np.zeros(nb)
    # components never straddle samples, so sample of a label = sample of its first vertex
    flat = labels.ravel()
    valid = flat >= 0
    _, first = np.unique(flat[valid], return_index=True)
    first_vertex = np.flatnonzero(valid)[first]
    comp_sample = first_vertex // nv
    # best component per sample: max size, then smallest first vertex
    order = np.lexsort((first_vertex, -sizes, comp_sample))
    best = np.full(nb, -1, dtype=np.int64)
    cs = comp_sample[order]
    take = np.r_[True, cs[1:] != cs[:-1]]
    best[cs[take]] = order[take]
    window = (slice(None),) + central_window(box.sides)
    lab_w = labels.reshape((nb,) + box.sides)[window].reshape(nb, -1)
    hits = (lab_w == best[:, None]) & (best[:, None] >= 0)
    return hits.mean(axis=1)


def _proxy_density(env: Environment) -> float:
    lab = label_clusters(env)
    return float(lab.proxy[central_window(env.box.sides)].mean())


def estimate_theta(
    p: float,
    box_side: int,
    n_samples: int,
    seed: int = 0,
    d: int = 2,
    lam: float = 1.0,
    law: str = "bernoulli-unit",
    batch: int = 20000,
) -> ThetaEstimate:
    """Estimate the cluster density by the proxy density in a central window.

    Sample ``i`` uses the environment with seed ``derive_seed(seed, i)`` on
    a centered box of side ``box_side``; its observation is the fraction of
    the central half-side window covered by the proxy component.

    Returns
    -------
    ThetaEstimate
        Mean over samples and the normal-approximation 95% interval.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be at least 1")
    if box_side < 2:
        raise ParameterError("box_side must be at least 2")
    law = normalize_law(law)
    box = LatticeBox.centered(box_side, d)
    seeds = np.array([derive_seed(seed, i) for i in range(n_samples)], dtype=np.uint64)
    if box.n_vertices <= 4096:
        vals = np.concatenate(
            [
                _batch_proxy_density(box, p, lam, law, seeds[i:i + batch])
                for i in range(0, n_samples, batch)
            ]
        )
    else:
        vals = np.array(
            [_proxy_density(generate_environment(box, p, lam, law, int(s))) for s in seeds]
        )
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return ThetaEstimate(mean, (mean - Z95 * se, mean + Z95 * se), se, n_samples)


@dataclass(frozen=True)
class DensityScalingReport:
    """Standard deviation of block densities of the proxy across scales.

    Attributes
    ----------
    levels : tuple of int
    n_samples : tuple of int
        Number of blocks entering each level's statistics.
    mean_density, std_density : tuple of float
    slope, intercept : float or None
        Least-squares fit of ``ln std`` against ``m ln 3``; None when fewer
        than two levels or a zero standard deviation make it undefined.
    degenerate : bool
    theta : float
    theta_ci : tuple
    """

    levels: tuple
    n_samples: tuple
    mean_density: tuple
    std_density: tuple
    slope: Optional[float]
    intercept: Optional[float]
    degenerate: bool
    theta: float
    theta_ci: tuple

    def rows(self):
        return list(zip(self.levels, self.n_samples, self.mean_density, self.std_density))


def block_densities(mask: np.ndarray, level: int) -> np.ndarray:
    """Mean of ``mask`` over the disjoint level-``level`` blocks tiling it."""
    s = 3 ** level
    d = mask.ndim
    n = mask.shape[0] // s
    shape = []
    for _ in range(d):
        shape += [n, s]
    blocks = mask.reshape(shape).mean(axis=tuple(range(1, 2 * d, 2)))
    return blocks.ravel()


def density_scaling_experiment(
    p: float,
    m_range: Sequence[int],
    n_samples: int,
    seed: int = 0,
    d: int = 2,
    lam: float = 1.0,
    law: str = "bernoulli-unit",
    pad: Optional[int] = None,
) -> DensityScalingReport:
    """Fluctuations of the proxy density in triadic blocks.

    Each sample is an environment on the top cube of side ``3^max(m)``
    padded by ``pad`` vertices on each side (default a third of the top
    side). The proxy is labeled on the padded box; for each level ``m``
    the densities of all level-``m`` blocks tiling the top cube enter the
    statistics.

    Raises
    ------
    StatisticsError
        If ``n_samples < 10``.
    """
    if n_samples < 10:
        raise StatisticsError(f"need at least 10 samples, got {n_samples}")
    levels = sorted(set(int(m) for m in m_range))
    if not levels or levels[0] < 0:
        raise ParameterError("m_range must contain nonnegative levels")
    top = 3 ** levels[-1]
    if pad is None:
        pad = max(top // 3, 9)
    box = LatticeBox.centered(top + 2 * pad, d)
    inner = tuple(slice(pad, pad + top) for _ in range(d))
    per_level = {m: [] for m in levels}
    for i in range(n_samples):
        env = generate_environment(box, p, lam, law, derive_seed(seed, i))
        proxy = label_clusters(env).proxy[inner]
        for m in levels:
            per_level[m].append(block_densities(proxy, m))
    means, stds, counts = [], [], []
    for m in levels:
        vals = np.concatenate(per_level[m])
        counts.append(int(vals.size))
        means.append(float(vals.mean()))
        stds.append(float(vals.std(ddof=1)))
    top_vals = np.concatenate(per_level[levels[-1]])
    theta = float(top_vals.mean())
    se = float(top_vals.std(ddof=1) / np.sqrt(top_vals.size))
    slope = intercept = None
    degenerate = any(s <= 0 for s in stds)
    if len(levels) >= 2 and not degenerate:
        xs = np.array(levels, dtype=float) * np.log(3.0)
        slope, intercept = (float(v) for v in np.polyfit(xs, np.log(stds), 1))
    return DensityScalingReport(
        tuple(levels),
        tuple(counts),
        tuple(means),
        tuple(stds),
        slope,
        intercept,
        degenerate,
        theta,
        (theta - Z95 * se, theta + Z95 * se),
    )
