"""Divergence-form operators on the cluster, cell problems, correctors and fluxes.

Sign convention: ``L u(x) = sum_z a(x,z) (u(z) - u(x))`` is the generator
(nonpositive); sparse matrices built here represent ``-L = D - W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix, diags, identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh, splu

from .cluster import ClusterLabeling, label_clusters, label_components
from .env import (
    Environment,
    LatticeBox,
    TriadicCube,
    check_supercritical,
    derive_seed,
    generate_environment,
    normalize_law,
)
from .errors import GeometryError, ParameterError, ShapeError, SolverError
from .graph import DomainGraph

BOUNDARY_CONDITIONS = ("free", "dirichlet-zero")
DIRECT_LIMIT = 400_000


def _bond_slices(d: int, k: int):
    lo = [slice(None)] * d
    hi = [slice(None)] * d
    lo[k] = slice(0, -1)
    hi[k] = slice(1, None)
    return tuple(lo), tuple(hi)


@dataclass(frozen=True, eq=False)
class GraphOperator:
    """The generator ``div a grad`` on the vertices of ``mask``.

    ``bc="free"`` keeps only bonds inside the mask, so rows sum to zero.
    ``bc="dirichlet-zero"`` also keeps bonds leaving the mask and treats the
    outside value as zero. Values off the mask are returned as zero.
    """

    env: Environment
    mask: np.ndarray
    bc: str = "free"

    def __post_init__(self):
        if self.bc not in BOUNDARY_CONDITIONS:
            raise ParameterError(f"unknown boundary condition {self.bc!r}")
        if np.shape(self.mask) != self.env.box.sides:
            raise ShapeError("mask shape does not match the box")

    def apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != self.env.box.sides:
            raise ShapeError(f"field shape {u.shape} != box shape {self.env.box.sides}")
        m = self.mask
        uu = np.where(m, u, 0.0)
        out = np.zeros_like(uu)
        for k, a in enumerate(self.env.conductances):
            lo, hi = _bond_slices(self.env.d, k)
            if self.bc == "free":
                w = a * (m[lo] & m[hi])
            else:
                w = a * (m[lo] | m[hi])
            flux = w * (uu[hi] - uu[lo])
            out[lo] += flux
            out[hi] -= flux
        out[~m] = 0.0
        return out

    def matrix(self):
        """Sparse matrix of ``-L`` on mask vertices (local indexing)."""
        g = DomainGraph(self.env, self.mask)
        mat = g.laplacian()
        if self.bc == "dirichlet-zero":
            full_deg = g.local(self.env.degree())
            mat = (mat + diags(full_deg - g.degree)).tocsr()
        return mat


def apply_operator(op: GraphOperator, u: np.ndarray) -> np.ndarray:
    """Matrix-free evaluation of ``L u`` (closed bonds contribute zero)."""
    return op.apply(u)


def pcg(matvec, b: np.ndarray, diag: np.ndarray, tol: float, maxiter: int, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns
    -------
    x : ndarray
    history : list of float
        Residual 2-norms, one per iteration (starting with the initial one).

    Raises
    ------
    SolverError
        If ``||r|| <= tol * ||b||`` is not reached within ``maxiter``.
    """
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm if bnorm > 0 else tol
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    z = inv * r
    p = z.copy()
    rz = float(r @ z)
    history = [float(np.linalg.norm(r))]
    for _ in range(maxiter):
        if history[-1] <= target:
            return x, history
        ap = matvec(p)
        denom = float(p @ ap)
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        history.append(float(np.linalg.norm(r)))
        z = inv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if history[-1] <= target:
        return x, history
    raise SolverError(
        f"conjugate gradients stopped at residual {history[-1]:.3e} > {target:.3e}", history
    )


class SPDSolver:
    """Reusable solver for a sparse SPD matrix (sparse LU or PCG)."""

    def __init__(self, mat, method: str = "auto", tol: float = 1e-10):
        if method == "auto":
            method = "direct" if mat.shape[0] <= DIRECT_LIMIT else "cg"
        if method not in ("direct", "cg"):
            raise ParameterError(f"unknown solver method {method!r}")
        self.mat = mat.tocsr()
        self.method = method
        self.tol = tol
        self.n = mat.shape[0]
        self._lu = None
        if method == "direct" and self.n:
            self._lu = splu(self.mat.tocsc(), permc_spec="COLAMD")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        if self.method == "direct":
            x = self._lu.solve(np.asarray(b, dtype=np.float64))
            res = float(np.linalg.norm(b - self.mat @ x))
            bn = float(np.linalg.norm(b))
            if res > max(self.tol * bn, self.tol):
                # refine once; sparse LU is backward stable so this rarely triggers
                x = x + self._lu.solve(b - self.mat @ x)
            return x
        maxiter = int(20 * np.sqrt(self.n) + 1000)
        x, _ = pcg(lambda v: self.mat @ v, np.asarray(b, float), self.mat.diagonal(), self.tol, maxiter)
        return x


class DirichletSystem:
    """``-div a grad u = rhs`` on ``domain \\ boundary`` with ``u`` given on ``boundary``.

    Bonds leaving ``domain`` are ignored (natural condition). Components of
    the domain graph without boundary vertices carry no information and get
    ``u = 0``; a nonzero right-hand side there is rejected.
    """

    def __init__(self, env: Environment, domain: np.ndarray, boundary: np.ndarray, method="auto", tol=1e-10):
        domain = np.asarray(domain, dtype=bool)
        boundary = np.asarray(boundary, dtype=bool) & domain
        self.env = env
        self.graph = DomainGraph(env, domain)
        g = self.graph
        is_bd = g.local(boundary)
        comp = g.components()
        active = np.zeros(comp.max() + 1 if g.n else 0, dtype=bool)
        active[comp[is_bd]] = True
        self.bd = np.flatnonzero(is_bd)
        self.interior = np.flatnonzero(~is_bd & active[comp])
        self.floating = np.flatnonzero(~is_bd & ~active[comp])
        lap = g.laplacian()
        self.A_II = lap[self.interior][:, self.interior].tocsr()
        self.W_IB = g.W[self.interior][:, self.bd].tocsr()
        self.tol = tol
        self.solver = SPDSolver(self.A_II, method, tol)

    def solve(self, rhs: Optional[np.ndarray], boundary_values: Optional[np.ndarray]) -> np.ndarray:
        g = self.graph
        rhs_l = np.zeros(g.n) if rhs is None else g.local(rhs).astype(float)
        bv_l = np.zeros(g.n) if boundary_values is None else g.local(boundary_values).astype(float)
        if self.floating.size and np.any(rhs_l[self.floating] != 0):
            raise SolverError("nonzero right-hand side on a component without boundary vertices")
        u = np.zeros(g.n)
        u[self.bd] = bv_l[self.bd]
        b = rhs_l[self.interior] + self.W_IB @ u[self.bd]
        u[self.interior] = self.solver.solve(b)
        res = float(np.linalg.norm(self.A_II @ u[self.interior] - b)) if self.interior.size else 0.0
        bn = float(np.linalg.norm(b))
        if res > 10 * self.tol * max(bn, 1.0):
            raise SolverError(f"residual {res:.3e} above tolerance", [res])
        return g.field(u)


def solve_dirichlet(
    env: Environment,
    domain: np.ndarray,
    rhs: Optional[np.ndarray],
    boundary_values: Optional[np.ndarray],
    tol: float = 1e-10,
    *,
    boundary: Optional[np.ndarray] = None,
    method: str = "auto",
) -> np.ndarray:
    """Solve the Dirichlet problem for ``-div a grad`` on a vertex domain.

    Parameters
    ----------
    env : Environment
    domain : ndarray of bool
        Participating vertices; only bonds inside the domain are used.
    rhs : ndarray or None
        Right-hand side on interior vertices (None means zero).
    boundary_values : ndarray or None
        Prescribed values, read on boundary vertices only.
    tol : float
        Relative residual tolerance.
    boundary : ndarray of bool, optional
        Where values are prescribed; defaults to the domain vertices on the
        geometric boundary of the box.
    method : {"auto", "direct", "cg"}
        ``cg`` is Jacobi-preconditioned conjugate gradients capped at
        ``20 sqrt(n) + 1000`` iterations; ``direct`` is sparse LU; ``auto``
        picks LU up to 400k unknowns.

    Returns
    -------
    ndarray
        Full-box field, zero off the domain.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    if boundary is None:
        boundary = env.box.boundary_mask()
    return DirichletSystem(env, domain, boundary, method, tol).solve(rhs, boundary_values)


def bond_energy(env: Environment, u: np.ndarray, mask: np.ndarray) -> float:
    """``sum a(e) (grad u)^2`` over open bonds with both endpoints in ``mask``."""
    total = 0.0
    for k, a in enumerate(env.conductances):
        lo, hi = _bond_slices(env.d, k)
        w = a * (mask[lo] & mask[hi])
        total += float(np.sum(w * (u[hi] - u[lo]) ** 2))
    return total


def affine(box: LatticeBox, p: Sequence[float], origin=None) -> np.ndarray:
    """The affine field ``l_p(x) = p . (x - origin)`` on a box."""
    origin = (0,) * box.d if origin is None else origin
    out = np.zeros(box.sides)
    for k, ax in enumerate(box.axes()):
        shape = [1] * box.d
        shape[k] = -1
        out = out + float(p[k]) * (ax - origin[k]).astype(float).reshape(shape)
    return out


@dataclass
class CellEnergy:
    """Result of the cell problem on one cube.

    Attributes
    ----------
    nu : float
        ``(2|cube|)^{-1}`` times the minimal energy.
    degenerate : bool
        True when the proxy cluster misses the cube.
    energy : float
    u : ndarray or None
        Minimizer on the cube (zero off the cluster).
    cluster : ndarray of bool or None
    """

    nu: float
    degenerate: bool
    energy: float = 0.0
    u: Optional[np.ndarray] = field(default=None, repr=False)
    cluster: Optional[np.ndarray] = field(default=None, repr=False)


class CellProblem:
    """Dirichlet cell problem on ``proxy ∩ cube`` with affine boundary data.

    The cube's geometric boundary carries the data; the factorization is
    shared across directions.
    """

    def __init__(self, env: Environment, cube: TriadicCube, labeling: Optional[ClusterLabeling] = None, method="auto", tol=1e-10):
        cbox = cube.as_box()
        if not env.box.contains_box(cbox):
            raise GeometryError(f"cube {cube} is not inside the environment box")
        if labeling is None:
            labeling = label_clusters(env)
        sl = env.box.slices_of(cbox)
        self.cube = cube
        self.env = env.restrict(cbox) if cbox != env.box else env
        self.cluster = labeling.proxy[sl].copy()
        self.volume = cube.volume
        self.degenerate = not self.cluster.any()
        if not self.degenerate and cube.side > 1:
            self.system = DirichletSystem(self.env, self.cluster, cbox.boundary_mask(), method, tol)
        else:
            self.system = None

    def solve(self, p: Sequence[float]) -> CellEnergy:
        if self.degenerate:
            return CellEnergy(0.0, True, 0.0, np.zeros(self.cluster.shape), self.cluster)
        if self.system is None:
            return CellEnergy(0.0, False, 0.0, np.zeros(self.cluster.shape), self.cluster)
        lp = affine(self.env.box, p, self.cube.center)
        u = self.system.solve(None, lp)
        energy = bond_energy(self.env, u, self.cluster)
        return CellEnergy(energy / (2.0 * self.volume), False, energy, u, self.cluster)


def cell_energy(
    env: Environment,
    cube: TriadicCube,
    p: Sequence[float],
    labeling: Optional[ClusterLabeling] = None,
    method: str = "auto",
) -> CellEnergy:
    """Cell energy ``nu(cube, p)`` on the proxy cluster.

    Minimizes ``sum a (grad u)^2`` over ``u = l_p`` on the cluster vertices
    of the cube boundary, with the cluster taken as the proxy of the whole
    environment box intersected with the cube.

    Examples
    --------
    >>> from perchom.env import LatticeBox, TriadicCube, generate_environment
    >>> env = generate_environment(LatticeBox.centered(3), 1.0)
    >>> round(cell_energy(env, TriadicCube(1, (0, 0)), (1, 0)).nu, 12)
    0.333333333333
    """
    return CellProblem(env, cube, labeling, method).solve(p)


def _tensor_from_problem(prob: CellProblem, d: int) -> np.ndarray:
    """Effective tensor ``2 nu`` on axes and by polarization off the diagonal."""
    a = np.zeros((d, d))
    nus = [prob.solve(np.eye(d)[k]).nu for k in range(d)]
    for k in range(d):
        a[k, k] = 2.0 * nus[k]
    for j in range(d):
        for k in range(j + 1, d):
            e = (np.eye(d)[j] + np.eye(d)[k]) / np.sqrt(2.0)
            # nu(e) = (a_jj + a_kk + 2 a_jk) / 4 for the exact quadratic form
            a[j, k] = a[k, j] = 2.0 * prob.solve(e).nu - nus[j] - nus[k]
    return a


@dataclass
class HomogenizedParams:
    """Cell-problem estimates of the homogenized coefficients.

    Attributes
    ----------
    level : int
    theta, theta_stderr : float
        Proxy density in the level-``level`` cube.
    a_bar, a_bar_stderr : ndarray (d, d)
        Mean effective tensor at ``level`` and its standard error.
    a_bar_prev : ndarray (d, d)
        Same at ``level - 1`` (central subcube, same samples).
    sigma2, sigma2_stderr : float
        ``2 theta^{-1} tr(a_bar) / d``.
    sigma2_prev : float
    a_bar_extrapolated, sigma2_extrapolated
        ``(3 a_m - a_{m-1}) / 2``, which removes the boundary-layer term
        proportional to ``3^{-m}`` (exact for unit conductances).
    n_samples, n_degenerate : int
    """

    level: int
    theta: float
    theta_stderr: float
    a_bar: np.ndarray
    a_bar_stderr: np.ndarray
    a_bar_prev: np.ndarray
    sigma2: float
    sigma2_stderr: float
    sigma2_prev: float
    a_bar_extrapolated: np.ndarray
    sigma2_extrapolated: float
    n_samples: int
    n_degenerate: int = 0


def periodic_cell_tensor(env: Environment, level: int, method: str = "auto", tol: float = 1e-10):
    """Homogenized tensor and cluster density from the periodized environment.

    The level-``level`` triadic cube at the origin is closed into a torus:
    the bond leaving the last layer in direction ``k`` is the environment
    bond from that layer to the next one, wrapped onto the first layer. The
    corrector solves ``-div a (e_k + grad chi) = 0`` on the largest component
    of the torus graph (one vertex pinned), and
    ``a_bar[j, k] = |T|^-1 sum_{bonds b in direction j} a(b) (delta_jk + grad_j chi_k(b))``.

    Parameters
    ----------
    env : Environment
        Must contain the cube and one extra layer beyond its upper faces.
    level : int

    Returns
    -------
    a_bar : ndarray, shape (d, d)
    theta : float
        Fraction of torus vertices on the largest component.
    """
    d = env.d
    cube = TriadicCube(level, (0,) * d)
    L = cube.side
    ext = LatticeBox(cube.lo, (L + 1,) * d)
    if not env.box.contains_box(ext):
        raise GeometryError("periodic cell needs the cube plus one upper layer inside the box")
    sub = env.restrict(ext)
    n = L ** d
    idx = np.arange(n).reshape((L,) * d)
    rows, cols, vals, dirs = [], [], [], []
    for k in range(d):
        c = sub.bond(k)[(slice(0, L),) * d]
        keep = c > 0
        rows.append(idx[keep])
        cols.append(np.roll(idx, -1, axis=k)[keep])
        vals.append(c[keep])
        dirs.append(np.full(int(keep.sum()), k))
    r, q, v, dk = (np.concatenate(a) for a in (rows, cols, vals, dirs))
    W = coo_matrix((np.r_[v, v], (np.r_[r, q], np.r_[q, r])), shape=(n, n)).tocsr()
    _, comp = connected_components(W, directed=False)
    cl = np.flatnonzero(comp == int(np.argmax(np.bincount(comp))))
    theta = cl.size / n
    a_bar = np.zeros((d, d))
    if cl.size < 2:
        return a_bar, theta
    pos = np.full(n, -1, dtype=np.int64)
    pos[cl] = np.arange(cl.size)
    Wc = W[cl][:, cl]
    lap = (diags(np.asarray(Wc.sum(axis=1)).ravel()) - Wc).tocsr()
    solver = SPDSolver(lap[1:, 1:], method, tol)
    inside = pos[r] >= 0
    chis = []
    for k in range(d):
        sel = inside & (dk == k)
        rhs = np.zeros(cl.size)
        np.add.at(rhs, pos[r[sel]], v[sel])
        np.add.at(rhs, pos[q[sel]], -v[sel])
        chi = np.zeros(cl.size)
        chi[1:] = solver.solve(rhs[1:])
        chis.append(chi)
    for j in range(d):
        sel = inside & (dk == j)
        for k in range(d):
            grad = chis[k][pos[q[sel]]] - chis[k][pos[r[sel]]]
            a_bar[j, k] = float(np.sum(v[sel] * ((j == k) + grad))) / n
    return a_bar, theta


def estimate_homogenized(
    p: float,
    lam: float = 1.0,
    law: str = "bernoulli-unit",
    m: int = 4,
    n_samples: int = 10,
    seed: int = 0,
    d: int = 2,
    pad: Optional[int] = None,
    force: bool = False,
    method: str = "auto",
    boundary: str = "dirichlet",
) -> HomogenizedParams:
    """Monte Carlo estimate of ``a_bar``, ``theta`` and ``sigma2``.

    Sample ``i`` draws an environment with seed ``derive_seed(seed, i)``.

    With ``boundary="dirichlet"`` the environment lives on the level-``m``
    cube centered at 0 padded by ``pad`` vertices per side; the cell
    problems are solved on the proxy of the padded box inside the level-``m``
    cube and inside its central level-``m-1`` subcube, and ``theta`` is the
    proxy density of the cube. The extrapolated fields assume a ``3^-m``
    finite-size bias.

    With ``boundary="periodic"`` the cube is closed into a torus (see
    :func:`periodic_cell_tensor`) and ``theta`` is the largest-component
    density of the torus. The torus estimate has a much smaller finite-size
    bias, so the extrapolated fields equal the plain ones.
    """
    if boundary not in ("dirichlet", "periodic"):
        raise ParameterError(f"unknown boundary {boundary!r}")
    if m < 2:
        raise ParameterError("m must be at least 2")
    if n_samples < 1:
        raise ParameterError("n_samples must be at least 1")
    check_supercritical(p, d, force)
    law = normalize_law(law)
    side = 3 ** m
    if pad is None:
        pad = max(3 ** (m - 1), 9)
    if boundary == "periodic":
        box = LatticeBox(TriadicCube(m, (0,) * d).lo, (side + 1,) * d)
    else:
        box = LatticeBox.centered(side + 2 * pad, d)
    cube = TriadicCube(m, (0,) * d)
    sub = TriadicCube(m - 1, (0,) * d)
    tensors, prev, thetas, degenerate = [], [], [], 0
    for i in range(n_samples):
        env = generate_environment(box, p, lam, law, derive_seed(seed, i))
        if boundary == "periodic":
            a, th = periodic_cell_tensor(env, m, method)
            tensors.append(a)
            prev.append(periodic_cell_tensor(env, m - 1, method)[0])
            thetas.append(th)
            degenerate += int(th == 0.0 or not np.any(a))
            continue
        lab = label_clusters(env)
        prob = CellProblem(env, cube, lab, method)
        degenerate += int(prob.degenerate)
        tensors.append(_tensor_from_problem(prob, d))
        prev.append(_tensor_from_problem(CellProblem(env, sub, lab, method), d))
        thetas.append(float(prob.cluster.mean()))
    T = np.array(tensors)
    P = np.array(prev)
    th = np.array(thetas)
    a_bar = T.mean(axis=0)
    a_prev = P.mean(axis=0)
    se = T.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.zeros((d, d))
    theta = float(th.mean())
    theta_se = float(th.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    tr = np.trace(T, axis1=1, axis2=2) / d
    sigma2 = 2.0 * float(tr.mean()) / theta
    # delta method for the ratio of means
    g = 2.0 * (tr / theta - float(tr.mean()) * th / theta**2)
    s2_se = float(g.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    sigma2_prev = 2.0 * float(np.trace(a_prev)) / d / theta
    a_ext = a_bar.copy() if boundary == "periodic" else (3.0 * a_bar - a_prev) / 2.0
    return HomogenizedParams(
        level=m,
        theta=theta,
        theta_stderr=theta_se,
        a_bar=a_bar,
        a_bar_stderr=se,
        a_bar_prev=a_prev,
        sigma2=sigma2,
        sigma2_stderr=s2_se,
        sigma2_prev=sigma2_prev,
        a_bar_extrapolated=a_ext,
        sigma2_extrapolated=2.0 * float(np.trace(a_ext)) / d / theta,
        n_samples=n_samples,
        n_degenerate=degenerate,
    )


def nearest_vertex(mask: np.ndarray, box: LatticeBox, y) -> tuple:
    """Vertex of ``mask`` closest to ``y`` (Euclidean; ties lexicographic)."""
    if not mask.any():
        raise GeometryError("empty vertex set")
    d2 = box.distance2_from(y)
    d2 = np.where(mask, d2, np.inf)
    # argmin returns the first minimum in row-major = lexicographic order
    return box.vertex_of(int(np.argmin(d2)))


@dataclass
class CorrectorField:
    """First-order corrector ``chi_{e_k}`` on the proxy cluster of a box.

    Attributes
    ----------
    k : int
    values : ndarray
        Full-box field, zero off ``mask``.
    mask : ndarray of bool
        Cluster vertices where the corrector is defined.
    anchor : tuple
        Cluster vertex where ``chi = 0``.
    env : Environment
    residual : float
        Max-norm of ``div a (e_k + grad chi)`` on interior cluster vertices.
    """

    k: int
    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    anchor: tuple
    env: Environment = field(repr=False)
    residual: float = 0.0


def _corrector_rhs(env: Environment, mask: np.ndarray, k: int) -> np.ndarray:
    """``sum_z a(x,z) (z - x)_k`` over bonds inside ``mask``."""
    lo, hi = _bond_slices(env.d, k)
    w = env.conductances[k] * (mask[lo] & mask[hi])
    rhs = np.zeros(env.box.sides)
    rhs[lo] += w
    rhs[hi] -= w
    return rhs


def corrector_residual(env: Environment, chi: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """``div a (e_k + grad chi)`` on ``mask`` (bonds inside the mask only)."""
    op = GraphOperator(env, mask, "free")
    return op.apply(chi) + _corrector_rhs(env, mask, k)


def solve_corrector(
    env: Environment,
    k: int,
    y=None,
    labeling: Optional[ClusterLabeling] = None,
    tol: float = 1e-10,
    method: str = "auto",
) -> CorrectorField:
    """Finite-volume corrector on the proxy cluster of the environment box.

    Solves ``-div a (e_k + grad chi) = 0`` on the proxy with ``chi = 0`` on
    proxy vertices of the box boundary, then subtracts ``chi(anchor)``, the
    anchor being the proxy vertex nearest to ``y`` (default: origin).
    """
    d = env.d
    if not 0 <= k < d:
        raise ParameterError(f"direction {k} out of range")
    if labeling is None:
        labeling = label_clusters(env)
    mask = labeling.proxy
    if not mask.any():
        raise GeometryError("proxy cluster is empty")
    y = (0,) * d if y is None else tuple(y)
    rhs = _corrector_rhs(env, mask, k)
    chi = solve_dirichlet(env, mask, rhs, None, tol, boundary=env.box.boundary_mask() & mask, method=method)
    anchor = nearest_vertex(mask, env.box, y)
    chi = np.where(mask, chi - chi[env.box.local(anchor)], 0.0)
    res = corrector_residual(env, chi, mask, k)
    interior = mask & ~env.box.boundary_mask()
    resid = float(np.abs(res[interior]).max()) if interior.any() else 0.0
    return CorrectorField(k, chi, mask, anchor, env, resid)


@dataclass
class FluxField:
    """Centered flux ``a (e_k + D chi) - sigma2/2 e_k`` as ``d`` component fields."""

    k: int
    components: tuple = field(repr=False)
    variant: str
    mask: np.ndarray = field(repr=False)


def flux_field(env: Environment, chi: CorrectorField, sigma2: float, variant: str = "centered") -> FluxField:
    """Centered or translated flux of a corrector.

    Component ``i`` of the centered flux at a cluster vertex ``x`` is
    ``a(x, x+e_i) (delta_ik + chi(x+e_i) - chi(x)) - sigma2/2 delta_ik``;
    bonds leaving the box count as closed. The translated variant shifts
    component ``i`` by ``+e_i``, i.e. evaluates it at ``x - e_i``.
    """
    if variant not in ("centered", "translated"):
        raise ParameterError(f"unknown flux variant {variant!r}")
    d = env.d
    mask = chi.mask
    u = chi.values
    comps = []
    for i in range(d):
        lo, hi = _bond_slices(d, i)
        g = np.zeros(env.box.sides)
        w = env.conductances[i] * (mask[lo] & mask[hi])
        g[lo] = w * ((1.0 if i == chi.k else 0.0) + u[hi] - u[lo])
        if i == chi.k:
            g -= 0.5 * sigma2
        g = np.where(mask, g, 0.0)
        if variant == "translated":
            shifted = np.zeros_like(g)
            shifted[hi] = g[lo]
            g = shifted
        comps.append(g)
    return FluxField(chi.k, tuple(comps), variant, mask)


@dataclass
class WeakNorm:
    """Dual-norm value and the multiscale block-average bound."""

    value: float
    multiscale_bound: float
    n_vertices: int


def _as_components(f) -> list:
    if isinstance(f, FluxField):
        return list(f.components)
    if isinstance(f, np.ndarray):
        return [f]
    return list(f)


def multiscale_bound(fields: list, box: LatticeBox, domain: np.ndarray, r: float) -> float:
    """``||f||_2 + sum_n 3^n (mean block-average^2)^{1/2}`` over triadic scales.

    Block averages are taken over level-``n`` triadic cubes meeting the
    domain, for ``3^n < 2r``; every average divides by the full cube volume.
    """
    nv = int(domain.sum())
    total = 0.0
    coords = [ax for ax in box.axes()]
    n_top = 0
    while 3 ** (n_top + 1) < 2 * r:
        n_top += 1
    for f in fields:
        fv = np.where(domain, f, 0.0)
        val = np.sqrt(np.sum(fv**2) / nv)
        for n in range(0, n_top + 1):
            s = 3**n
            h = (s - 1) // 2
            ids = [((c + h) // s) for c in coords]
            ids = [i - i.min() for i in ids]
            shape = tuple(int(i.max()) + 1 for i in ids)
            flat = np.ravel_multi_index(np.meshgrid(*ids, indexing="ij"), shape)
            sums = np.bincount(flat.ravel(), weights=fv.ravel(), minlength=int(np.prod(shape)))
            hit = np.bincount(flat.ravel(), weights=domain.ravel().astype(float), minlength=sums.size) > 0
            avg = sums[hit] / s**box.d
            val += s * np.sqrt(np.mean(avg**2))
        total += val**2
    return float(np.sqrt(total))


def weak_norm(f, env: Environment, domain: np.ndarray, r: float, method: str = "auto") -> WeakNorm:
    """Quadratic dual norm of ``f`` on a cluster domain.

    With ``A = r^{-2} I + (D - W)``, ``W`` the unit-weight open-bond graph
    inside the domain, the norm is ``sqrt(<f, A^{-1} f> / |V|)`` and vector
    fields add their component norms in quadrature.

    Parameters
    ----------
    f : ndarray, sequence of ndarray or FluxField
        Full-box field(s); only values on ``domain`` matter.
    domain : ndarray of bool
    r : float
        Scale of the zeroth-order term.
    """
    domain = np.asarray(domain, dtype=bool)
    g = DomainGraph(env, domain, weighted=False)
    if g.n == 0:
        return WeakNorm(0.0, 0.0, 0)
    A = g.laplacian() + identity(g.n, format="csr") / float(r) ** 2
    solver = SPDSolver(A, method)
    comps = _as_components(f)
    total = 0.0
    for c in comps:
        fl = g.local(c).astype(float)
        total += float(fl @ solver.solve(fl))
    value = float(np.sqrt(max(total, 0.0) / g.n))
    return WeakNorm(value, multiscale_bound(comps, env.box, domain, r), g.n)


def corrector_oscillation(chi: CorrectorField, radii: Sequence[float]) -> np.ndarray:
    """``max - min`` of the corrector over the cluster in ``B_r(anchor)``."""
    box = chi.env.box
    d2 = box.distance2_from(chi.anchor)
    out = []
    for r in radii:
        sel = chi.mask & (d2 < float(r) ** 2)
        vals = chi.values[sel]
        out.append(float(vals.max() - vals.min()) if vals.size else 0.0)
    return np.array(out)


@dataclass
class PoincareResult:
    """Spectral gap of the free cluster Laplacian on a domain.

    Attributes
    ----------
    lambda2 : float
    constant : float
        ``1 / (r sqrt(lambda2))``; inf when ``lambda2 = 0``.
    connected : bool
        False when the supplied domain had several components.
    n_vertices : int
    """

    lambda2: float
    constant: float
    connected: bool
    n_vertices: int


def largest_component_mask(env: Environment, mask: np.ndarray) -> np.ndarray:
    """Largest open-bond component of the graph restricted to ``mask``."""
    lab = label_components(env, mask)
    return lab.proxy


def poincare_constant(
    env: Environment,
    domain: np.ndarray,
    r: float,
    restrict_to_largest: bool = True,
    tol: float = 1e-8,
) -> PoincareResult:
    """Smallest nonzero eigenvalue of the unit-weight cluster Laplacian.

    Parameters
    ----------
    domain : ndarray of bool
        Typically ``proxy & ball``.
    restrict_to_largest : bool
        Work on the largest component of the domain graph. When False a
        disconnected domain yields ``lambda2 = 0``.
    """
    domain = np.asarray(domain, dtype=bool)
    g = DomainGraph(env, domain, weighted=False)
    ncomp = int(g.components().max()) + 1 if g.n else 0
    connected = ncomp <= 1
    if not connected:
        if not restrict_to_largest:
            return PoincareResult(0.0, float("inf"), False, g.n)
        g = DomainGraph(env, largest_component_mask(env, domain), weighted=False)
    if g.n < 2:
        return PoincareResult(0.0, float("inf"), connected, g.n)
    L = g.laplacian()
    if g.n <= 600:
        vals = np.linalg.eigvalsh(L.toarray())
        lam2 = float(vals[1])
    else:
        shift = -1e-3 / g.n
        vals = eigsh(L, k=2, sigma=shift, which="LM", tol=tol, return_eigenvectors=False)
        lam2 = float(np.sort(vals)[1])
    const = 1.0 / (r * np.sqrt(lam2)) if lam2 > 0 else float("inf")
    return PoincareResult(lam2, const, connected, g.n)


__all__ = [
    "GraphOperator",
    "apply_operator",
    "solve_dirichlet",
    "DirichletSystem",
    "SPDSolver",
    "pcg",
    "cell_energy",
    "CellEnergy",
    "CellProblem",
    "estimate_homogenized",
    "periodic_cell_tensor",
    "HomogenizedParams",
    "solve_corrector",
    "CorrectorField",
    "flux_field",
    "FluxField",
    "weak_norm",
    "WeakNorm",
    "corrector_oscillation",
    "poincare_constant",
    "PoincareResult",
    "nearest_vertex",
    "affine",
    "bond_energy",
]
