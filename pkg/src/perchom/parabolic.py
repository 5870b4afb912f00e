"""Heat kernels on the cluster, random walks, Gaussian envelopes and bound checks.

The default evolution is uniformization: with ``Lam`` the largest total
conductance at a vertex and ``P = I + L / Lam``,

    exp(t L) = sum_k Poisson(Lam t; k) P^k,

truncated on both sides so the dropped Poisson mass is below a tolerance.
``P`` is symmetric and doubly stochastic, so the result is nonnegative and
the mass defect equals the dropped Poisson mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse import csr_matrix, diags, identity
from scipy.special import erfc, gammaln
from scipy.stats import poisson

from .cluster import ClusterLabeling, label_clusters
from .env import Environment, LatticeBox
from .errors import EvolutionError, GeometryError, ParameterError
from .graph import DomainGraph

METHODS = ("uniformization", "rk-integrator", "monte-carlo")
WALK_TYPES = ("VSRW", "CSRW", "SRW")
MAX_TERMS = 50_000_000


@dataclass(eq=False)
class KernelSnapshot:
    """A field on the proxy cluster at time ``t``.

    Attributes
    ----------
    t : float
    y : tuple
        Base point.
    values : ndarray
        Full-box array, zero off the cluster.
    mask : ndarray of bool
        Cluster vertices.
    box : LatticeBox
    method : str
    meta : dict
        Truncation data (terms used, dropped Poisson mass, rate bound).
    """

    t: float
    y: tuple
    values: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    box: LatticeBox
    method: str = "uniformization"
    meta: dict = field(default_factory=dict)

    def mass(self) -> float:
        return float(self.values[self.mask].sum())

    def __call__(self, x) -> float:
        return float(self.values[self.box.local(x)])


class HeatEvolver:
    """Generator of the variable-speed walk on the proxy cluster.

    Parameters
    ----------
    env : Environment
    labeling : ClusterLabeling, optional
    mask : ndarray of bool, optional
        Evolution domain; defaults to the proxy. Bonds leaving it are
        ignored, so the domain is a closed system.
    """

    def __init__(self, env: Environment, labeling: Optional[ClusterLabeling] = None, mask=None):
        if mask is None:
            if labeling is None:
                labeling = label_clusters(env)
            mask = labeling.proxy
        self.env = env
        self.box = env.box
        self.graph = DomainGraph(env, mask)
        self.mask = self.graph.mask
        g = self.graph
        self.rate = float(g.degree.max()) if g.n else 0.0
        self.generator = csr_matrix(g.W - diags(g.degree))
        if self.rate > 0:
            self.P = csr_matrix(identity(g.n) + self.generator / self.rate)
        else:
            self.P = csr_matrix(identity(g.n))

    def delta(self, y) -> np.ndarray:
        y = tuple(int(v) for v in y)
        if not self.box.contains(y) or not self.mask[self.box.local(y)]:
            raise GeometryError(f"base point {y} is not on the evolution domain")
        v = np.zeros(self.graph.n)
        v[self.graph.positions()[self.box.local(y)]] = 1.0
        return v

    def propagate(self, v: np.ndarray, dt: float, tol: float = 1e-12):
        """Apply ``exp(dt L)`` to a local vector by uniformization.

        Returns
        -------
        w : ndarray
        info : dict
            ``terms`` (matrix-vector products), ``dropped`` (Poisson mass
            left out; bounds the l1 error relative to ``||v||_1``).
        """
        if dt < 0:
            raise ParameterError("time step must be nonnegative")
        mu = dt * self.rate
        if mu == 0:
            return v.copy(), {"terms": 0, "dropped": 0.0}
        hi = int(poisson.isf(tol / 2, mu)) + 1
        lo = max(int(poisson.ppf(tol / 2, mu)) - 1, 0)
        if hi > MAX_TERMS:
            raise EvolutionError(f"uniformization needs {hi} terms (rate*time = {mu:.3g})")
        ks = np.arange(lo, hi + 1)
        logw = -mu + ks * np.log(mu) - gammaln(ks + 1.0)
        w = np.exp(logw)
        x = v.astype(np.float64, copy=True)
        acc = np.zeros_like(x)
        P = self.P
        for k in range(hi + 1):
            if k >= lo:
                acc += w[k - lo] * x
            if k < hi:
                x = P @ x
        dropped = max(0.0, 1.0 - float(np.sum(w)))
        return acc, {"terms": hi, "dropped": dropped}

    def snapshots(self, y, times: Sequence[float], tol: float = 1e-12, v0=None) -> list:
        """Kernel ``p(t, ., y)`` at increasing times, chaining the semigroup."""
        times = [float(t) for t in times]
        if any(t < 0 for t in times) or any(b < a for a, b in zip(times, times[1:])):
            raise ParameterError("times must be nonnegative and nondecreasing")
        y = tuple(int(c) for c in y)
        v = self.delta(y) if v0 is None else np.asarray(v0, dtype=float)
        out, t_prev, dropped, terms = [], 0.0, 0.0, 0
        per_step = tol / max(len(times), 1)
        for t in times:
            v, info = self.propagate(v, t - t_prev, per_step)
            dropped += info["dropped"]
            terms += info["terms"]
            t_prev = t
            meta = {"rate": self.rate, "terms": terms, "dropped": dropped}
            out.append(KernelSnapshot(t, y, self.graph.field(v), self.mask, self.box, "uniformization", meta))
        return out

    def rk(self, y, t: float, rtol: float = 1e-10, atol: float = 1e-14) -> KernelSnapshot:
        """Adaptive Runge-Kutta solution of ``dp/dt = L p`` (cross-check)."""
        y = tuple(int(c) for c in y)
        v0 = self.delta(y)
        if t == 0:
            return KernelSnapshot(0.0, y, self.graph.field(v0), self.mask, self.box, "rk-integrator", {})
        G = self.generator
        sol = solve_ivp(lambda _, p: G @ p, (0.0, t), v0, method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise EvolutionError(f"Runge-Kutta integration failed: {sol.message}")
        v = sol.y[:, -1]
        meta = {"nfev": int(sol.nfev), "rtol": rtol, "atol": atol}
        return KernelSnapshot(float(t), y, self.graph.field(v), self.mask, self.box, "rk-integrator", meta)


def evolve_kernel(
    env: Environment,
    labeling: Optional[ClusterLabeling],
    y,
    t,
    method: str = "uniformization",
    tol: float = 1e-12,
):
    """Heat kernel ``p(t, ., y)`` of the variable-speed walk on the proxy.

    Parameters
    ----------
    t : float or sequence of float
        A sequence returns a list of snapshots computed by chaining.
    method : {"uniformization", "rk-integrator"}

    Examples
    --------
    >>> from perchom.env import LatticeBox, generate_environment
    >>> env = generate_environment(LatticeBox.centered(5), 1.0)
    >>> evolve_kernel(env, None, (0, 0), 0.0)((0, 0))
    1.0
    """
    ev = HeatEvolver(env, labeling)
    many = np.ndim(t) > 0
    times = list(np.atleast_1d(t).astype(float))
    if method == "uniformization":
        snaps = ev.snapshots(y, times, tol)
    elif method == "rk-integrator":
        snaps = [ev.rk(y, s, rtol=min(1e-8, tol * 1e2), atol=tol) for s in times]
    else:
        raise ParameterError(f"unknown evolution method {method!r}")
    return snaps if many else snaps[0]


def homogenized_kernel(sigma2: float, t: float, x, d: Optional[int] = None) -> np.ndarray:
    """Gaussian kernel ``(2 pi sigma2 t)^{-d/2} exp(-|x|^2 / (2 sigma2 t))``.

    ``x`` holds displacement vectors along its last axis.
    """
    if t <= 0:
        raise ParameterError("homogenized kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] if d is None else d
    r2 = np.sum(x * x, axis=-1)
    return (2.0 * np.pi * sigma2 * t) ** (-d / 2.0) * np.exp(-r2 / (2.0 * sigma2 * t))


def homogenized_kernel_field(box: LatticeBox, sigma2: float, t: float, y) -> np.ndarray:
    """``p_bar(t, x - y)`` at every vertex of a box."""
    if t <= 0:
        raise ParameterError("homogenized kernel needs t > 0")
    r2 = box.distance2_from(y)
    return (2.0 * np.pi * sigma2 * t) ** (-box.d / 2.0) * np.exp(-r2 / (2.0 * sigma2 * t))


def envelope_psi(C: float, t: float, r, d: int, form: str = "barlow") -> np.ndarray:
    """``Psi_C(t, r) = -ln Phi_C(t, r)`` computed without exponentiation.

    ``form="barlow"`` includes the ``C t^{-d/2}`` prefactor; ``form="cv"``
    is the graph bound with prefactor ``C``.
    """
    if C <= 0 or t <= 0:
        raise ParameterError("envelope needs C > 0 and t > 0")
    r = np.abs(np.asarray(r, dtype=float))
    near = r * r / (C * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        far = (r / C) * (1.0 + np.log(np.where(r > 0, r, 1.0) / t))
    expo = np.where(r <= t, near, far)
    pre = -np.log(C)
    if form == "barlow":
        pre = pre + 0.5 * d * np.log(t)
    elif form != "cv":
        raise ParameterError(f"unknown envelope form {form!r}")
    return pre + expo


def envelope(C: float, t: float, x, d: int, form: str = "barlow"):
    """Envelope ``Phi_C(t, x)`` and ``Psi_C = -ln Phi_C``.

    ``x`` holds displacement vectors along its last axis (length ``d``).

    Returns
    -------
    phi, psi : ndarray
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ParameterError(f"displacements must have last axis of length {d}")
    psi = envelope_psi(C, t, np.linalg.norm(x, axis=-1), d, form)
    return np.exp(-psi), psi


@dataclass
class KernelBoundReport:
    """Minimal grid constants for the graph (cv) and Gaussian (barlow) bounds.

    ``None`` means no grid value works; the violation lists then hold the
    vertices (displacement, value, bound) failing the largest grid value.
    """

    cv_C: Optional[float]
    barlow_C: Optional[float]
    cv_violations: list = field(default_factory=list)
    barlow_violations: list = field(default_factory=list)


def _minimal_c(logp, r, t, d, grid, form):
    for C in grid:
        if np.all(logp <= -envelope_psi(C, t, r, d, form) + 1e-12):
            return C, []
    C = grid[-1]
    bad = np.flatnonzero(logp > -envelope_psi(C, t, r, d, form) + 1e-12)
    return None, bad


def check_kernel_bounds(snapshot: KernelSnapshot, C_grid: Sequence[float]) -> KernelBoundReport:
    """Smallest ``C`` on a grid with ``p <= Phi_C`` at every cluster vertex.

    Comparisons are made in log space so far-field values below the
    floating-point range are handled; exact zeros satisfy any bound.
    """
    if snapshot.t <= 0:
        raise ParameterError("bounds need t > 0")
    grid = sorted(float(c) for c in C_grid)
    if not grid:
        raise ParameterError("empty C grid")
    box = snapshot.box
    sel = snapshot.mask & (snapshot.values > 0)
    vals = snapshot.values[sel]
    r = np.sqrt(box.distance2_from(snapshot.y)[sel])
    logp = np.log(vals)
    d = box.d
    coords = box.coords()[sel]
    out = []
    for form in ("cv", "barlow"):
        C, bad = _minimal_c(logp, r, snapshot.t, d, grid, form)
        viol = []
        for i in bad[:50]:
            bound = float(np.exp(-envelope_psi(grid[-1], snapshot.t, r[i], d, form)))
            viol.append((tuple(int(c) for c in coords[i]), float(vals[i]), bound))
        out.append((C, viol))
    return KernelBoundReport(out[0][0], out[1][0], out[0][1], out[1][1])


def gradient_norm(env: Environment, u: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``|grad u|(x) = sum_{z ~ x} |u(z) - u(x)|`` over open bonds.

    With ``mask`` only bonds inside the mask count; ``mask=None`` uses all
    lattice bonds of the box (for functions defined everywhere).
    """
    out = np.zeros(env.box.sides)
    for k in range(env.d):
        lo = [slice(None)] * env.d
        hi = [slice(None)] * env.d
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        if mask is None:
            w = np.ones(env.box.bond_shape(k))
        else:
            w = (env.conductances[k] > 0) & mask[lo] & mask[hi]
        g = w * np.abs(u[hi] - u[lo])
        out[lo] += g
        out[hi] += g
    return out


def gradient_profile(snapshot: KernelSnapshot, env: Environment, center, radii: Sequence[float]) -> np.ndarray:
    """Normalized ``L^2`` norm of ``|grad p|`` over ``cluster ∩ B_r(center)``."""
    grad = gradient_norm(env, snapshot.values, snapshot.mask)
    d2 = snapshot.box.distance2_from(center)
    out = []
    for r in radii:
        sel = snapshot.mask & (d2 < float(r) ** 2)
        out.append(float(np.sqrt(np.mean(grad[sel] ** 2))) if sel.any() else 0.0)
    return np.array(out)


def gaussian_outside_mass(box: LatticeBox, sigma2: float, t: float, y) -> float:
    """Upper bound on the Gaussian mass outside the box (union over axes)."""
    s = np.sqrt(2.0 * sigma2 * t)
    tail = 0.0
    for lo, hi, c in zip(box.origin, box.hi, y):
        tail += 0.5 * erfc((hi + 0.5 - c) / s) + 0.5 * erfc((c - lo + 0.5) / s)
    return float(tail)


def gaussian_mass(
    labeling: ClusterLabeling,
    sigma2: float,
    t: float,
    y,
    theta: float,
    check_padding: bool = True,
    padding_tol: float = 1e-12,
) -> float:
    """``sum_{x in proxy} p_bar(t, x - y) - theta``.

    Raises
    ------
    EvolutionError
        If ``check_padding`` and the Gaussian mass outside the box exceeds
        ``padding_tol``.
    """
    box = labeling.box
    if check_padding:
        out = gaussian_outside_mass(box, sigma2, t, y)
        if out > padding_tol:
            raise EvolutionError(f"box too small: Gaussian mass {out:.2e} outside the box")
    pb = homogenized_kernel_field(box, sigma2, t, y)
    return float(pb[labeling.proxy].sum() - theta)


@dataclass
class WalkSample:
    """Endpoints of independent random walks.

    Attributes
    ----------
    walk_type : str
    y : tuple
    horizon : float
        Time horizon (number of steps for SRW).
    endpoints : ndarray of int64, shape (n_replicas, d)
    seed : int
    """

    walk_type: str
    y: tuple
    horizon: float
    endpoints: np.ndarray = field(repr=False)
    seed: int = 0

    def histogram(self, box: LatticeBox) -> np.ndarray:
        """Empirical distribution of endpoints on the box."""
        idx = np.ravel_multi_index(tuple((self.endpoints - np.array(box.origin)).T), box.sides)
        return np.bincount(idx, minlength=box.n_vertices).reshape(box.sides) / len(self.endpoints)


def _walk_kernel():
    import numba

    @numba.njit(cache=True)
    def mix(z):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    @numba.njit(cache=True)
    def run(indptr, indices, weights, degree, start, horizon, kind, n, seed):
        out = np.empty(n, dtype=np.int64)
        golden = np.uint64(0x9E3779B97F4A7C15)
        scale = 1.0 / 9007199254740992.0
        for rep in range(n):
            state = mix(np.uint64(seed) ^ mix(np.uint64(rep) * golden + np.uint64(1)))
            x = start
            t = 0.0
            steps = 0
            while True:
                deg = degree[x]
                if kind == 2:
                    if steps >= horizon or deg == 0.0:
                        break
                    steps += 1
                else:
                    rate = deg if kind == 0 else 1.0
                    if deg == 0.0:
                        break
                    state += golden
                    u = (mix(state) >> np.uint64(11)) * scale
                    t += -np.log(1.0 - u) / rate
                    if t > horizon:
                        break
                state += golden
                u = (mix(state) >> np.uint64(11)) * scale * deg
                acc = 0.0
                j = indptr[x]
                end = indptr[x + 1] - 1
                while j < end:
                    acc += weights[j]
                    if u < acc:
                        break
                    j += 1
                x = indices[j]
            out[rep] = x
        return out

    return run


_WALK_RUN = None


def sample_walks(
    env: Environment,
    labeling: Optional[ClusterLabeling],
    y,
    t_or_steps: float,
    walk_type: str = "VSRW",
    n_replicas: int = 1000,
    seed: int = 0,
) -> WalkSample:
    """Endpoints of random walks on the proxy cluster started at ``y``.

    VSRW jumps across a bond at rate ``a(e)``; CSRW waits an Exp(1) time
    and then jumps to a neighbor with probability ``a(x,z) / sum_z a(x,z)``;
    SRW takes ``int(t_or_steps)`` discrete steps with that law. Replica
    ``i`` draws from a counter-based stream keyed by ``(seed, i)``.
    """
    global _WALK_RUN
    if walk_type not in WALK_TYPES:
        raise ParameterError(f"unknown walk type {walk_type!r}")
    if labeling is None:
        labeling = label_clusters(env)
    g = DomainGraph(env, labeling.proxy)
    y = tuple(int(v) for v in y)
    if not env.box.contains(y) or not labeling.proxy[env.box.local(y)]:
        raise GeometryError(f"start {y} is not on the proxy cluster")
    start = int(g.positions()[env.box.local(y)])
    if t_or_steps <= 0:
        ends = np.full(n_replicas, start, dtype=np.int64)
    else:
        if _WALK_RUN is None:
            _WALK_RUN = _walk_kernel()
        W = g.W.tocsr()
        W.sort_indices()
        kind = WALK_TYPES.index(walk_type)
        horizon = float(int(t_or_steps)) if kind == 2 else float(t_or_steps)
        ends = _WALK_RUN(
            W.indptr.astype(np.int64),
            W.indices.astype(np.int64),
            W.data.astype(np.float64),
            g.degree.astype(np.float64),
            start,
            horizon,
            kind,
            int(n_replicas),
            np.uint64(seed & ((1 << 64) - 1)),
        )
    coords = np.array(np.unravel_index(g.verts[ends], env.box.sides)).T + np.array(env.box.origin)
    return WalkSample(walk_type, y, float(t_or_steps), coords.astype(np.int64), seed)


def caccioppoli_constant(
    env: Environment,
    labeling: ClusterLabeling,
    y,
    R: int,
    n_times: int = 9,
    evolver: Optional[HeatEvolver] = None,
) -> float:
    """Fitted constant in the parabolic Caccioppoli inequality for the heat kernel.

    With ``u = p(., ., y)``, final time ``T = 2 R^2``, the large cylinder
    ``Q = (T - R^2, T] x (cluster in B_R(y))`` and the small one
    ``Q' = (T - R^2/4, T] x (cluster in B_{R/2}(y))``, returns

        R * ||grad u||_{Q'} / ||u - mean_Q u||_Q

    where both norms are root mean squares over ``n_times`` equispaced time
    samples and the cluster vertices of the cylinder.
    """
    ev = evolver or HeatEvolver(env, labeling)
    T = 2.0 * R * R
    tl = np.linspace(T - R * R, T, n_times)
    ts = np.linspace(T - R * R / 4.0, T, n_times)
    times = np.unique(np.concatenate([tl, ts]))
    snaps = {s.t: s for s in ev.snapshots(y, times)}
    d2 = env.box.distance2_from(y)
    big = ev.mask & (d2 < R * R)
    small = ev.mask & (d2 < R * R / 4.0)
    U = np.array([snaps[float(t)].values[big] for t in tl])
    dev = float(np.sqrt(np.mean((U - U.mean()) ** 2)))
    G = np.array([gradient_norm(env, snaps[float(t)].values, ev.mask)[small] for t in ts])
    grad = float(np.sqrt(np.mean(G**2)))
    return float(R * grad / dev) if dev > 0 else float("inf")
