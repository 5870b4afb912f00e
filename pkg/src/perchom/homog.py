"""Two-scale expansion, local CLT errors, rate fits and Green's functions.

Conventions: ``sigma2`` is the homogenized diffusivity, so the homogenized
kernel is ``(2 pi sigma2 t)^{-d/2} exp(-|x|^2 / (2 sigma2 t))``; ``theta`` is
the cluster density used to renormalize it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import identity
from scipy.special import exp1, gamma, gammainc

from .cluster import ClusterLabeling, label_clusters
from .elliptic import CorrectorField, SPDSolver
from .env import Environment, LatticeBox
from .errors import FitError, ParameterError, QuadratureError, ShapeError
from .graph import DomainGraph
from .parabolic import (
    HeatEvolver,
    KernelSnapshot,
    check_kernel_bounds,
    envelope_psi,
    homogenized_kernel_field,
)

__all__ = [
    "two_scale_h",
    "TwoScaleBundle",
    "evolve_qvw",
    "weighted_l2",
    "LCLTError",
    "lclt_error",
    "RateFit",
    "fit_rate",
    "KappaSchedule",
    "kappa_schedule",
    "homogenized_green",
    "GreenReport",
    "green_function",
    "DirichletResult",
    "dirichlet_homogenization_experiment",
]


def _corrector_arrays(chis, box: Optional[LatticeBox]):
    if not chis:
        raise ParameterError("no corrector fields given")
    arrays = []
    for c in chis:
        if isinstance(c, CorrectorField):
            box = box or c.env.box
            arrays.append(np.asarray(c.values, dtype=float))
        else:
            arrays.append(np.asarray(c, dtype=float))
    if box is None:
        raise ParameterError("a box is needed when correctors are plain arrays")
    if len(arrays) != box.d:
        raise ParameterError(f"need {box.d} corrector directions, got {len(arrays)}")
    for a in arrays:
        if a.shape != box.sides:
            raise ShapeError(f"corrector shape {a.shape} != box shape {box.sides}")
    return arrays, box


def two_scale_h(chis, sigma2: float, theta: float, t: float, y, box: Optional[LatticeBox] = None, mask=None):
    """Two-scale expansion of the heat kernel at time ``t``.

    ``h(x) = (p_bar(t, x - y) + sum_k D_k p_bar(t, x - y) chi_k(x)) / theta``
    where ``D_k f(x) = f(x + e_k) - f(x)`` is taken on the smooth kernel.

    Parameters
    ----------
    chis : sequence of CorrectorField or ndarray
        One corrector per coordinate direction, in order.
    box : LatticeBox, optional
        Required when ``chis`` are arrays.
    mask : ndarray of bool, optional
        Vertices to keep; ``h`` is zero elsewhere.
    """
    arrays, box = _corrector_arrays(chis, box)
    if theta <= 0 or sigma2 <= 0 or t <= 0:
        raise ParameterError("two-scale expansion needs theta, sigma2, t > 0")
    pb = homogenized_kernel_field(box, sigma2, t, y)
    h = pb.copy()
    for k, chi in enumerate(arrays):
        shifted = tuple(c - (1 if j == k else 0) for j, c in enumerate(y))
        # p_bar(t, x + e_k - y) is the kernel centered at y - e_k
        h += (homogenized_kernel_field(box, sigma2, t, shifted) - pb) * chi
    h /= theta
    if mask is not None:
        h = np.where(mask, h, 0.0)
    return h


def weighted_l2(f: np.ndarray, mask: np.ndarray, box: LatticeBox, t: float, y, C: float) -> float:
    """``|| f exp(Psi_C(t, . - y)) ||_{L^2}`` over ``mask`` (plain sum, not averaged)."""
    sel = mask & (f != 0)
    if not sel.any():
        return 0.0
    r = np.sqrt(box.distance2_from(y)[sel])
    logs = np.log(np.abs(f[sel])) + envelope_psi(C, t, r, box.d, "barlow")
    top = float(logs.max())
    return float(math.exp(top) * math.sqrt(float(np.sum(np.exp(2.0 * (logs - top))))))


def _default_weight_constant(snapshot: KernelSnapshot) -> float:
    grid = list(np.geomspace(0.25, 256.0, 41))
    rep = check_kernel_bounds(snapshot, grid)
    c = rep.barlow_C if rep.barlow_C is not None else grid[-1]
    return 4.0 * float(c)


@dataclass(eq=False)
class TwoScaleBundle:
    """Fields of the two-scale decomposition at time ``t``.

    Attributes
    ----------
    y : tuple
    t, tau, kappa : float
        ``tau = t^(1 - kappa)`` is the start time of ``q`` and ``v``.
    h, q, v, w : ndarray
        Full-box arrays, zero off ``mask``; ``w = h - v - q``.
    mask : ndarray of bool
    box : LatticeBox
    """

    y: tuple
    t: float
    tau: float
    kappa: float
    h: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    box: LatticeBox = field(repr=False)
    meta: dict = field(default_factory=dict)

    def weighted_norm(self, C: float) -> float:
        """``|| w exp(Psi_C) ||_{L^2}`` at time ``t``."""
        return weighted_l2(self.w, self.mask, self.box, self.t, self.y, C)


def evolve_qvw(
    env: Environment,
    labeling: Optional[ClusterLabeling],
    sigma2: float,
    theta: float,
    chis,
    y,
    t: float,
    kappa: float,
    tol: float = 1e-12,
    evolver: Optional[HeatEvolver] = None,
    strict: bool = True,
) -> TwoScaleBundle:
    """Evolve ``q`` and ``v`` from ``tau = t^(1-kappa)`` to ``t`` and form ``w``.

    ``q(tau) = p_bar(tau, . - y) / theta`` and ``v(tau) = h(tau) - q(tau)``
    on the proxy; both follow the cluster heat equation, and
    ``w(t) = h(t) - v(t) - q(t)``.

    ``t >= 3 tau`` means ``t >= 3^(1/kappa)``, out of reach for small
    ``kappa`` at lattice sizes that fit in memory; ``strict=False`` skips
    that check and records ``regime_ok`` in ``meta``.

    Raises
    ------
    ParameterError
        If ``kappa`` is outside ``(0, 1)``, or ``strict`` and ``t < 3 tau``.
    """
    if not 0 < kappa < 1:
        raise ParameterError("kappa must lie in (0, 1)")
    tau = float(t) ** (1.0 - kappa)
    if strict and t < 3 * tau:
        raise ParameterError(f"need t >= 3 tau (t={t}, tau={tau:.4g})")
    if labeling is None:
        labeling = label_clusters(env)
    ev = evolver or HeatEvolver(env, labeling)
    mask = ev.mask
    box = env.box
    y = tuple(int(c) for c in y)
    q0 = np.where(mask, homogenized_kernel_field(box, sigma2, tau, y) / theta, 0.0)
    h0 = two_scale_h(chis, sigma2, theta, tau, y, box, mask)
    v0 = h0 - q0
    g = ev.graph
    qt, iq = ev.propagate(g.local(q0), t - tau, tol)
    vt, iv = ev.propagate(g.local(v0), t - tau, tol)
    q = g.field(qt)
    v = g.field(vt)
    h = two_scale_h(chis, sigma2, theta, t, y, box, mask)
    w = np.where(mask, h - v - q, 0.0)
    meta = {
        "terms": iq["terms"] + iv["terms"],
        "dropped": max(iq["dropped"], iv["dropped"]),
        "regime_ok": bool(t >= 3 * tau),
    }
    return TwoScaleBundle(y, float(t), tau, float(kappa), h, q, v, w, mask, box, meta)


@dataclass(frozen=True)
class LCLTError:
    """Local CLT error of one kernel snapshot.

    Attributes
    ----------
    t : float
    sup_error : float
        ``t^{d/2} max |p - p_bar / theta|`` over cluster vertices with
        ``|x - y| <= window * sqrt(t)``.
    sup_weighted : float
        ``t^{d/2} max |p - p_bar / theta| exp(|x - y|^2 / (C0 t))`` over the
        whole cluster.
    weighted_l2 : float
        ``|| (p - p_bar / theta) exp(Psi_C) ||_{L^2}`` over the cluster.
    relative : float
        ``sup_error / (t^{d/2} max p)`` over the same window.
    C, C0, window : float
    """

    t: float
    sup_error: float
    sup_weighted: float
    weighted_l2: float
    relative: float
    C: float
    C0: float
    window: float


def lclt_error(
    snapshot: KernelSnapshot,
    sigma2: float,
    theta: float,
    C: Optional[float] = None,
    C0: Optional[float] = None,
    window: float = 3.0,
) -> LCLTError:
    """Compare a kernel snapshot with the renormalized homogenized kernel.

    Parameters
    ----------
    snapshot : KernelSnapshot
    sigma2, theta : float
    C : float, optional
        Constant of the weight ``exp(Psi_C)``; default is four times the
        smallest grid constant for which the Gaussian upper bound holds for
        this snapshot.
    C0 : float, optional
        Constant of the Gaussian weight in ``sup_weighted``; default
        ``8 * sigma2``.
    window : float
        The plain sup runs over ``|x - y| <= window * sqrt(t)``.
    """
    t = float(snapshot.t)
    if t <= 0:
        raise ParameterError("LCLT error needs t > 0")
    box = snapshot.box
    d = box.d
    mask = snapshot.mask
    diff = np.where(mask, snapshot.values - homogenized_kernel_field(box, sigma2, t, snapshot.y) / theta, 0.0)
    d2 = box.distance2_from(snapshot.y)
    scale = t ** (d / 2)
    near = mask & (d2 <= window * window * t)
    sup = scale * float(np.abs(diff[near]).max()) if near.any() else 0.0
    peak = scale * float(snapshot.values[near].max()) if near.any() else 0.0
    C0 = 8.0 * sigma2 if C0 is None else float(C0)
    with np.errstate(over="ignore"):
        sw = scale * float((np.abs(diff) * np.exp(d2 / (C0 * t)))[mask].max()) if mask.any() else 0.0
    if C is None:
        C = _default_weight_constant(snapshot)
    wl2 = weighted_l2(diff, mask, box, t, snapshot.y, C)
    return LCLTError(t, sup, sw, wl2, sup / peak if peak > 0 else 0.0, float(C), C0, float(window))


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of ``ln e = slope * ln t + intercept``."""

    t: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    residual: float

    def predict(self, t) -> np.ndarray:
        return np.exp(self.intercept) * np.asarray(t, dtype=float) ** self.slope


def fit_rate(errors) -> RateFit:
    """Fit a power law to ``(t, error)`` pairs.

    Raises
    ------
    FitError
        Fewer than 3 points, ``t`` not strictly increasing, or a
        nonpositive value.

    Examples
    --------
    >>> round(fit_rate([(1, 3.0), (4, 1.5), (16, 0.75)]).slope, 12)
    -0.5
    """
    pts = [(float(a), float(b)) for a, b in errors]
    if len(pts) < 3:
        raise FitError("a rate fit needs at least 3 points")
    t = np.array([a for a, _ in pts])
    e = np.array([b for _, b in pts])
    if np.any(np.diff(t) <= 0):
        raise FitError("times must be strictly increasing")
    if np.any(t <= 0) or np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise FitError("times and errors must be positive and finite")
    X = np.column_stack([np.log(t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(X, np.log(e), rcond=None)
    res = float(np.sqrt(np.mean((X @ coef - np.log(e)) ** 2)))
    return RateFit(t, e, float(coef[0]), float(coef[1]), res)


@dataclass(frozen=True)
class KappaSchedule:
    """Exponents of the iteration: ``alpha``, ``kappa``, the ``kappa_n`` and ``N``."""

    alpha: float
    kappa: float
    kappas: tuple
    N: int


def kappa_schedule(delta: float, d: int) -> KappaSchedule:
    """``alpha = delta/2``, ``kappa = delta/(d+2)`` and the capped recursion.

    ``kappa_0 = kappa/2`` and ``kappa_{n+1} = min((1-kappa) kappa_n + kappa/2, 1/2 - delta)``;
    ``N`` is the first index where the cap is reached. For ``delta`` so
    close to 1/2 that ``kappa/2`` already exceeds the cap, ``kappa_1`` is the
    cap and the sequence decreases once (``N = 1``).

    Examples
    --------
    >>> s = kappa_schedule(0.4, 2)
    >>> s.N, [round(k, 12) for k in s.kappas]
    (2, [0.05, 0.095, 0.1])
    """
    if not 0 < delta < 0.5:
        raise ParameterError("delta must lie in (0, 1/2)")
    if d < 1:
        raise ParameterError("d must be positive")
    kappa = delta / (d + 2)
    cap = 0.5 - delta
    seq = [kappa / 2]
    while seq[-1] != cap:
        if len(seq) > 1_000_000:
            raise ParameterError(f"delta={delta} gives more than 10^6 steps")
        seq.append(min((1 - kappa) * seq[-1] + kappa / 2, cap))
    return KappaSchedule(delta / 2, kappa, tuple(seq), len(seq) - 1)


def homogenized_green(x, sigma2: float, theta: float, d: int) -> np.ndarray:
    """Homogenized Green's function ``g_bar`` at displacements ``|x| > 0``.

    ``d = 2``: ``-ln|x| / (pi sigma2 theta)``; ``d >= 3``:
    ``Gamma(d/2 - 1) / (2 pi^{d/2} sigma2 theta) |x|^{2-d}``.

    Examples
    --------
    >>> float(homogenized_green(1.0, 2.0, 1.0, 3)) * 4 * np.pi
    1.0
    """
    r = np.asarray(x, dtype=float)
    if r.ndim and r.shape[-1] == d and d > 1 and r.ndim > 1:
        r = np.linalg.norm(r, axis=-1)
    r = np.abs(r)
    with np.errstate(divide="ignore"):
        if d == 2:
            return -np.log(r) / (math.pi * sigma2 * theta)
        if d >= 3:
            return gamma(d / 2 - 1) / (2 * math.pi ** (d / 2) * sigma2 * theta) * r ** (2.0 - d)
    raise ParameterError("Green's function needs d >= 2")


def _green_tail(r2: np.ndarray, T: float, sigma2: float, theta: float, d: int) -> np.ndarray:
    """Integral over ``[T, inf)`` of the homogenized integrand."""
    a = r2 / (2.0 * sigma2)
    z = a / T
    if d == 2:
        # int_T^inf (e^{-a/t} - 1) dt / t = -Ein(a/T)
        with np.errstate(divide="ignore", invalid="ignore"):
            ein = np.where(z > 0, exp1(np.where(z > 0, z, 1.0)) + np.log(np.where(z > 0, z, 1.0)) + np.euler_gamma, 0.0)
        return -ein / (2 * math.pi * sigma2 * theta)
    # int_T^inf t^{-d/2} e^{-a/t} dt = a^{1-d/2} gamma_lower(d/2 - 1, a/T)
    pref = (2 * math.pi * sigma2) ** (-d / 2) / theta
    s = d / 2 - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(a > 0, np.where(a > 0, a, 1.0) ** (-s) * gamma(s) * gammainc(s, z), T ** (-s) / s)
    return pref * val


@dataclass(eq=False)
class GreenReport:
    """Green's function of the cluster walk from a base point.

    Attributes
    ----------
    d : int
    y : tuple
    g : ndarray
        ``g(x, y)`` on the cluster (full-box array, zero elsewhere).
    g_bar : ndarray
        ``g_bar(x - y)``; ``nan`` at ``x = y``.
    mask : ndarray of bool
    tail : ndarray
        Homogenized tail added beyond ``T_max``.
    K, K_spread : float or None
        ``d = 2`` only: median and max-minus-min of ``g - g_bar`` over the
        annulus.
    annulus : tuple
    T_max : float
    quadrature : str
    times : ndarray
        Quadrature nodes.
    """

    d: int
    y: tuple
    g: np.ndarray = field(repr=False)
    g_bar: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    tail: np.ndarray = field(repr=False)
    K: Optional[float]
    K_spread: Optional[float]
    annulus: tuple
    T_max: float
    quadrature: str
    times: np.ndarray = field(repr=False)
    box: LatticeBox = field(repr=False)

    def K_over(self, r_min: float, r_max: float):
        """Median and spread of ``g - g_bar`` over another annulus (d=2)."""
        sel = self._annulus(r_min, r_max)
        diff = (self.g - self.g_bar)[sel]
        return float(np.median(diff)), float(diff.max() - diff.min())

    def _annulus(self, r_min, r_max):
        d2 = self.box.distance2_from(self.y)
        sel = self.mask & (d2 >= r_min * r_min) & (d2 <= r_max * r_max)
        if not sel.any():
            raise ParameterError("empty annulus")
        return sel


def green_function(
    env: Environment,
    labeling: Optional[ClusterLabeling],
    y,
    T_max: Optional[float] = None,
    quadrature: str = "trapezoid",
    *,
    sigma2: float,
    theta: float,
    t0: float = 0.25,
    rho: float = 1.25,
    t_min: float = 1e-3,
    annulus: tuple = (20.0, 40.0),
    tail_tol: float = 0.05,
    tol: float = 1e-12,
) -> GreenReport:
    """Green's function by time integration of the heat kernel.

    ``d >= 3``: ``g(x, y) = int_0^inf p(t, x, y) dt``. ``d = 2``: the
    integrand is ``p(t, x, y) - p(t, y, y)`` so ``g(y, y) = 0``. Snapshots
    are taken at ``0`` and on the geometric grid ``t0 * rho^j`` for integer
    ``j`` (negative ones down to ``t_min``, which keeps the first interval
    short), with ``T_max`` as last node; the integral over ``[T_max, inf)``
    is replaced by that of the homogenized integrand.

    Parameters
    ----------
    quadrature : {"trapezoid", "log-trapezoid"}
        Trapezoid rule in ``t``, or in ``ln t`` applied to ``t`` times the
        integrand (the interval from 0 to the first node always uses ``t``).
    sigma2, theta : float
        Homogenized parameters for ``g_bar`` and the tail.
    tail_tol : float
        Largest allowed ``|tail|`` over the cluster part of the annulus
        (``d = 2``) or at the farthest reported vertex (``d >= 3``).

    Raises
    ------
    ParameterError
        ``T_max`` below ten times the box side, or ``d`` not in {2, 3}.
    QuadratureError
        The tail exceeds ``tail_tol``.
    """
    d = env.d
    if d not in (2, 3):
        raise ParameterError("Green's functions are computed for d = 2 and 3")
    side = max(env.box.sides)
    if T_max is None:
        T_max = 10.0 * side
    if T_max < 10 * side:
        raise ParameterError(f"T_max={T_max} is below 10 * box side = {10 * side}")
    if quadrature not in ("trapezoid", "log-trapezoid"):
        raise ParameterError(f"unknown quadrature {quadrature!r}")
    if labeling is None:
        labeling = label_clusters(env)
    ev = HeatEvolver(env, labeling)
    g = ev.graph
    y = tuple(int(c) for c in y)
    v = ev.delta(y)
    iy = int(np.flatnonzero(v)[0])
    j0 = int(math.ceil(math.log(t_min / t0) / math.log(rho)))
    n = int(math.floor(math.log(T_max / t0) / math.log(rho)))
    times = [0.0] + [t0 * rho ** j for j in range(j0, n + 1)]
    if times[-1] < T_max:
        times.append(float(T_max))
    times = np.array(times)

    def integrand(vec):
        return vec - vec[iy] if d == 2 else vec

    acc = np.zeros(g.n)
    f_prev = integrand(v)
    per_step = tol / len(times)
    for a, b in zip(times[:-1], times[1:]):
        v, _ = ev.propagate(v, b - a, per_step)
        f = integrand(v)
        if quadrature == "log-trapezoid" and a > 0:
            h = math.log(b / a)
            acc += 0.5 * h * (a * f_prev + b * f)
        else:
            acc += 0.5 * (b - a) * (f_prev + f)
        f_prev = f
    d2 = env.box.distance2_from(y)
    tail = np.where(ev.mask, _green_tail(d2, float(times[-1]), sigma2, theta, d), 0.0)
    gfield = g.field(acc) + tail
    with np.errstate(divide="ignore"):
        gbar = np.where(d2 > 0, homogenized_green(np.sqrt(d2), sigma2, theta, d), np.nan)
    K = spread = None
    if d == 2:
        sel = ev.mask & (d2 >= annulus[0] ** 2) & (d2 <= annulus[1] ** 2)
        if not sel.any():
            raise ParameterError("annulus does not meet the cluster")
        if float(np.abs(tail[sel]).max()) > tail_tol:
            raise QuadratureError(f"tail {np.abs(tail[sel]).max():.3g} above tolerance {tail_tol}")
        diff = (gfield - gbar)[sel]
        K, spread = float(np.median(diff)), float(diff.max() - diff.min())
    elif float(np.abs(tail[ev.mask]).max()) > tail_tol:
        raise QuadratureError(f"tail {np.abs(tail[ev.mask]).max():.3g} above tolerance {tail_tol}")
    return GreenReport(d, y, gfield, gbar, ev.mask, tail, K, spread, tuple(annulus), float(times[-1]),
                       quadrature, times, env.box)


@dataclass(frozen=True)
class DirichletResult:
    """Cluster versus homogenized parabolic Dirichlet problem on ``I_r x B_r``.

    Attributes
    ----------
    r : float
    error : float
        ``r^-1 ||u - u_bar|| / |grad f|`` with the norm averaged over time
        steps and cluster vertices of the ball.
    n_steps : int
    n_vertices : int
    """

    r: float
    error: float
    n_steps: int
    n_vertices: int


def _implicit_heat(graph: DomainGraph, boundary: np.ndarray, u0: np.ndarray, fb: np.ndarray, dt: float,
                   n_steps: int, method: str) -> list:
    """Backward Euler for ``du/dt = -(D - W) u`` with ``u = fb`` on ``boundary``."""
    lap = graph.laplacian()
    bd = np.flatnonzero(boundary)
    inner = np.flatnonzero(~boundary)
    A = lap[inner][:, inner]
    M = (A * dt + identity(inner.size, format="csr")).tocsr()
    src = dt * (graph.W[inner][:, bd] @ fb[bd])
    solver = SPDSolver(M, method, 1e-12)
    u = u0.copy()
    u[bd] = fb[bd]
    out = []
    for _ in range(n_steps):
        u[inner] = solver.solve(u[inner] + src)
        out.append(u.copy())
    return out


def dirichlet_homogenization_experiment(
    env: Environment,
    r: float,
    f,
    sigma2: float,
    labeling: Optional[ClusterLabeling] = None,
    center=None,
    n_steps: int = 64,
    method: str = "auto",
) -> DirichletResult:
    """Relative error between the cluster and homogenized Cauchy-Dirichlet problems.

    The cluster problem ``du/dt = div a grad u`` runs on the proxy inside the
    open ball ``B_r`` for a time ``r^2``, with ``u = f`` at the initial time
    and on the cluster vertices having a lattice neighbour outside the ball.
    The homogenized problem is the same backward Euler scheme on all lattice
    vertices of the ball with every conductance equal to ``sigma2 / 2``.

    Parameters
    ----------
    f : callable or sequence of float
        Boundary data as a function of coordinates (array ``(..., d)``), or
        the slope vector ``p`` of the affine map ``x -> p . x``.
    sigma2 : float
    n_steps : int
        Backward Euler steps over the time interval ``r^2``.

    Returns
    -------
    DirichletResult
    """
    d = env.d
    box = env.box
    center = (0,) * d if center is None else tuple(center)
    if labeling is None:
        labeling = label_clusters(env)
    ball = box.ball_mask(center, r)
    grow = ball.copy()
    for k in range(d):
        for shift in (1, -1):
            grow &= np.roll(ball, shift, axis=k)
    if (ball & box.boundary_mask()).any():
        raise ParameterError("the ball must stay away from the box boundary")
    rim = ball & ~grow
    coords = box.coords()
    if callable(f):
        fvals = np.asarray(f(coords), dtype=float)
        grad = None
    else:
        slope = np.asarray(f, dtype=float)
        if slope.shape != (d,):
            raise ParameterError(f"affine slope needs {d} entries")
        fvals = (coords - np.array(center)) @ slope
        grad = float(np.linalg.norm(slope))
    if grad is None:
        # |grad f| estimated from lattice differences inside the ball
        g2 = [np.diff(fvals, axis=k) for k in range(d)]
        grad = float(np.sqrt(sum(np.mean(x ** 2) for x in g2)))
    dt = r * r / n_steps
    dom = ball & labeling.proxy
    gc = DomainGraph(env, dom)
    uc = _implicit_heat(gc, gc.local(rim), gc.local(fvals), gc.local(fvals), dt, n_steps, method)
    hom = Environment.from_arrays(box, [np.full(box.bond_shape(k), sigma2 / 2.0) for k in range(d)])
    gh = DomainGraph(hom, ball)
    uh = _implicit_heat(gh, gh.local(rim), gh.local(fvals), gh.local(fvals), dt, n_steps, method)
    pos = gh.positions().ravel()[gc.verts]
    sq = [np.mean((a - b[pos]) ** 2) for a, b in zip(uc, uh)]
    norm = math.sqrt(float(np.mean(sq)))
    error = 0.0 if grad == 0 else norm / (r * grad)
    return DirichletResult(float(r), float(error), n_steps, int(gc.n))
