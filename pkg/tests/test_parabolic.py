import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perchom.cluster import label_clusters
from perchom.elliptic import nearest_vertex
from perchom.env import Environment, LatticeBox, generate_environment
from perchom.errors import EvolutionError, GeometryError, ParameterError
from perchom.oracles import lattice_heat_kernel, scaled_bessel_i, two_vertex_return
from perchom.parabolic import (
    HeatEvolver,
    KernelSnapshot,
    caccioppoli_constant,
    check_kernel_bounds,
    envelope,
    envelope_psi,
    evolve_kernel,
    gaussian_mass,
    gradient_profile,
    homogenized_kernel,
    sample_walks,
)

from conftest import unit_env

C_GRID = np.geomspace(0.25, 256, 41)


def _two_vertex_env(a=0.7):
    box = LatticeBox((0, 0), (2, 2))
    c0 = np.zeros(box.bond_shape(0))
    c0[0, 0] = a
    return Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])


# ---------------------------------------------------------------- oracle sanity


def test_bessel_series_against_recurrence():
    # I_{n-1}(z) - I_{n+1}(z) = (2n/z) I_n(z)
    for z in (0.5, 3.0, 12.0):
        for n in (1, 4, 9):
            lhs = scaled_bessel_i(n - 1, z) - scaled_bessel_i(n + 1, z)
            assert lhs == pytest.approx(2 * n / z * scaled_bessel_i(n, z), rel=1e-12)


def test_bessel_kernel_sums_to_one():
    t = 2.0
    total = sum(lattice_heat_kernel(t, (i, j)) for i in range(-30, 31) for j in range(-30, 31))
    assert total == pytest.approx(1.0, abs=1e-14)


# ---------------------------------------------------------------- evolution


def test_time_zero_is_delta():
    env = generate_environment(LatticeBox.centered(9), 0.8, seed=2)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    s = evolve_kernel(env, lab, y, 0.0)
    assert s(y) == 1.0 and s.values.sum() == 1.0


@pytest.mark.parametrize("method", ["uniformization", "rk-integrator"])
def test_two_vertex_kernel(method):
    env = _two_vertex_env(0.7)
    for t in (0.1, 1.0, 3.0):
        s = evolve_kernel(env, None, (0, 0), t, method)
        assert s((0, 0)) == pytest.approx(two_vertex_return(0.7, t), abs=1e-9)


def test_off_domain_base_point():
    env = _two_vertex_env()
    with pytest.raises(GeometryError):
        evolve_kernel(env, None, (1, 1), 1.0)


def test_negative_time_rejected():
    with pytest.raises(ParameterError):
        evolve_kernel(unit_env(5), None, (0, 0), [1.0, 0.5])


def test_huge_time_rejected():
    with pytest.raises(EvolutionError):
        evolve_kernel(unit_env(5), None, (0, 0), 1e9)


def test_bessel_small():
    env = unit_env(41)
    for s in evolve_kernel(env, None, (0, 0), [0.5, 1.0, 2.0, 5.0]):
        for x in [(0, 0), (1, 0), (3, -2), (8, 8)]:
            assert abs(s(x) - lattice_heat_kernel(s.t, x)) <= 1e-8


@pytest.fixture(scope="module")
def env64():
    env = generate_environment(LatticeBox.centered(64), 0.7, seed=3)
    return env, label_clusters(env)


def test_mass_positivity(env64):
    env, lab = env64
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    for s in evolve_kernel(env, lab, y, [1.0, 10.0, 100.0]):
        assert abs(s.mass() - 1.0) <= 1e-12
        assert s.values.min() >= 0.0


def test_symmetry(env64):
    env, lab = env64
    rng = np.random.default_rng(0)
    pts = np.argwhere(lab.proxy)
    ev = HeatEvolver(env, lab)
    for _ in range(20):
        a, b = (tuple(int(v) + o for v, o in zip(pts[i], env.box.origin)) for i in rng.integers(len(pts), size=2))
        pa = ev.snapshots(a, [7.0])[0]
        pb = ev.snapshots(b, [7.0])[0]
        assert abs(pa(b) - pb(a)) <= 1e-10


def test_semigroup(env64):
    env, lab = env64
    ev = HeatEvolver(env, lab)
    pts = np.argwhere(lab.proxy)
    rng = np.random.default_rng(1)
    for _ in range(3):
        x, y = (tuple(int(v) + o for v, o in zip(pts[i], env.box.origin)) for i in rng.integers(len(pts), size=2))
        px = ev.snapshots(x, [3.0])[0]
        py = ev.snapshots(y, [5.0])[0]
        lhs = float(np.sum(px.values * py.values))
        assert lhs == pytest.approx(ev.snapshots(y, [8.0])[0](x), abs=1e-9)


def test_uniformization_matches_rk(env64):
    env, lab = env64
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    u = evolve_kernel(env, lab, y, 20.0)
    r = evolve_kernel(env, lab, y, 20.0, "rk-integrator", tol=1e-12)
    assert np.max(np.abs(u.values - r.values)) < 1e-8


def test_chaining_equals_direct(env64):
    env, lab = env64
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    chained = evolve_kernel(env, lab, y, [5.0, 12.0, 30.0])[-1]
    direct = evolve_kernel(env, lab, y, 30.0)
    assert np.max(np.abs(chained.values - direct.values)) < 1e-12


# ---------------------------------------------------------------- homogenized kernel and envelopes


def test_homogenized_kernel_value():
    assert homogenized_kernel(2.0, 1.0, (0.0, 0.0)) == pytest.approx(1 / (4 * np.pi))


def test_homogenized_kernel_normalized():
    h = 0.05
    xs = np.arange(-12, 12, h) + h / 2
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = homogenized_kernel(0.7, 1.3, np.stack([X, Y], -1))
    assert vals.sum() * h * h == pytest.approx(1.0, abs=1e-6)


@given(st.floats(0.1, 50), st.floats(-20, 20), st.floats(-20, 20))
def test_homogenized_kernel_scaling(t, a, b):
    x = np.array([a, b])
    lhs = homogenized_kernel(0.9, t, x)
    rhs = t ** (-1.0) * homogenized_kernel(0.9, 1.0, x / math.sqrt(t))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-300)


def test_homogenized_kernel_domain():
    with pytest.raises(ParameterError):
        homogenized_kernel(2.0, 0.0, (0, 0))


def test_envelope_origin():
    phi, psi = envelope(3.0, 4.0, (0.0, 0.0), 2)
    assert phi == pytest.approx(3.0 / 4.0)
    assert psi == pytest.approx(-math.log(0.75))


@given(st.floats(0.5, 20), st.floats(0.5, 100))
def test_envelope_branch_continuity(C, t):
    below = envelope_psi(C, t, t * (1 - 1e-12), 2)
    at = envelope_psi(C, t, t, 2)
    assert below == pytest.approx(at, rel=1e-9)
    assert at == pytest.approx(-math.log(C * t ** -1.0 * math.exp(-t / C)), rel=1e-12)


@given(st.floats(0.5, 20), st.floats(0.5, 100))
def test_envelope_monotone_convex(C, t):
    r = np.linspace(0, 4 * t, 400)
    psi = envelope_psi(C, t, r, 2)
    assert np.all(np.diff(psi) >= -1e-12)
    assert np.all(np.diff(psi, 2) >= -1e-9)


def test_envelope_semigroup_bound():
    d, C, t1, t2 = 2, 2.0, 3.0, 5.0
    n = 60
    ax = np.arange(-n, n + 1)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack([X, Y], -1).astype(float)
    a = envelope(C, t1, pts, d)[0]
    b = envelope(C, t2, pts, d)[0]
    from scipy.signal import fftconvolve

    conv = fftconvolve(a, b, mode="same")
    inner = (np.abs(X) <= 20) & (np.abs(Y) <= 20)
    fitted = None
    for Cp in np.geomspace(C, 1024, 121):
        if np.all(conv[inner] <= envelope(Cp, t1 + t2, pts, d)[0][inner]):
            fitted = Cp
            break
    assert fitted is not None and fitted > C


# ---------------------------------------------------------------- bound checks


def test_kernel_bounds_unit_t5():
    env = unit_env(61)
    s = evolve_kernel(env, None, (0, 0), 5.0)
    rep = check_kernel_bounds(s, C_GRID)
    assert rep.barlow_C is not None and rep.barlow_C <= 10
    assert rep.cv_C is not None


def test_kernel_bounds_small_time():
    env = unit_env(11)
    t = 1e-3
    s = evolve_kernel(env, None, (0, 0), t)
    # near branch at x = y with C = 1
    assert s((0, 0)) <= envelope(1.0, t, (0.0, 0.0), 2)[0]
    assert check_kernel_bounds(s, [1.0, 2.0, 4.0]).cv_C is not None


def test_kernel_bounds_refinement_monotone():
    env = generate_environment(LatticeBox.centered(41), 0.7, seed=1)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    s = evolve_kernel(env, lab, y, 30.0)
    coarse = check_kernel_bounds(s, C_GRID[::4])
    fine = check_kernel_bounds(s, C_GRID)
    assert fine.barlow_C <= coarse.barlow_C and fine.cv_C <= coarse.cv_C


def test_kernel_bounds_violations_listed():
    env = unit_env(21)
    s = evolve_kernel(env, None, (0, 0), 5.0)
    rep = check_kernel_bounds(s, [1e-3])
    assert rep.barlow_C is None and rep.barlow_violations


# ---------------------------------------------------------------- gradient, Gaussian mass, walks


def test_gradient_profile_constant_zero():
    env = unit_env(11)
    snap = KernelSnapshot(1.0, (0, 0), np.full(env.box.sides, 0.3), np.ones(env.box.sides, bool), env.box)
    np.testing.assert_array_equal(gradient_profile(snap, env, (0, 0), [2, 4]), [0.0, 0.0])


def test_gradient_profile_spatial_shape():
    # |grad| of exp(-r^2/4t) is r/(2t) exp(-r^2/4t): zero at the peak, maximal
    # near r = sqrt(2t), so the ball at 2 sqrt(t) carries more gradient than
    # the ball at y and the ball at 4 sqrt(t) carries less
    env = unit_env(121)
    t = 100.0
    s = evolve_kernel(env, None, (0, 0), t)
    r = [0.5 * math.sqrt(t)]
    g0 = gradient_profile(s, env, (0, 0), r)[0]
    g2 = gradient_profile(s, env, (int(2 * math.sqrt(t)), 0), r)[0]
    g4 = gradient_profile(s, env, (int(4 * math.sqrt(t)), 0), r)[0]
    assert g2 > g0 > g4


def test_gradient_profile_time_scaling():
    env = unit_env(161)
    s1, s2 = evolve_kernel(env, None, (0, 0), [100.0, 400.0])
    # balls of radius sqrt(t)/2 scale like t^(-d/2-1/2)
    ratio = gradient_profile(s2, env, (0, 0), [10.0])[0] / gradient_profile(s1, env, (0, 0), [5.0])[0]
    assert ratio == pytest.approx(4.0 ** -1.5, rel=0.25)
    # at a fixed radius the vanishing gradient at the peak gives t^-2 instead
    fixed = gradient_profile(s2, env, (0, 0), [5.0])[0] / gradient_profile(s1, env, (0, 0), [5.0])[0]
    assert fixed == pytest.approx(4.0 ** -2, rel=0.1)


def test_gaussian_mass_unit():
    env = unit_env(121)
    res = gaussian_mass(label_clusters(env), 2.0, 25.0, (0, 0), 1.0)
    assert abs(res) <= 1e-3


def test_gaussian_mass_escapes_finite_box():
    env = unit_env(11)
    res = gaussian_mass(label_clusters(env), 2.0, 1e6, (0, 0), 1.0, check_padding=False)
    assert res == pytest.approx(-1.0, abs=1e-3)


def test_gaussian_mass_padding_check():
    env = unit_env(11)
    with pytest.raises(EvolutionError):
        gaussian_mass(label_clusters(env), 2.0, 50.0, (0, 0), 1.0)


def test_walks_time_zero():
    env = generate_environment(LatticeBox.centered(9), 0.8, seed=1)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    for kind in ("VSRW", "CSRW", "SRW"):
        ws = sample_walks(env, lab, y, 0, kind, 50, 3)
        assert np.all(ws.endpoints == np.array(y))


def test_walks_reproducible_and_on_cluster():
    env = generate_environment(LatticeBox.centered(21), 0.7, seed=1)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    a = sample_walks(env, lab, y, 10.0, "CSRW", 200, 9)
    b = sample_walks(env, lab, y, 10.0, "CSRW", 200, 9)
    np.testing.assert_array_equal(a.endpoints, b.endpoints)
    assert all(lab.proxy[env.box.local(tuple(e))] for e in a.endpoints)


def test_srw_parity():
    env = generate_environment(LatticeBox.centered(21), 0.7, seed=1)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    ws = sample_walks(env, lab, y, 7, "SRW", 300, 2)
    assert np.all(np.sum(ws.endpoints - np.array(y), axis=1) % 2 == 1)


def test_two_vertex_walks():
    env = _two_vertex_env(0.7)
    t, n = 0.8, 100_000
    ws = sample_walks(env, None, (0, 0), t, "VSRW", n, 5)
    frac = float(np.mean(np.all(ws.endpoints == 0, axis=1)))
    p = two_vertex_return(0.7, t)
    assert abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_walk_histogram_matches_kernel():
    env = generate_environment(LatticeBox.centered(181), 0.6, seed=0)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    t, n = 500.0, 1_000_000
    ws = sample_walks(env, lab, y, t, "VSRW", n, 1)
    k = evolve_kernel(env, lab, y, t).values
    tv = 0.5 * float(np.abs(ws.histogram(env.box) - k).sum())
    # E|p_hat - p| <= sqrt(p (1 - p) / n) per vertex
    bound = 0.5 * float(np.sum(np.sqrt(k * (1 - k) / n)))
    assert tv <= 4 * bound


def test_caccioppoli_stable_over_scales():
    env = generate_environment(LatticeBox.centered(201), 0.7, seed=4)
    lab = label_clusters(env)
    y = nearest_vertex(lab.proxy, env.box, (0, 0))
    ev = HeatEvolver(env, lab)
    c16 = caccioppoli_constant(env, lab, y, 16, evolver=ev)
    c32 = caccioppoli_constant(env, lab, y, 32, evolver=ev)
    assert 0.5 <= c32 / c16 <= 2.0
