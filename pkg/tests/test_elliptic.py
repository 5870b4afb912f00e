import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perchom.cluster import label_clusters
from perchom.elliptic import (
    GraphOperator,
    affine,
    apply_operator,
    bond_energy,
    cell_energy,
    corrector_oscillation,
    estimate_homogenized,
    flux_field,
    pcg,
    periodic_cell_tensor,
    poincare_constant,
    solve_corrector,
    solve_dirichlet,
    weak_norm,
)
from perchom.env import Environment, LatticeBox, TriadicCube, generate_environment
from perchom.errors import ShapeError, SolverError
from perchom.graph import DomainGraph
from perchom.oracles import dense_laplacian

from conftest import closed_env, unit_env


def _edges(env, mask):
    """Weighted edge list ``(i, j, a)`` on row-major indices inside ``mask``."""
    box = env.box
    idx = np.arange(box.n_vertices).reshape(box.sides)
    out = []
    for k, c in enumerate(env.conductances):
        for base in np.argwhere(c > 0):
            nb = base.copy()
            nb[k] += 1
            if mask[tuple(base)] and mask[tuple(nb)]:
                out.append((idx[tuple(base)], idx[tuple(nb)], c[tuple(base)]))
    return out


def _dense(env, mask=None):
    mask = np.ones(env.box.sides, bool) if mask is None else mask
    return dense_laplacian(env.box.n_vertices, _edges(env, mask))


# ---------------------------------------------------------------- operator


def test_constant_in_kernel():
    env = generate_environment(LatticeBox.centered(6), 0.7, 0.3, "uniform-on-[lambda,1]", 2)
    op = GraphOperator(env, np.ones(env.box.sides, bool))
    np.testing.assert_allclose(apply_operator(op, np.full(env.box.sides, 3.0)), 0.0, atol=1e-14)


def test_two_vertex_operator():
    box = LatticeBox((0, 0), (2, 2))
    c0 = np.zeros(box.bond_shape(0))
    c0[0, 0] = 0.4
    env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
    u = np.zeros(box.sides)
    u[1, 0] = 1.0
    lu = apply_operator(GraphOperator(env, np.ones(box.sides, bool)), u)
    assert lu[0, 0] == pytest.approx(0.4) and lu[1, 0] == pytest.approx(-0.4)


def test_operator_matches_dense(rng):
    env = generate_environment(LatticeBox.centered(4), 0.6, 0.2, "uniform-on-[lambda,1]", 8)
    u = rng.normal(size=env.box.sides)
    lu = apply_operator(GraphOperator(env, np.ones(env.box.sides, bool)), u)
    ref = -(_dense(env) @ u.ravel())
    np.testing.assert_allclose(lu.ravel(), ref, atol=1e-14)


def test_operator_shape_error():
    env = unit_env(4)
    with pytest.raises(ShapeError):
        apply_operator(GraphOperator(env, np.ones((4, 4), bool)), np.zeros((3, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_operator_symmetric(seed):
    rng = np.random.default_rng(seed)
    env = generate_environment(LatticeBox.centered(7), 0.7, 0.1, "uniform-on-[lambda,1]", seed)
    op = GraphOperator(env, np.ones(env.box.sides, bool))
    u, v = rng.normal(size=(2,) + env.box.sides)
    assert np.vdot(u, op.apply(v)) == pytest.approx(np.vdot(op.apply(u), v), abs=1e-12)
    assert np.vdot(u, op.apply(u)) <= 1e-12


def test_matrix_agrees_with_apply(rng):
    env = generate_environment(LatticeBox.centered(6), 0.7, seed=3)
    mask = rng.random(env.box.sides) < 0.8
    for bc in ("free", "dirichlet-zero"):
        op = GraphOperator(env, mask, bc)
        u = np.where(mask, rng.normal(size=env.box.sides), 0.0)
        g = DomainGraph(env, mask)
        np.testing.assert_allclose(-(op.matrix() @ g.local(u)), g.local(op.apply(u)), atol=1e-13)


# ---------------------------------------------------------------- Dirichlet solves


def test_constant_boundary_gives_constant():
    env = generate_environment(LatticeBox.centered(9), 0.8, 0.5, "uniform-on-[lambda,1]", 1)
    dom = label_clusters(env).proxy
    u = solve_dirichlet(env, dom, None, np.full(env.box.sides, 2.5))
    np.testing.assert_allclose(u[dom], 2.5, atol=1e-12)


def test_path_interpolation():
    box = LatticeBox((0, 0), (3, 2))
    c0 = np.zeros(box.bond_shape(0))
    c0[:, 0] = 1.0
    env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
    dom = np.zeros(box.sides, bool)
    dom[:, 0] = True
    bd = np.zeros(box.sides, bool)
    bd[0, 0] = bd[2, 0] = True
    bv = np.zeros(box.sides)
    bv[2, 0] = 2.0
    u = solve_dirichlet(env, dom, None, bv, boundary=bd)
    assert u[1, 0] == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("method", ["direct", "cg"])
def test_dirichlet_matches_dense(rng, method):
    env = generate_environment(LatticeBox.centered(5), 1.0, 0.1, "uniform-on-[lambda,1]", 17)
    dom = np.ones(env.box.sides, bool)
    bd = env.box.boundary_mask()
    rhs = rng.normal(size=env.box.sides)
    bv = rng.normal(size=env.box.sides)
    u = solve_dirichlet(env, dom, rhs, bv, tol=1e-13, method=method)
    A = _dense(env)
    I = np.flatnonzero(~bd.ravel())
    B = np.flatnonzero(bd.ravel())
    ref = np.linalg.solve(A[np.ix_(I, I)], rhs.ravel()[I] - A[np.ix_(I, B)] @ bv.ravel()[B])
    assert np.max(np.abs(u.ravel()[I] - ref)) <= 1e-10
    np.testing.assert_array_equal(u.ravel()[B], bv.ravel()[B])


def test_floating_component_gets_zero():
    env = closed_env(5)
    u = solve_dirichlet(env, np.ones(env.box.sides, bool), None, np.ones(env.box.sides))
    assert np.all(u[1:-1, 1:-1] == 0)


def test_pcg_reports_history():
    A = np.diag([1.0, 1e6])
    with pytest.raises(SolverError) as exc:
        pcg(lambda v: A @ v + np.array([v[1], v[0]]) * 0.9e3, np.ones(2), np.ones(2), 1e-30, 1)
    assert len(exc.value.residuals) >= 1


# ---------------------------------------------------------------- cell energy


def test_cell_energy_level_one():
    res = cell_energy(unit_env(3), TriadicCube(1, (0, 0)), (1, 0))
    assert res.nu == pytest.approx(1 / 3, abs=1e-14) and not res.degenerate


@pytest.mark.parametrize("d,m", [(2, 1), (2, 2), (2, 3), (3, 1), (3, 2)])
def test_cell_energy_closed_form(d, m):
    env = unit_env(3**m, d)
    for k in range(d):
        e = np.eye(d)[k]
        assert cell_energy(env, TriadicCube(m, (0,) * d), e).nu == pytest.approx((3**m - 1) / (2 * 3**m), abs=1e-12)


def test_cell_energy_closed_cube_is_degenerate():
    res = cell_energy(closed_env(9), TriadicCube(2, (0, 0)), (1, 0))
    assert res.degenerate and res.nu == 0.0


def test_cell_energy_identity_and_euler_lagrange():
    env = generate_environment(LatticeBox.centered(27), 0.8, 0.3, "uniform-on-[lambda,1]", 9)
    res = cell_energy(env, TriadicCube(3, (0, 0)), (0.6, 0.8))
    assert res.nu == pytest.approx(bond_energy(env, res.u, res.cluster) / (2 * 27**2), rel=1e-12)
    lu = GraphOperator(env, res.cluster).apply(res.u)
    interior = res.cluster & ~env.box.boundary_mask()
    assert np.max(np.abs(lu[interior])) < 1e-9


def test_cell_energy_monotone_in_conductances():
    base = generate_environment(LatticeBox.centered(9), 1.0, 0.2, "uniform-on-[lambda,1]", 5)
    cube = TriadicCube(2, (0, 0))
    nu0 = cell_energy(base, cube, (1, 0)).nu
    for k, idx in [(0, (3, 4)), (1, (4, 2)), (0, (0, 0))]:
        arrs = [np.array(c) for c in base.conductances]
        arrs[k][idx] = min(1.0, arrs[k][idx] + 0.5)
        raised = Environment.from_arrays(base.box, arrs, lam=0.2)
        assert cell_energy(raised, cube, (1, 0)).nu >= nu0 - 1e-14


def test_homogenized_p_one_dirichlet():
    for m in (2, 3):
        hp = estimate_homogenized(1.0, m=m, n_samples=1, boundary="dirichlet")
        assert hp.sigma2 == pytest.approx(2 * (3**m - 1) / 3**m, abs=1e-12)
        assert hp.theta == 1.0
        assert hp.sigma2_extrapolated == pytest.approx(2.0, abs=1e-12)


def test_homogenized_p_one_periodic():
    hp = estimate_homogenized(1.0, m=3, n_samples=1, boundary="periodic")
    assert hp.sigma2 == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(hp.a_bar, np.eye(2), atol=1e-12)


def test_periodic_tensor_unit():
    a, theta = periodic_cell_tensor(unit_env(27), 2)
    np.testing.assert_allclose(a, np.eye(2), atol=1e-12)
    assert theta == 1.0


def test_homogenized_ellipticity_sandwich():
    lam = 0.4
    hp = estimate_homogenized(1.0, lam, "uniform-on-[lambda,1]", m=2, n_samples=4, boundary="dirichlet")
    ref = (9 - 1) / 9
    diag = np.diag(hp.a_bar)
    assert np.all(diag >= lam * ref - 1e-12) and np.all(diag <= ref + 1e-12)


def test_homogenized_tensor_symmetric_psd():
    hp = estimate_homogenized(0.7, m=3, n_samples=3, seed=4)
    np.testing.assert_allclose(hp.a_bar, hp.a_bar.T, atol=1e-14)
    assert np.linalg.eigvalsh(hp.a_bar).min() >= 0
    assert 0 < hp.sigma2 <= 2


# ---------------------------------------------------------------- correctors and fluxes


def test_unit_corrector_vanishes():
    chi = solve_corrector(unit_env(15), 0)
    assert np.max(np.abs(chi.values)) < 1e-12
    np.testing.assert_array_equal(corrector_oscillation(chi, [2, 5]), [0.0, 0.0])


def test_corrector_matches_dense():
    env = generate_environment(LatticeBox.centered(6), 0.85, 0.3, "uniform-on-[lambda,1]", 21)
    lab = label_clusters(env)
    chi = solve_corrector(env, 1, (0, 0), lab, tol=1e-13)
    mask = lab.proxy
    A = _dense(env, mask)
    P = np.flatnonzero(mask.ravel())
    bd = env.box.boundary_mask().ravel()
    I = np.array([i for i in P if not bd[i]])
    lk = affine(env.box, (0, 1)).ravel()
    rhs = -(A @ lk)[I]
    ref = np.zeros(env.box.n_vertices)
    ref[I] = np.linalg.solve(A[np.ix_(I, I)], rhs)
    ref -= ref[env.box.index_of(chi.anchor)]
    assert np.max(np.abs(chi.values.ravel()[P] - ref[P])) <= 1e-10
    assert chi.values[env.box.local(chi.anchor)] == 0.0


def test_corrector_residual_small():
    env = generate_environment(LatticeBox.centered(31), 0.7, seed=3)
    chi = solve_corrector(env, 0, tol=1e-11)
    assert chi.residual < 1e-8


def test_oscillation_monotone():
    env = generate_environment(LatticeBox.centered(41), 0.7, seed=8)
    osc = corrector_oscillation(solve_corrector(env, 0), [1, 2, 4, 8, 16])
    assert np.all(np.diff(osc) >= 0)


def test_unit_flux_vanishes_both_variants():
    env = unit_env(11)
    chi = solve_corrector(env, 0)
    dom = env.box.ball_mask((0, 0), 4)
    for variant in ("centered", "translated"):
        g = flux_field(env, chi, 2.0, variant)
        for comp in g.components:
            assert np.all(comp[dom] == 0.0)
        assert weak_norm(g, env, dom, 4.0).value == 0.0


def test_flux_variants_related_by_shift():
    env = generate_environment(LatticeBox.centered(13), 0.7, seed=1)
    chi = solve_corrector(env, 1)
    c = flux_field(env, chi, 0.8, "centered")
    t = flux_field(env, chi, 0.8, "translated")
    np.testing.assert_array_equal(t.components[0][1:, :], c.components[0][:-1, :])
    np.testing.assert_array_equal(t.components[1][:, 1:], c.components[1][:, :-1])


# ---------------------------------------------------------------- weak norms and Poincare


def test_weak_norm_zero_field():
    env = unit_env(9)
    assert weak_norm(np.zeros(env.box.sides), env, np.ones(env.box.sides, bool), 3.0).value == 0.0


def test_weak_norm_constant_field():
    env = unit_env(9)
    c, r = 1.7, 5.0
    wn = weak_norm(np.full(env.box.sides, c), env, np.ones(env.box.sides, bool), r)
    assert wn.value == pytest.approx(c * r, rel=1e-10)


def test_weak_norm_matches_eigendecomposition(rng):
    env = generate_environment(LatticeBox.centered(5), 0.8, seed=6)
    dom = np.ones(env.box.sides, bool)
    f = rng.normal(size=env.box.sides)
    r = 2.0
    A = dense_laplacian(25, [(i, j, 1.0) for i, j, _ in _edges(env, dom)]) + np.eye(25) / r**2
    lam, vec = np.linalg.eigh(A)
    ref = np.sqrt(np.sum((vec.T @ f.ravel()) ** 2 / lam) / 25)
    assert abs(weak_norm(f, env, dom, r).value - ref) <= 1e-10


@pytest.mark.parametrize("n", [4, 7, 12])
def test_poincare_path(n):
    box = LatticeBox((0, 0), (n, 2))
    c0 = np.zeros(box.bond_shape(0))
    c0[:, 0] = 1.0
    env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
    dom = np.zeros(box.sides, bool)
    dom[:, 0] = True
    res = poincare_constant(env, dom, 1.0)
    assert res.lambda2 == pytest.approx(2 * (1 - np.cos(np.pi / n)), abs=1e-8)
    L = dense_laplacian(n, [(i, i + 1, 1.0) for i in range(n - 1)])
    assert np.allclose(L @ np.ones(n), 0.0)


def test_poincare_disconnected_flag():
    env = closed_env(4)
    res = poincare_constant(env, np.ones(env.box.sides, bool), 2.0, restrict_to_largest=False)
    assert res.lambda2 == 0.0 and not res.connected
