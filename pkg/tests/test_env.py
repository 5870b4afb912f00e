import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perchom.env import (
    Environment,
    LatticeBox,
    TriadicCube,
    check_supercritical,
    derive_seed,
    generate_environment,
    hash_uniform,
    load_environment,
    save_environment,
    triadic_box,
    triadic_cube_of,
)
from perchom.errors import FieldFormatError, GeometryError, ParameterError, SubcriticalError

coords2 = st.tuples(st.integers(-200, 200), st.integers(-200, 200))


def test_p_one_opens_every_bond():
    env = generate_environment(LatticeBox.centered(7), 1.0, 1.0, "bernoulli-unit", 0)
    assert all(np.all(c == 1.0) for c in env.conductances)


def test_tiny_p_leaves_box_closed():
    env = generate_environment(LatticeBox.centered(10), 1e-9, seed=0)
    assert env.n_open() <= 2


def test_open_fraction_binomial_interval():
    box = LatticeBox.centered(64)
    fr = np.array([generate_environment(box, 0.6, seed=s).open_fraction() for s in range(100)])
    # mean of 100 * n_bonds Bernoulli(0.6) draws
    sigma = math.sqrt(0.6 * 0.4 / (100 * box.n_bonds))
    assert abs(fr.mean() - 0.6) <= 3 * sigma


def test_uniform_law_range():
    env = generate_environment(LatticeBox.centered(20), 0.8, 0.3, "uniform-on-[lambda,1]", 4)
    vals = env.flat()
    opened = vals[vals > 0]
    assert opened.min() >= 0.3 and opened.max() <= 1.0
    assert np.unique(opened).size > 100


@pytest.mark.parametrize("p,lam", [(0.0, 1.0), (1.5, 1.0), (0.5, 0.0), (0.5, 2.0)])
def test_invalid_parameters(p, lam):
    with pytest.raises(ParameterError):
        generate_environment(LatticeBox.centered(5), p, lam)


def test_unknown_law():
    with pytest.raises(ParameterError):
        generate_environment(LatticeBox.centered(5), 0.5, 1.0, "gamma")


def test_reproducible_bytes():
    box = LatticeBox.centered(33)
    a = generate_environment(box, 0.7, 0.5, "uniform-on-[lambda,1]", 11)
    b = generate_environment(box, 0.7, 0.5, "uniform-on-[lambda,1]", 11)
    assert a.flat().tobytes() == b.flat().tobytes()
    c = generate_environment(box, 0.7, 0.5, "uniform-on-[lambda,1]", 12)
    assert a.flat().tobytes() != c.flat().tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**40))
def test_sub_box_shares_bonds_with_super_box(ox, oy, nx, ny, seed):
    big = LatticeBox((-30, -30), (61, 61))
    sub = LatticeBox((ox, oy), (nx, ny))
    e_big = generate_environment(big, 0.55, 0.2, "uniform-on-[lambda,1]", seed)
    e_sub = generate_environment(sub, 0.55, 0.2, "uniform-on-[lambda,1]", seed)
    restricted = e_big.restrict(sub)
    for k in range(2):
        np.testing.assert_array_equal(restricted.conductances[k], e_sub.conductances[k])


def test_hash_uniform_range_and_determinism():
    xy = np.array([[0, 0], [1, 0], [0, 1], [-5, 7]])
    u = hash_uniform(3, xy, 0, 0, 0)
    assert np.all((u >= 0) & (u < 1))
    np.testing.assert_array_equal(u, hash_uniform(3, xy, 0, 0, 0))
    assert not np.array_equal(u, hash_uniform(3, xy, 1, 0, 0))


def test_derive_seed_distinct():
    seeds = {derive_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000


def test_box_basics():
    box = LatticeBox.centered(5, 3)
    assert box.origin == (-2, -2, -2)
    assert box.n_vertices == 125
    assert box.n_bonds == 3 * 4 * 25
    with pytest.raises(GeometryError):
        LatticeBox((0, 0), (0, 3))
    with pytest.raises(GeometryError):
        LatticeBox((0,), (4,))


@given(st.tuples(st.integers(-3, 3), st.integers(-3, 3)))
def test_index_round_trip(x):
    box = LatticeBox.centered(7)
    assert box.vertex_of(box.index_of(x)) == x


def test_cube_examples():
    c = triadic_cube_of((0, 0), 0)
    assert c.center == (0, 0) and c.side == 1
    c = triadic_cube_of((4, 0), 1)
    assert c.center == (3, 0)
    assert c.lo == (2, -1) and c.hi == (4, 1)


@settings(max_examples=1000)
@given(coords2, st.integers(0, 2))
def test_cube_nesting(x, m):
    c = triadic_cube_of(x, m)
    assert c.contains(x)
    assert triadic_cube_of(c.center, m) == c
    parent = triadic_cube_of(x, m + 1)
    assert all(pl <= l and h <= ph for pl, l, h, ph in zip(parent.lo, c.lo, c.hi, parent.hi))
    assert c.parent() == parent


def test_cube_children_tile_parent():
    c = TriadicCube(2, (9, -9))
    seen = np.zeros(c.as_box().sides, dtype=int)
    for ch in c.children():
        seen[c.as_box().slices_of(ch.as_box())] += 1
    assert np.all(seen == 1)


@pytest.mark.parametrize("m", [0, 1, 2])
def test_cubes_tile_box(m):
    box = LatticeBox((-7, -4), (13, 11))
    centers = {triadic_cube_of(x, m).center for x in map(tuple, box.coords().reshape(-1, 2))}
    count = np.zeros(box.sides, dtype=int)
    for z in centers:
        cb = TriadicCube(m, z).as_box()
        lo = np.maximum(np.array(cb.origin), box.origin)
        hi = np.minimum(np.array(cb.hi), box.hi)
        sl = tuple(slice(l - o, h - o + 1) for l, h, o in zip(lo, hi, box.origin))
        count[sl] += 1
    assert np.all(count == 1)


def test_bad_center():
    with pytest.raises(GeometryError):
        TriadicCube(1, (1, 0))


def test_triadic_box():
    b = triadic_box(2)
    assert b.sides == (9, 9) and b.origin == (-4, -4)


def test_supercritical_guard():
    with pytest.raises(SubcriticalError):
        check_supercritical(0.5, 2)
    check_supercritical(0.5, 2, force=True)
    check_supercritical(0.6, 2)


def test_percenv_round_trip(tmp_path):
    env = generate_environment(LatticeBox((-3, 2), (6, 5)), 0.7, 0.25, "uniform-on-[lambda,1]", 99)
    path = tmp_path / "e.percenv"
    save_environment(env, path)
    assert path.read_bytes().startswith(b"PERCENV v1 d=2 sides=6,5 p=0.7 lambda=0.25 law=uniform-on-[lambda,1] seed=99")
    back = load_environment(path)
    assert back.box == env.box
    assert back.flat().tobytes() == env.flat().tobytes()


def test_percenv_truncated(tmp_path):
    env = generate_environment(LatticeBox.centered(4), 0.7)
    path = tmp_path / "e.percenv"
    save_environment(env, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FieldFormatError):
        load_environment(path)


def test_from_arrays_rejects_bad_values():
    box = LatticeBox.centered(3)
    with pytest.raises((ParameterError, ValueError)):
        Environment.from_arrays(box, [np.full(box.bond_shape(0), 2.0), np.zeros(box.bond_shape(1))])
