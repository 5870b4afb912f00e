import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perchom.cluster import (
    block_densities,
    central_window,
    density_scaling_experiment,
    estimate_theta,
    label_clusters,
)
from perchom.env import Environment, LatticeBox, generate_environment
from perchom.errors import StatisticsError
from perchom.oracles import bfs_labels, exhaustive_theta_3x3


def _open_bonds(env):
    box = env.box
    out = []
    for k, c in enumerate(env.conductances):
        for base in map(tuple, box.bond_coords(k).reshape(-1, box.d)[c.ravel() > 0]):
            nb = list(base)
            nb[k] += 1
            out.append((base, tuple(nb)))
    return out


def _same_partition(lab, env):
    verts = [tuple(v) for v in env.box.coords().reshape(-1, env.d)]
    ref = bfs_labels(_open_bonds(env), verts)
    mine = {v: int(lab.labels[env.box.local(v)]) for v in verts}
    for v in verts:
        assert (v in ref) == (mine[v] >= 0)
    pairs = {}
    for v, c in ref.items():
        pairs.setdefault(c, set()).add(mine[v])
    assert all(len(s) == 1 for s in pairs.values())
    assert len({next(iter(s)) for s in pairs.values()}) == len(pairs)


def test_two_by_two_hand_example():
    box = LatticeBox((0, 0), (2, 2))
    c0 = np.zeros(box.bond_shape(0))
    c0[0, 0] = 1.0
    env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
    lab = label_clusters(env)
    assert lab.labels[0, 0] == lab.labels[1, 0] >= 0
    assert lab.labels[0, 1] == -1 and lab.labels[1, 1] == -1
    assert lab.proxy.sum() == 2 and lab.proxy[0, 0] and lab.proxy[1, 0]


def test_full_lattice_single_component():
    env = generate_environment(LatticeBox.centered(9, 3), 1.0)
    lab = label_clusters(env)
    assert lab.n_components == 1 and lab.proxy.all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.3, 0.5, 0.7]), st.sampled_from([3, 5, 8]))
def test_labels_match_bfs_oracle(seed, p, side):
    env = generate_environment(LatticeBox.centered(side), p, seed=seed)
    _same_partition(label_clusters(env), env)


def test_tie_breaks_toward_smallest_vertex():
    box = LatticeBox((0, 0), (4, 1 + 1))
    c0 = np.zeros(box.bond_shape(0))
    c0[0, 0] = 1.0  # (0,0)-(1,0)
    c0[2, 1] = 1.0  # (2,1)-(3,1)
    env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
    lab = label_clusters(env)
    assert lab.proxy[0, 0] and not lab.proxy[2, 1]


def test_labeling_invariant_under_reflection():
    env = generate_environment(LatticeBox.centered(15), 0.6, seed=5)
    flipped = Environment.from_arrays(
        env.box, [env.conductances[0][::-1, :], env.conductances[1][::-1, :]]
    )
    a = label_clusters(env)
    b = label_clusters(flipped)
    np.testing.assert_array_equal(np.sort(a.sizes), np.sort(b.sizes))
    np.testing.assert_array_equal(a.labels >= 0, b.labels[::-1, :] >= 0)


def test_theta_p_one():
    est = estimate_theta(1.0, 9, 20)
    assert est.theta == 1.0 and est.ci == (1.0, 1.0)


def test_theta_tiny_p():
    assert estimate_theta(1e-9, 9, 20).theta == 0.0


def test_exhaustive_oracle_limits():
    assert exhaustive_theta_3x3(1.0) == pytest.approx(1.0)
    assert exhaustive_theta_3x3(1e-12) == pytest.approx(4e-12 * 1, rel=0.2, abs=1e-10)


def test_exhaustive_oracle_monotone():
    vals = [exhaustive_theta_3x3(p) for p in (0.2, 0.4, 0.6, 0.8)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_ci_width_shrinks_like_root_n():
    a = estimate_theta(0.7, 3, 4000, seed=1)
    b = estimate_theta(0.7, 3, 16000, seed=1)
    ratio = (a.ci[1] - a.ci[0]) / (b.ci[1] - b.ci[0])
    assert 1.6 < ratio < 2.5


def test_central_window():
    assert central_window((8, 3)) == (slice(2, 6), slice(1, 2))


def test_block_densities():
    mask = np.zeros((9, 9), dtype=bool)
    mask[:3, :3] = True
    dens = block_densities(mask, 1)
    assert dens[0] == 1.0 and dens[1:].sum() == 0.0
    assert block_densities(mask, 2)[0] == pytest.approx(1 / 9)


def test_density_scaling_p_one_degenerate():
    rep = density_scaling_experiment(1.0, [1, 2], 10)
    assert rep.degenerate and rep.slope is None
    assert all(s == 0 for s in rep.std_density)


def test_density_scaling_single_level():
    rep = density_scaling_experiment(0.7, [2], 10)
    assert rep.levels == (2,) and rep.slope is None


def test_density_scaling_needs_samples():
    with pytest.raises(StatisticsError):
        density_scaling_experiment(0.7, [1, 2], 9)
