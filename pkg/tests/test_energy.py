import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pmpfold.energy import (
    EnergyBreakdown,
    bonded_energy,
    brute_force_nonbonded,
    build_neighbor_index,
    energy_function,
    energy_of_coords,
    nonbonded_energy,
    torsion_gradient,
    total_energy,
)
from pmpfold.errors import SingularityError
from pmpfold.kinematics import Conformation, rebuild_cartesian
from pmpfold.topology import load_topology, topology_to_dict
from pmpfold.verify import chain_topology, finite_difference_gradient, gradient_error, random_cloud

from conftest import random_rotation


def four_atom_document(charges=(0, 0, 0, 0), radii=(1.0,) * 4, eps=(0.0,) * 4, torsion=60.0,
                       terms=(), cutoff=10.0):
    return {
        "atoms": [{"id": i, "element": "C", "charge": charges[i], "lj_radius": radii[i],
                   "lj_epsilon": eps[i]} for i in range(4)],
        "bonds": [[0, 1, 1.5, 100.0], [1, 2, 1.5, 100.0], [2, 3, 1.5, 100.0]],
        "angles": [],
        "torsion_terms": list(terms),
        "zmatrix": [{"atom": 3, "frame": [0, 1, 2], "bond_length": 1.5, "bond_angle": 110.0,
                     "torsion": torsion, "kind": "fixed"}],
        "seed_coords": [[0, 0, 0], [1.5, 0, 0], [1.5 + 1.5 * math.cos(math.radians(70)),
                                                 1.5 * math.sin(math.radians(70)), 0]],
        "globals": {"dielectric": 1.0, "cutoff": cutoff},
    }


def load(doc):
    return load_topology(json.dumps(doc))


def hand_energy(top, x):
    """Every term written out directly from the functional form."""
    total = 0.0
    for b in top.bonds:
        total += b.k * (np.linalg.norm(x[b.i] - x[b.j]) - b.r0) ** 2
    for a in top.angles:
        v, w = x[a.i] - x[a.j], x[a.k] - x[a.j]
        theta = math.acos(np.clip(v @ w / np.linalg.norm(v) / np.linalg.norm(w), -1, 1))
        total += a.k_theta * (theta - a.theta0) ** 2
    for t in top.torsion_terms:
        e = top.entry_for(t.atom)
        p0, p1, p2, p3 = (x[k] for k in (*e.frame, e.atom))
        b1 = (p2 - p1) / np.linalg.norm(p2 - p1)
        v = (p0 - p1) - ((p0 - p1) @ b1) * b1
        w = (p3 - p2) - ((p3 - p2) @ b1) * b1
        phi = math.atan2(np.cross(b1, v) @ w, v @ w)
        total += t.amplitude * (1 + math.cos(t.multiplicity * phi - t.phase))
    excluded = {tuple(sorted(p)) for p in top.exclusions}
    for i in range(top.n_atoms):
        for j in range(i + 1, top.n_atoms):
            if (i, j) in excluded:
                continue
            r = np.linalg.norm(x[i] - x[j])
            if r > top.globals.cutoff:
                continue
            ai, aj = top.atoms[i], top.atoms[j]
            sigma = (ai.lj_radius + aj.lj_radius) / 2 ** (1 / 6)
            well = math.sqrt(ai.lj_epsilon * aj.lj_epsilon)
            total += ai.charge * aj.charge / (top.globals.dielectric * r)
            total += 4 * well * ((sigma / r) ** 12 - (sigma / r) ** 6)
    return total


def low_energy_torsions(top, rng, n, ceiling=1e3):
    out = []
    while len(out) < n:
        d = rng.uniform(-math.pi, math.pi, top.n_torsions)
        try:
            if total_energy(top, Conformation.build(top, d)).total < ceiling:
                out.append(d)
        except SingularityError:
            pass
    return out


# -- bonded ---------------------------------------------------------------------


def test_equilibrium_bonded_terms_vanish(minimal):
    x = rebuild_cartesian(minimal, [])
    assert bonded_energy(minimal, x) == pytest.approx((0, 0, 0), abs=1e-20)
    assert total_energy(minimal, Conformation.build(minimal)).total == pytest.approx(0.0, abs=1e-20)


def test_single_bond_stretch():
    top = load(four_atom_document())
    x = np.array([[0, 0, 0], [1.6, 0, 0], [1.6, 1.5, 0], [1.6, 1.5, 1.5]], dtype=float)
    assert bonded_energy(top, x)[0] == pytest.approx(1.0, rel=1e-12)


def test_cosine_torsion_zero():
    top = load(four_atom_document(torsion=60.0, terms=[[None, 1.0, 3, 0.0, 3]]))
    x = rebuild_cartesian(top, [])
    assert bonded_energy(top, x)[2] == pytest.approx(0.0, abs=1e-12)


# -- non-bonded -----------------------------------------------------------------


def test_coulomb_unit_charges():
    top = load(four_atom_document(charges=(1, 0, 0, 1)))
    x = np.array([[0, 0, 0], [0.5, 0.8, 0], [0.2, 1.9, 0.4], [1, 0, 0]], dtype=float)
    coulomb, lj = nonbonded_energy(top, x)
    assert coulomb == pytest.approx(1.0, rel=1e-14)
    assert lj == 0.0


def test_lj_minimum_depth():
    radii = (1.7, 1.0, 1.0, 1.2)
    eps = (0.3, 0.0, 0.0, 0.12)
    top = load(four_atom_document(radii=radii, eps=eps))
    r_min = radii[0] + radii[3]
    x = np.array([[0, 0, 0], [0.5, 1.0, 0], [1.5, 2.0, 0.3], [r_min, 0, 0]], dtype=float)
    _, lj = nonbonded_energy(top, x)
    assert lj == pytest.approx(-math.sqrt(0.3 * 0.12), rel=1e-12)


def test_excluded_and_out_of_range_pairs_vanish():
    top = load(four_atom_document(charges=(1, 1, 1, 1), eps=(0.1,) * 4, cutoff=2.0))
    # every pair except 0-3 is 1-2 or 1-3; put 0-3 beyond the cutoff
    x = np.array([[0, 0, 0], [1, 0, 0], [2, 0.5, 0], [3, 0, 0]], dtype=float)
    assert brute_force_nonbonded(top, x) == (0.0, 0.0)
    assert nonbonded_energy(top, x) == (0.0, 0.0)


def test_overlap_is_singular():
    top = load(four_atom_document(charges=(1, 0, 0, 1)))
    x = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 0, 1e-8]], dtype=float)
    with pytest.raises(SingularityError) as err:
        nonbonded_energy(top, x)
    assert err.value.pair == (0, 3)
    with pytest.raises(SingularityError):
        brute_force_nonbonded(top, x)


def test_twenty_atom_cloud_matches_brute_force(rng):
    for _ in range(20):
        top = chain_topology(20, rng, cutoff=5.0)
        x = random_cloud(20, rng, box=10.0)
        fast = nonbonded_energy(top, x, build_neighbor_index(x, top.globals.cutoff))
        slow = brute_force_nonbonded(top, x)
        assert_allclose(fast, slow, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(2.0, 12.0))
def test_neighbor_index_is_superset(seed, cutoff):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 20, size=(100, 3))
    index = build_neighbor_index(x, cutoff)
    candidates = {tuple(p) for p in index.pairs}
    i, j = np.triu_indices(100, 1)
    close = np.linalg.norm(x[i] - x[j], axis=1) <= cutoff
    assert set(zip(i[close].tolist(), j[close].tolist())) <= candidates


def test_neighbor_index_one_cell_and_far_pair():
    x = np.random.default_rng(0).uniform(0, 1, size=(7, 3))
    assert len(build_neighbor_index(x, 5.0).pairs) == 21
    far = np.array([[0.0, 0, 0], [15.0, 0, 0]])
    assert len(build_neighbor_index(far, 5.0).pairs) == 0


def test_infinite_cutoff_lists_all_pairs():
    x = np.random.default_rng(1).uniform(0, 100, size=(6, 3))
    assert len(build_neighbor_index(x, math.inf).pairs) == 15


# -- totals ---------------------------------------------------------------------


def test_total_matches_hand_evaluation(sidechains, rng):
    for d in low_energy_torsions(sidechains, rng, 5):
        x = rebuild_cartesian(sidechains, d)
        assert energy_of_coords(sidechains, x).total == pytest.approx(hand_energy(sidechains, x), rel=1e-10)


def test_breakdown_total_and_dict():
    e = EnergyBreakdown(1.0, 2.0, 3.0, 4.0, 5.0)
    assert e.total == 15.0
    assert e.as_dict()["total"] == 15.0


def test_rigid_motion_invariance(sidechains, rng):
    for d in low_energy_torsions(sidechains, rng, 5):
        x = rebuild_cartesian(sidechains, d)
        y = x @ random_rotation(rng).T + rng.normal(size=3) * 5
        a, b = energy_of_coords(sidechains, x), energy_of_coords(sidechains, y)
        assert b.total == pytest.approx(a.total, rel=1e-9, abs=1e-9)


# -- gradient -------------------------------------------------------------------


def test_gradient_matches_finite_differences(sidechains, rng):
    for d in low_energy_torsions(sidechains, rng, 20):
        g = torsion_gradient(sidechains, Conformation.build(sidechains, d))
        assert gradient_error(g, finite_difference_gradient(sidechains, d)) < 1e-4


def test_gradient_vanishes_at_minimum(butane):
    _, grad = energy_function(butane)
    s = np.array([2.5])
    for _ in range(2000):
        s = s - 0.05 * grad(s)
    assert abs(grad(s)[0]) < 1e-6
    assert abs(abs(s[0]) - math.pi) < 1e-5


def test_gradient_zero_for_inert_torsion(butane):
    doc = topology_to_dict(butane)
    doc["torsion_terms"] = []
    doc["atoms"][3].update(charge=0.0, lj_epsilon=0.0)
    top = load(doc)
    g = torsion_gradient(top, Conformation.build(top, [1.1]))
    assert abs(g[0]) < 1e-12


def test_descent_along_negative_gradient(sidechains, rng):
    potential, grad = energy_function(sidechains)
    for d in low_energy_torsions(sidechains, rng, 10):
        g = grad(d)
        if np.linalg.norm(g) < 1e-3:
            continue
        assert potential(d - 1e-4 * g / np.linalg.norm(g)) < potential(d)
