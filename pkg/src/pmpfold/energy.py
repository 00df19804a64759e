"""Potential energy of a conformation and its gradient in torsion space.

U = sum_bonds K_r (r - r0)^2 + sum_angles K_t (t - t0)^2
    + sum_torsions V (1 + cos(n phi - phase))
    + sum_{i<j} q_i q_j / (eps r_ij) + sum_{i<j} (A_ij / r_ij^12 - B_ij / r_ij^6)

Non-bonded sums run over pairs not excluded (1-2 and 1-3 pairs) with
r_ij <= cutoff; there is no switching function, so U jumps when a pair
crosses the cutoff.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import product

import numpy as np

from .errors import SingularityError
from .kinematics import Conformation, dihedral, rebuild_cartesian
from .topology import MolecularTopology

DISTANCE_FLOOR = 1e-6

_NEIGHBOUR_OFFSETS = tuple(product((-1, 0, 1), repeat=3))


@dataclass(frozen=True)
class EnergyBreakdown:
    bond_stretch: float = 0.0
    angle_bend: float = 0.0
    torsion: float = 0.0
    coulomb: float = 0.0
    lennard_jones: float = 0.0

    @property
    def total(self) -> float:
        return math.fsum(
            (self.bond_stretch, self.angle_bend, self.torsion, self.coulomb, self.lennard_jones)
        )

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


@dataclass
class NeighborIndex:
    """Uniform cell grid with cell side equal to the cutoff.

    ``pairs`` holds every candidate pair (i < j) from the same or adjacent
    cells, sorted lexicographically, which is a superset of the pairs within
    the cutoff.
    """

    cutoff: float
    cells: dict
    pairs: np.ndarray


def _all_pairs(n):
    i, j = np.triu_indices(n, k=1)
    return np.stack([i, j], axis=1)


def build_neighbor_index(coords, cutoff: float) -> NeighborIndex:
    coords = np.asarray(coords, dtype=float)
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    n = len(coords)
    if math.isinf(cutoff):
        return NeighborIndex(cutoff, {(0, 0, 0): list(range(n))}, _all_pairs(n))

    keys = np.floor(coords / cutoff).astype(np.int64)
    cells: dict[tuple, list[int]] = {}
    for atom, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(atom)

    found = []
    for key, members in cells.items():
        for off in _NEIGHBOUR_OFFSETS:
            other = cells.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if other is None:
                continue
            for i in members:
                for j in other:
                    if i < j:
                        found.append((i, j))
    if not found:
        return NeighborIndex(cutoff, cells, np.empty((0, 2), dtype=np.int64))
    pairs = np.array(sorted(found), dtype=np.int64)
    return NeighborIndex(cutoff, cells, pairs)


def _active_pairs(top, coords, index):
    pairs = index.pairs
    if len(pairs) == 0:
        return pairs, np.empty(0), np.empty((0, 3))
    keep = top.pair_mask[pairs[:, 0], pairs[:, 1]]
    pairs = pairs[keep]
    delta = coords[pairs[:, 0]] - coords[pairs[:, 1]]
    r = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    close = r < DISTANCE_FLOOR
    if close.any():
        i, j = pairs[np.argmax(close)]
        raise SingularityError(f"atoms {i} and {j} overlap (r < {DISTANCE_FLOOR} A)", (int(i), int(j)))
    within = r <= top.globals.cutoff
    return pairs[within], r[within], delta[within]


def nonbonded_energy(top: MolecularTopology, coords, index: NeighborIndex | None = None):
    """(coulomb, lennard_jones) over the candidate pairs of ``index``."""
    coords = np.asarray(coords, dtype=float)
    if index is None:
        index = build_neighbor_index(coords, top.globals.cutoff)
    pairs, r, _ = _active_pairs(top, coords, index)
    if len(pairs) == 0:
        return 0.0, 0.0
    i, j = pairs[:, 0], pairs[:, 1]
    q = top.charges
    coulomb = np.sum(q[i] * q[j] / (top.globals.dielectric * r))
    a_mat, b_mat = top.lj_matrices
    inv6 = 1.0 / r**6
    lj = np.sum(a_mat[i, j] * inv6 * inv6 - b_mat[i, j] * inv6)
    return float(coulomb), float(lj)


def brute_force_nonbonded(top: MolecularTopology, coords):
    """Reference O(N^2) pair loop with no spatial index."""
    coords = np.asarray(coords, dtype=float)
    cutoff = top.globals.cutoff
    eps = top.globals.dielectric
    excluded = top.exclusions
    coulomb_terms, lj_terms = [], []
    for i in range(top.n_atoms):
        ai = top.atoms[i]
        for j in range(i + 1, top.n_atoms):
            if (i, j) in excluded:
                continue
            aj = top.atoms[j]
            r = math.dist(coords[i], coords[j])
            if r < DISTANCE_FLOOR:
                raise SingularityError(f"atoms {i} and {j} overlap (r < {DISTANCE_FLOOR} A)", (i, j))
            if r > cutoff:
                continue
            coulomb_terms.append(ai.charge * aj.charge / (eps * r))
            # well of depth sqrt(e_i e_j) at r = radius_i + radius_j, written
            # out here rather than shared with the fast path
            r_min = ai.lj_radius + aj.lj_radius
            well = math.sqrt(ai.lj_epsilon * aj.lj_epsilon)
            ratio6 = (r_min / r) ** 6
            lj_terms.append(well * (ratio6 * ratio6 - 2.0 * ratio6))
    return math.fsum(coulomb_terms), math.fsum(lj_terms)


def _angle_value(x, term):
    v = x[term.i] - x[term.j]
    w = x[term.k] - x[term.j]
    c = np.cross(v, w)
    return math.atan2(math.sqrt(c @ c), v @ w)


def bonded_energy(top: MolecularTopology, coords):
    """(bond_stretch, angle_bend, torsion) components."""
    x = np.asarray(coords, dtype=float)
    stretch = math.fsum(b.k * (math.dist(x[b.i], x[b.j]) - b.r0) ** 2 for b in top.bonds)
    bend = math.fsum(a.k_theta * (_angle_value(x, a) - a.theta0) ** 2 for a in top.angles)
    tors = 0.0
    if top.torsion_terms:
        terms = []
        for t in top.torsion_terms:
            phi = _term_dihedral(top, x, t)
            terms.append(t.amplitude * (1.0 + math.cos(t.multiplicity * phi - t.phase)))
        tors = math.fsum(terms)
    return stretch, bend, tors


def _term_dihedral(top, x, term):
    e = top.entry_for(term.atom)
    a, b, c = e.frame
    return dihedral(x[a], x[b], x[c], x[e.atom])


def energy_of_coords(top: MolecularTopology, coords) -> EnergyBreakdown:
    coords = np.asarray(coords, dtype=float)
    stretch, bend, tors = bonded_energy(top, coords)
    index = build_neighbor_index(coords, top.globals.cutoff)
    coulomb, lj = nonbonded_energy(top, coords, index)
    return EnergyBreakdown(stretch, bend, tors, coulomb, lj)


def total_energy(top: MolecularTopology, conf: Conformation) -> EnergyBreakdown:
    conf.rebuild(top)
    return energy_of_coords(top, conf.coords)


def cartesian_gradient(top: MolecularTopology, coords) -> np.ndarray:
    """dU/dx for the bond, angle and non-bonded terms (torsion terms excluded;
    they are handled directly in torsion space)."""
    x = np.asarray(coords, dtype=float)
    grad = np.zeros_like(x)
    for b in top.bonds:
        d = x[b.i] - x[b.j]
        r = math.sqrt(d @ d)
        g = 2.0 * b.k * (r - b.r0) / r * d
        grad[b.i] += g
        grad[b.j] -= g
    for a in top.angles:
        v = x[a.i] - x[a.j]
        w = x[a.k] - x[a.j]
        nv, nw = math.sqrt(v @ v), math.sqrt(w @ w)
        vh, wh = v / nv, w / nw
        cos_t = float(np.clip(vh @ wh, -1.0, 1.0))
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        theta = _angle_value(x, a)
        coef = 2.0 * a.k_theta * (theta - a.theta0)
        if coef == 0.0 or sin_t < 1e-12:
            continue
        di = -(wh - cos_t * vh) / (nv * sin_t)
        dk = -(vh - cos_t * wh) / (nw * sin_t)
        grad[a.i] += coef * di
        grad[a.k] += coef * dk
        grad[a.j] -= coef * (di + dk)

    index = build_neighbor_index(x, top.globals.cutoff)
    pairs, r, delta = _active_pairs(top, x, index)
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        q = top.charges
        a_mat, b_mat = top.lj_matrices
        inv_r = 1.0 / r
        inv6 = inv_r**6
        du_dr = (
            -q[i] * q[j] / top.globals.dielectric * inv_r**2
            - 12.0 * a_mat[i, j] * inv6 * inv6 * inv_r
            + 6.0 * b_mat[i, j] * inv6 * inv_r
        )
        f = (du_dr * inv_r)[:, None] * delta
        np.add.at(grad, i, f)
        np.add.at(grad, j, -f)
    return grad


def torsion_gradient(top: MolecularTopology, conf: Conformation) -> np.ndarray:
    """dU/dd_j for every movable torsion.

    Turning torsion j moves each downstream atom by dx_i/dd_j = u_j x (x_i - p_j)
    with u_j the unit axis b->c and p_j = x_c, so
    dU/dd_j = u_j . sum_i (x_i - p_j) x dU/dx_i.
    """
    conf.rebuild(top)
    x = conf.coords
    m = top.n_torsions
    out = np.zeros(m)
    if m == 0:
        return out
    g = cartesian_gradient(top, x)
    moved = top.moved_by.astype(float)
    torque = moved @ np.cross(x, g)
    force = moved @ g
    b_ids, c_ids = top.torsion_axes[:, 0], top.torsion_axes[:, 1]
    axis = x[c_ids] - x[b_ids]
    axis /= np.linalg.norm(axis, axis=1)[:, None]
    point = x[c_ids]
    out += np.einsum("ij,ij->i", axis, torque - np.cross(point, force))
    for t in top.torsion_terms:
        if t.torsion_index is None:
            continue
        phi = _term_dihedral(top, x, t)
        out[t.torsion_index] -= t.amplitude * t.multiplicity * math.sin(t.multiplicity * phi - t.phase)
    return out


def energy_function(top: MolecularTopology):
    """Closures (U, grad U) over raw torsion vectors, as used by the integrators."""

    def potential(s):
        return energy_of_coords(top, rebuild_cartesian(top, s)).total

    def gradient(s):
        return torsion_gradient(top, Conformation.build(top, s))

    return potential, gradient
