"""Torsion space <-> Cartesian space.

Atoms are placed one at a time from a local frame built on three already
placed atoms (a, b, c):

    x = x_c + b_len * [u, n x u, n] . [cos(pi - angle), sin(pi - angle) cos d, sin(pi - angle) sin d]

with u the unit vector b->c and n the unit normal of the (a, b, c) plane.
Bond lengths and bond angles never change; only the torsions d move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrameError, GeometryError
from .topology import MolecularTopology

DEFAULT_STEP_SIZE = 0.5
_DEGENERATE_TOL = 1e-10


def wrap_angle(x):
    """Map angles onto (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    r = np.mod(x + math.pi, 2.0 * math.pi) - math.pi
    r = np.where(r <= -math.pi, math.pi, r)
    # values already in range pass through bit-for-bit
    r = np.where((x > -math.pi) & (x <= math.pi), x, r)
    return r if r.ndim else float(r)


def angle_diff(x, y):
    """Signed difference x - y on the circle, in (-pi, pi]."""
    return wrap_angle(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))


def _cross(p, q):
    return np.array(
        (p[1] * q[2] - p[2] * q[1], p[2] * q[0] - p[0] * q[2], p[0] * q[1] - p[1] * q[0])
    )


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray
    u: np.ndarray
    n: np.ndarray

    @classmethod
    def from_points(cls, a, b, c, atom=None) -> "Frame":
        a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
        bc = c - b
        norm_bc = math.sqrt(bc @ bc)
        if norm_bc < _DEGENERATE_TOL:
            raise DegenerateFrameError(f"frame atoms b and c coincide (atom {atom})", atom)
        u = bc / norm_bc
        n = _cross(b - a, u)
        norm_n = math.sqrt(n @ n)
        if norm_n < _DEGENERATE_TOL * max(1.0, math.sqrt((b - a) @ (b - a))):
            raise DegenerateFrameError(f"frame atoms are collinear (atom {atom})", atom)
        return cls(c, u, n / norm_n)


def place_atom(frame: Frame, b: float, a: float, d: float) -> np.ndarray:
    """Cartesian position of an atom at bond length ``b``, bond angle ``a`` and
    torsion ``d`` relative to ``frame``."""
    u, n = frame.u, frame.n
    m = _cross(n, u)
    ca, sa = math.cos(math.pi - a), math.sin(math.pi - a)
    return frame.origin + b * (ca * u + sa * math.cos(d) * m + sa * math.sin(d) * n)


def rebuild_cartesian(top: MolecularTopology, torsions) -> np.ndarray:
    torsions = np.asarray(torsions, dtype=float)
    if torsions.shape != (top.n_torsions,):
        raise ValueError(f"expected {top.n_torsions} torsions, got shape {torsions.shape}")
    coords = np.empty((top.n_atoms, 3))
    coords[:3] = top.seed_array
    for e in top.zmatrix:
        ia, ib, ic = e.frame
        frame = Frame.from_points(coords[ia], coords[ib], coords[ic], atom=e.atom)
        d = torsions[e.torsion_index] if e.movable else e.torsion
        coords[e.atom] = place_atom(frame, e.bond_length, e.bond_angle, d)
    return coords


def dihedral(p0, p1, p2, p3) -> float:
    """Signed dihedral p0-p1-p2-p3 in (-pi, pi]; 0 is cis."""
    b1 = np.asarray(p1, float) - np.asarray(p0, float)
    b2 = np.asarray(p2, float) - np.asarray(p1, float)
    b3 = np.asarray(p3, float) - np.asarray(p2, float)
    n1 = _cross(b1, b2)
    n2 = _cross(b2, b3)
    y = math.sqrt(b2 @ b2) * (b1 @ n2)
    x = n1 @ n2
    return wrap_angle(math.atan2(y, x))


def bond_angle(p0, p1, p2) -> float:
    """Angle at p1 formed by p0-p1-p2."""
    v = np.asarray(p0, float) - np.asarray(p1, float)
    w = np.asarray(p2, float) - np.asarray(p1, float)
    # atan2 form stays accurate near 0 and pi
    return math.atan2(math.sqrt(_cross(v, w) @ _cross(v, w)), v @ w)


def extract_internal(top: MolecularTopology, coords, tol: float = 1e-6) -> np.ndarray:
    """Recover the movable torsions from Cartesian coordinates.

    The rigid geometry (every bond length, bond angle and fixed torsion of the
    zmatrix) is checked first; any deviation beyond ``tol`` raises
    GeometryError.  The result is independent of the overall pose.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (top.n_atoms, 3):
        raise ValueError(f"coords must have shape ({top.n_atoms}, 3)")
    seed = top.seed_array
    for (i, j) in ((0, 1), (1, 2)):
        want = np.linalg.norm(seed[i] - seed[j])
        got = np.linalg.norm(coords[i] - coords[j])
        if abs(want - got) > tol:
            raise GeometryError(f"seed distance {i}-{j} is {got:.9g}, expected {want:.9g}")
    if abs(bond_angle(*coords[:3]) - bond_angle(*seed)) > tol:
        raise GeometryError("seed bond angle differs from seed_coords")

    out = np.empty(top.n_torsions)
    for e in top.zmatrix:
        ia, ib, ic = e.frame
        r = np.linalg.norm(coords[e.atom] - coords[ic])
        if abs(r - e.bond_length) > tol:
            raise GeometryError(
                f"atom {e.atom}: bond length {r:.9g} differs from {e.bond_length:.9g}"
            )
        ang = bond_angle(coords[ib], coords[ic], coords[e.atom])
        if abs(ang - e.bond_angle) > tol:
            raise GeometryError(f"atom {e.atom}: bond angle {ang:.9g} differs from {e.bond_angle:.9g}")
        d = dihedral(coords[ia], coords[ib], coords[ic], coords[e.atom])
        if e.movable:
            out[e.torsion_index] = d
        elif abs(angle_diff(d, e.torsion)) > tol:
            raise GeometryError(f"atom {e.atom}: fixed torsion moved to {math.degrees(d):.6g} deg")
    return out


def apply_action(torsions, action, eps: float = DEFAULT_STEP_SIZE) -> np.ndarray:
    """One torsion update d <- wrap(d + eps * action)."""
    torsions = np.asarray(torsions, dtype=float)
    action = np.asarray(action, dtype=float)
    if torsions.shape != action.shape:
        raise ValueError(f"action shape {action.shape} does not match torsions {torsions.shape}")
    return np.asarray(wrap_angle(torsions + eps * action), dtype=float).reshape(torsions.shape)


@dataclass
class Conformation:
    torsions: np.ndarray
    coords: np.ndarray
    dirty: bool = False

    @classmethod
    def build(cls, top: MolecularTopology, torsions=None) -> "Conformation":
        if torsions is None:
            torsions = top.default_torsions
        torsions = np.asarray(wrap_angle(np.asarray(torsions, dtype=float)), dtype=float).reshape(-1)
        return cls(torsions, rebuild_cartesian(top, torsions))

    def set_torsions(self, torsions) -> None:
        self.torsions = np.asarray(torsions, dtype=float)
        self.dirty = True

    def rebuild(self, top: MolecularTopology) -> "Conformation":
        if self.dirty:
            self.coords = rebuild_cartesian(top, self.torsions)
            self.dirty = False
        return self
