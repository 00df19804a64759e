"""Molecule definitions: atoms, force-field parameters and the internal-coordinate tree.

A molecule document is JSON with the keys ``atoms``, ``bonds``, ``angles``,
``torsion_terms``, ``zmatrix``, ``seed_coords`` and ``globals``.  Angles in the
document are in degrees; everything in memory is radians, lengths are Angstrom.

The first three atoms (ids 0, 1, 2) are placed from ``seed_coords``; every
other atom has exactly one zmatrix entry, and entries are listed in placement
order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import ParseError, ValidationError

ELEMENTS = ("C", "N", "O", "H", "S")

# (lj_radius [A], lj_epsilon) used when an atom record omits them.
DEFAULT_LJ = {
    "C": (2.00, 0.12),
    "N": (1.75, 0.16),
    "O": (1.55, 0.16),
    "H": (1.00, 0.03),
    "S": (1.90, 0.25),
}

KINDS = ("fixed", "backbone_dihedral", "rotamer")
COMBINE_RULES = ("radius_sum",)
FEATURE_WIDTH = 13

_TWO_SIXTH = 2.0 ** (1.0 / 6.0)


@dataclass(frozen=True)
class AtomSpec:
    id: int
    element: str
    charge: float = 0.0
    lj_radius: float = 0.0
    lj_epsilon: float = 0.0
    is_acceptor: bool = False
    is_donor: bool = False
    is_backbone: bool = False


@dataclass(frozen=True)
class InternalCoordEntry:
    """One zmatrix row.  ``frame`` is (a, b, c) with c the parent atom, so the
    new atom sits at distance ``bond_length`` from c, makes ``bond_angle`` with
    b-c, and has dihedral ``torsion`` about the b-c axis measured from a."""

    atom: int
    frame: tuple[int, int, int]
    bond_length: float
    bond_angle: float
    torsion: float
    kind: str = "fixed"
    torsion_index: int | None = None

    @property
    def movable(self) -> bool:
        return self.kind != "fixed"


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    r0: float
    k: float


@dataclass(frozen=True)
class Angle:
    i: int
    j: int
    k: int
    theta0: float
    k_theta: float


@dataclass(frozen=True)
class TorsionTerm:
    """V (1 + cos(n*phi - phase)) on the dihedral that places ``atom``."""

    torsion_index: int | None
    amplitude: float
    multiplicity: int
    phase: float
    atom: int = -1


@dataclass(frozen=True)
class ForceFieldGlobals:
    dielectric: float = 1.0
    cutoff: float = 10.0
    combine_rule: str = "radius_sum"

    def pair_coefficients(self, radius_i, eps_i, radius_j, eps_j):
        """Return (A_ij, B_ij) so that A/r^12 - B/r^6 has its minimum -eps_ij
        at r = radius_i + radius_j."""
        sigma = (np.asarray(radius_i) + np.asarray(radius_j)) / _TWO_SIXTH
        eps = np.sqrt(np.asarray(eps_i) * np.asarray(eps_j))
        s6 = sigma**6
        return 4.0 * eps * s6 * s6, 4.0 * eps * s6


@dataclass(frozen=True)
class MolecularTopology:
    atoms: tuple[AtomSpec, ...]
    bonds: tuple[Bond, ...]
    angles: tuple[Angle, ...]
    torsion_terms: tuple[TorsionTerm, ...]
    zmatrix: tuple[InternalCoordEntry, ...]
    seed_coords: tuple[tuple[float, float, float], ...]
    globals: ForceFieldGlobals = field(default_factory=ForceFieldGlobals)
    exclusions: frozenset = frozenset()

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @cached_property
    def movable_entries(self) -> tuple[InternalCoordEntry, ...]:
        entries = [e for e in self.zmatrix if e.movable]
        return tuple(sorted(entries, key=lambda e: e.torsion_index))

    @property
    def n_torsions(self) -> int:
        return len(self.movable_entries)

    @cached_property
    def default_torsions(self) -> np.ndarray:
        return np.array([e.torsion for e in self.movable_entries], dtype=float)

    @cached_property
    def torsion_kinds(self) -> tuple[str, ...]:
        return tuple(e.kind for e in self.movable_entries)

    @cached_property
    def seed_array(self) -> np.ndarray:
        return np.array(self.seed_coords, dtype=float).reshape(3, 3)

    @cached_property
    def charges(self) -> np.ndarray:
        return np.array([a.charge for a in self.atoms], dtype=float)

    @cached_property
    def pair_mask(self) -> np.ndarray:
        """Boolean (N, N) matrix, True where the pair enters non-bonded sums."""
        n = self.n_atoms
        mask = ~np.eye(n, dtype=bool)
        for i, j in self.exclusions:
            mask[i, j] = mask[j, i] = False
        return mask

    @cached_property
    def lj_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        radius = np.array([a.lj_radius for a in self.atoms])
        eps = np.array([a.lj_epsilon for a in self.atoms])
        return self.globals.pair_coefficients(
            radius[:, None], eps[:, None], radius[None, :], eps[None, :]
        )

    @cached_property
    def moved_by(self) -> np.ndarray:
        """Boolean (M, N): row j marks the atoms rigidly rotated by torsion j."""
        n, m = self.n_atoms, self.n_torsions
        moved = np.zeros((m, n), dtype=bool)
        position = {e.atom: p for p, e in enumerate(self.zmatrix)}
        for entry in self.movable_entries:
            j = entry.torsion_index
            axis = {entry.frame[1], entry.frame[2]}
            rotated = {entry.atom}
            for other in self.zmatrix[position[entry.atom] + 1:]:
                if any(f in rotated for f in other.frame):
                    if not all(f in rotated or f in axis for f in other.frame):
                        raise ValidationError(
                            f"atom {other.atom}: frame {other.frame} mixes atoms rotated by "
                            f"torsion {j} with atoms off its axis"
                        )
                    rotated.add(other.atom)
            moved[j, sorted(rotated)] = True
        return moved

    @cached_property
    def torsion_axes(self) -> np.ndarray:
        """(M, 2) atom ids (b, c) of each movable torsion's rotation axis b->c."""
        return np.array(
            [(e.frame[1], e.frame[2]) for e in self.movable_entries], dtype=int
        ).reshape(-1, 2)

    def entry_for(self, atom: int) -> InternalCoordEntry:
        for e in self.zmatrix:
            if e.atom == atom:
                return e
        raise KeyError(atom)

    def freeze_kinds(self, kinds) -> "MolecularTopology":
        """Return a copy where entries of the given kinds become fixed.

        Remaining movable entries are re-indexed contiguously in their old order.
        """
        kinds = set(kinds)
        remap = {}
        new_entries = []
        for e in self.zmatrix:
            if e.movable and e.kind in kinds:
                new_entries.append(replace(e, kind="fixed", torsion_index=None))
            else:
                new_entries.append(e)
        order = sorted(
            (e for e in new_entries if e.movable), key=lambda e: e.torsion_index
        )
        for new_index, e in enumerate(order):
            remap[e.torsion_index] = new_index
        new_entries = [
            replace(e, torsion_index=remap[e.torsion_index]) if e.movable else e
            for e in new_entries
        ]
        terms = tuple(
            replace(t, torsion_index=remap.get(t.torsion_index)) for t in self.torsion_terms
        )
        return replace(self, zmatrix=tuple(new_entries), torsion_terms=terms)


# ---------------------------------------------------------------------------
# loading


def _require(doc, key, kind):
    if key not in doc:
        raise ParseError(f"missing top-level key {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ParseError(f"{key!r} must be a {kind.__name__}")
    return value


def _atom_from(rec, index):
    if not isinstance(rec, dict):
        raise ParseError(f"atoms[{index}] is not an object")
    try:
        element = rec["element"]
        atom_id = int(rec.get("id", index))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"atoms[{index}]: {exc}") from None
    if element not in ELEMENTS:
        raise ValidationError(f"atom {atom_id}: unknown element {element!r}")
    if atom_id != index:
        raise ValidationError(f"atom ids must be 0..N-1 in order; got {atom_id} at position {index}")
    radius_default, eps_default = DEFAULT_LJ[element]
    atom = AtomSpec(
        id=atom_id,
        element=element,
        charge=float(rec.get("charge", 0.0)),
        lj_radius=float(rec.get("lj_radius", radius_default)),
        lj_epsilon=float(rec.get("lj_epsilon", eps_default)),
        is_acceptor=bool(rec.get("is_acceptor", False)),
        is_donor=bool(rec.get("is_donor", False)),
        is_backbone=bool(rec.get("is_backbone", False)),
    )
    if not atom.lj_radius > 0:
        raise ValidationError(f"atom {atom_id}: lj_radius must be positive")
    if not atom.lj_epsilon >= 0:
        raise ValidationError(f"atom {atom_id}: lj_epsilon must be non-negative")
    return atom


def _entry_from(rec, index):
    if not isinstance(rec, dict):
        raise ParseError(f"zmatrix[{index}] is not an object")
    try:
        frame = tuple(int(f) for f in rec["frame"])
        entry = InternalCoordEntry(
            atom=int(rec["atom"]),
            frame=frame,
            bond_length=float(rec["bond_length"]),
            bond_angle=math.radians(float(rec["bond_angle"])),
            torsion=math.radians(float(rec["torsion"])),
            kind=rec.get("kind", "fixed"),
            torsion_index=rec.get("torsion_index"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"zmatrix[{index}]: bad field {exc}") from None
    if len(frame) != 3:
        raise ParseError(f"zmatrix[{index}]: frame must name three atoms")
    return entry


def _tuple_rows(doc, key, width, index_cols):
    rows = []
    for n, row in enumerate(doc.get(key, [])):
        if not isinstance(row, (list, tuple)) or len(row) not in width:
            raise ParseError(f"{key}[{n}] must be a list of length {' or '.join(map(str, width))}")
        try:
            rows.append(
                tuple(
                    (None if v is None else int(v)) if c in index_cols else float(v)
                    for c, v in enumerate(row)
                )
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{key}[{n}]: {exc}") from None
    return rows


def topology_from_dict(doc: dict) -> MolecularTopology:
    if not isinstance(doc, dict):
        raise ParseError("molecule document must be a JSON object")
    atoms = tuple(_atom_from(rec, i) for i, rec in enumerate(_require(doc, "atoms", list)))
    n = len(atoms)
    if n < 3:
        raise ValidationError("a molecule needs at least three atoms")

    bonds = tuple(Bond(int(i), int(j), r0, k) for i, j, r0, k in _tuple_rows(doc, "bonds", (4,), (0, 1)))
    angles = tuple(
        Angle(int(i), int(j), int(k), math.radians(t0), kt)
        for i, j, k, t0, kt in _tuple_rows(doc, "angles", (5,), (0, 1, 2))
    )
    zmatrix = tuple(_entry_from(rec, i) for i, rec in enumerate(_require(doc, "zmatrix", list)))

    seeds = doc.get("seed_coords")
    try:
        seed_arr = np.asarray(seeds, dtype=float)
    except (TypeError, ValueError):
        raise ParseError("seed_coords must be three [x, y, z] rows") from None
    if seed_arr.shape != (3, 3):
        raise ParseError("seed_coords must be three [x, y, z] rows")

    g = doc.get("globals", {}) or {}
    if not isinstance(g, dict):
        raise ParseError("globals must be an object")
    cutoff = g.get("cutoff", 10.0)
    ff = ForceFieldGlobals(
        dielectric=float(g.get("dielectric", 1.0)),
        cutoff=math.inf if cutoff is None else float(cutoff),
        combine_rule=g.get("combine_rule", "radius_sum"),
    )

    zmatrix = _validate_zmatrix(zmatrix, n)
    by_index = {e.torsion_index: e for e in zmatrix if e.movable}
    terms = []
    for row in _tuple_rows(doc, "torsion_terms", (4, 5), (0, 2, 4)):
        index, amp, mult, phase = row[:4]
        if index is not None:
            if index not in by_index:
                raise ValidationError(f"torsion term references unknown torsion_index {index}")
            atom = by_index[index].atom
        elif len(row) == 5 and row[4] is not None:
            atom = row[4]
            if atom not in {e.atom for e in zmatrix}:
                raise ValidationError(f"torsion term references atom {atom} with no zmatrix entry")
        else:
            raise ValidationError("torsion term needs a torsion_index or an atom")
        terms.append(TorsionTerm(index, amp, int(mult), math.radians(phase), atom))

    top = MolecularTopology(
        atoms=atoms,
        bonds=bonds,
        angles=angles,
        torsion_terms=tuple(terms),
        zmatrix=zmatrix,
        seed_coords=tuple(tuple(float(v) for v in row) for row in seed_arr),
        globals=ff,
        exclusions=frozenset(),
    )
    top = replace(top, exclusions=_exclusions(top))
    validate(top)
    return top


def _validate_zmatrix(zmatrix, n):
    placed = {0, 1, 2}
    next_index = 0
    explicit = [e.torsion_index for e in zmatrix if e.movable and e.torsion_index is not None]
    if explicit and len(explicit) != sum(e.movable for e in zmatrix):
        raise ValidationError("torsion_index must be given for all movable entries or for none")
    out = []
    for e in zmatrix:
        if e.kind not in KINDS:
            raise ValidationError(f"atom {e.atom}: unknown kind {e.kind!r}")
        if not 0 <= e.atom < n:
            raise ValidationError(f"zmatrix names unknown atom {e.atom}")
        if e.atom in placed:
            raise ValidationError(f"atom {e.atom} is placed more than once")
        for f in e.frame:
            if f not in placed:
                raise ValidationError(
                    f"atom {e.atom}: frame atom {f} is not placed before it"
                )
        if len(set(e.frame)) != 3:
            raise ValidationError(f"atom {e.atom}: frame atoms must be distinct")
        if not e.bond_length > 0:
            raise ValidationError(f"atom {e.atom}: bond_length must be positive")
        if not 0 < e.bond_angle < math.pi:
            raise ValidationError(f"atom {e.atom}: bond_angle must lie in (0, 180) degrees")
        if e.movable and not explicit:
            e = replace(e, torsion_index=next_index)
            next_index += 1
        elif not e.movable and e.torsion_index is not None:
            raise ValidationError(f"atom {e.atom}: fixed entries carry no torsion_index")
        placed.add(e.atom)
        out.append(e)
    if len(placed) != n:
        missing = sorted(set(range(n)) - placed)
        raise ValidationError(f"atoms {missing} have no zmatrix entry")
    if explicit:
        indices = sorted(int(e.torsion_index) for e in out if e.movable)
        if indices != list(range(len(indices))):
            raise ValidationError("torsion_index values must run contiguously from 0 to M-1")
        out = [replace(e, torsion_index=int(e.torsion_index)) if e.movable else e for e in out]
    return tuple(out)


def _neighbours(top):
    nbrs = {a.id: set() for a in top.atoms}
    for b in top.bonds:
        nbrs[b.i].add(b.j)
        nbrs[b.j].add(b.i)
    return nbrs


def _exclusions(top):
    pairs = set()
    for b in top.bonds:
        pairs.add((min(b.i, b.j), max(b.i, b.j)))
    for centre, ns in _neighbours(top).items():
        ns = sorted(ns)
        for x in range(len(ns)):
            for y in range(x + 1, len(ns)):
                pairs.add((ns[x], ns[y]))
    for a in top.angles:
        pairs.add((min(a.i, a.k), max(a.i, a.k)))
    return frozenset(pairs)


def validate(top: MolecularTopology) -> None:
    """Raise ValidationError when a structural invariant does not hold."""
    n = top.n_atoms
    for b in top.bonds:
        if not (0 <= b.i < n and 0 <= b.j < n) or b.i == b.j:
            raise ValidationError(f"bond ({b.i}, {b.j}) references invalid atoms")
        if not b.r0 > 0:
            raise ValidationError(f"bond ({b.i}, {b.j}): r0 must be positive")
    for a in top.angles:
        if not all(0 <= x < n for x in (a.i, a.j, a.k)):
            raise ValidationError(f"angle ({a.i}, {a.j}, {a.k}) references invalid atoms")
    if top.globals.combine_rule not in COMBINE_RULES:
        raise ValidationError(f"unknown combine_rule {top.globals.combine_rule!r}")
    if not top.globals.cutoff > 0:
        raise ValidationError("cutoff must be positive")
    if not top.globals.dielectric > 0:
        raise ValidationError("dielectric must be positive")

    # connectivity of the bond graph
    nbrs = _neighbours(top)
    seen, stack = {0}, [0]
    while stack:
        for nb in nbrs[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        raise ValidationError(f"bond graph is disconnected; atoms {sorted(set(range(n)) - seen)} unreachable")

    missing = {(min(b.i, b.j), max(b.i, b.j)) for b in top.bonds} - top.exclusions
    if missing:
        raise ValidationError(f"bonded pairs missing from exclusions: {sorted(missing)}")
    # forces the rigid-rotation check
    top.moved_by


def load_topology(document: str) -> MolecularTopology:
    """Parse and validate a molecule document (JSON text)."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from None
    return topology_from_dict(doc)


def load_topology_file(path) -> MolecularTopology:
    with open(path) as fh:
        return load_topology(fh.read())


def bundled_molecule(name: str) -> MolecularTopology:
    """Load one of the fixtures shipped in ``pmpfold/data`` by stem name."""
    text = resources.files("pmpfold").joinpath("data", f"{name}.json").read_text()
    return load_topology(text)


def _degrees_exact(rad: float) -> float:
    """A degree value that ``math.radians`` maps back to exactly ``rad``."""
    x = math.degrees(rad)
    for _ in range(8):
        back = math.radians(x)
        if back == rad:
            return x
        x = math.nextafter(x, math.inf if back < rad else -math.inf)
    return math.degrees(rad)


def topology_to_dict(top: MolecularTopology) -> dict:
    deg = _degrees_exact
    cutoff = top.globals.cutoff
    return {
        "atoms": [
            {
                "id": a.id,
                "element": a.element,
                "charge": a.charge,
                "lj_radius": a.lj_radius,
                "lj_epsilon": a.lj_epsilon,
                "is_acceptor": a.is_acceptor,
                "is_donor": a.is_donor,
                "is_backbone": a.is_backbone,
            }
            for a in top.atoms
        ],
        "bonds": [[b.i, b.j, b.r0, b.k] for b in top.bonds],
        "angles": [[a.i, a.j, a.k, deg(a.theta0), a.k_theta] for a in top.angles],
        "torsion_terms": [
            [t.torsion_index, t.amplitude, t.multiplicity, deg(t.phase), t.atom]
            for t in top.torsion_terms
        ],
        "zmatrix": [
            {
                "atom": e.atom,
                "frame": list(e.frame),
                "bond_length": e.bond_length,
                "bond_angle": deg(e.bond_angle),
                "torsion": deg(e.torsion),
                "kind": e.kind,
                "torsion_index": e.torsion_index,
            }
            for e in top.zmatrix
        ],
        "seed_coords": [list(row) for row in top.seed_coords],
        "globals": {
            "dielectric": top.globals.dielectric,
            "cutoff": None if math.isinf(cutoff) else cutoff,
            "combine_rule": top.globals.combine_rule,
        },
    }


def dump_topology(top: MolecularTopology) -> str:
    return json.dumps(topology_to_dict(top), indent=2)


def atom_feature_matrix(top: MolecularTopology, coords) -> np.ndarray:
    """Per-atom features, one row per atom:
    ``[x, y, z, onehot(C, N, O, H, S), lj_radius, charge, acceptor, donor, backbone]``.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (top.n_atoms, 3):
        raise ValueError(f"coords must have shape ({top.n_atoms}, 3)")
    out = np.zeros((top.n_atoms, FEATURE_WIDTH))
    out[:, :3] = coords
    for row, a in enumerate(top.atoms):
        out[row, 3 + ELEMENTS.index(a.element)] = 1.0
        out[row, 8] = a.lj_radius
        out[row, 9] = a.charge
        out[row, 10] = float(a.is_acceptor)
        out[row, 11] = float(a.is_donor)
        out[row, 12] = float(a.is_backbone)
    return out
