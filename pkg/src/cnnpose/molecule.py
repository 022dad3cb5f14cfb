"""Molecular data model: typed atoms, ligand torsion trees, pose transforms and RMSD."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, FormatError, StructureError, TypingError
from .geometry import axis_angle_matrix, rotvec_to_matrix

FORMAT_VERSION = 1

# Heavy-atom element types plus boron. Radii in Angstrom.
DEFAULT_TYPES = (
    ("C", 1.9),
    ("N", 1.8),
    ("O", 1.7),
    ("S", 2.0),
    ("P", 2.1),
    ("F", 1.5),
    ("Cl", 1.8),
    ("Br", 2.0),
    ("I", 2.2),
    ("B", 1.92),
    ("Metal", 1.2),
)


class AtomTypeTable:
    """Immutable ordered mapping of atom type names to van der Waals radii."""

    def __init__(self, entries):
        entries = tuple((str(name), float(radius)) for name, radius in entries)
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ContractError(f"duplicate atom type names: {dupes}")
        for name, radius in entries:
            if not (np.isfinite(radius) and radius > 0):
                raise ContractError(f"atom type {name!r} has non-positive radius {radius}")
        self._entries = entries
        self._index = {name: i for i, name in enumerate(names)}
        self._radii = np.array([r for _, r in entries], dtype=float)
        self._radii.flags.writeable = False

    @classmethod
    def default(cls):
        return cls(DEFAULT_TYPES)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other):
        return isinstance(other, AtomTypeTable) and self._entries == other._entries

    def __hash__(self):
        return hash(self._entries)

    def __repr__(self):
        return f"AtomTypeTable({list(self._entries)!r})"

    @property
    def names(self):
        return [name for name, _ in self._entries]

    @property
    def radii(self):
        return self._radii

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise TypingError(f"unknown atom type {name!r}") from None

    def name(self, index):
        return self._entries[index][0]

    def radius(self, key):
        if isinstance(key, str):
            key = self.index(key)
        return self._entries[key][1]

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "types": [{"name": n, "vdw_radius": r} for n, r in self._entries],
        }

    @classmethod
    def from_dict(cls, doc):
        _check_version(doc, "atom type table")
        try:
            return cls((t["name"], t["vdw_radius"]) for t in doc["types"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed atom type table: {exc}") from exc


class Atom(NamedTuple):
    position: np.ndarray
    type_index: int


def _as_coords(coords):
    arr = np.asarray(coords, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected an (n, 3) coordinate array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("atom coordinates must be finite")
    return arr


class _Molecule:
    def __init__(self, coords, types, table):
        coords = _as_coords(coords).copy()
        types = np.asarray(types, dtype=np.int64).reshape(-1).copy()
        if len(types) != len(coords):
            raise ContractError(f"{len(coords)} coordinates but {len(types)} types")
        if len(types) and (types.min() < 0 or types.max() >= len(table)):
            raise ContractError("atom type index out of range for the type table")
        coords.flags.writeable = False
        types.flags.writeable = False
        self.coords = coords
        self.types = types
        self.table = table

    def __len__(self):
        return len(self.coords)

    @property
    def atoms(self):
        return [Atom(p, int(t)) for p, t in zip(self.coords, self.types)]

    def _atoms_doc(self):
        return [
            {"x": float(x), "y": float(y), "z": float(z), "type": self.table.name(t)}
            for (x, y, z), t in zip(self.coords, self.types)
        ]


class Receptor(_Molecule):
    """Fixed protein atoms. Never moved by scoring or optimization."""

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "kind": "receptor", "atoms": self._atoms_doc()}


@dataclass(frozen=True)
class RotatableBond:
    axis_from: int
    axis_to: int
    downstream: frozenset

    @property
    def downstream_index(self):
        return np.array(sorted(self.downstream), dtype=np.int64)


class Ligand(_Molecule):
    """A flexible ligand: reference conformation plus torsion tree.

    Rotatable bonds rotate their ``downstream`` atoms about the axis
    ``axis_from -> axis_to``. Downstream sets must be pairwise disjoint or
    strictly nested, and a nested bond's axis atoms must move rigidly with
    its ancestor (they lie in the ancestor's downstream set or on its axis).
    """

    def __init__(self, coords, types, table, root_atom=0, rotatable_bonds=()):
        super().__init__(coords, types, table)
        n = len(self.coords)
        if n == 0:
            raise StructureError("ligand has no atoms")
        if not 0 <= root_atom < n:
            raise StructureError(f"root_atom {root_atom} out of range for {n} atoms")
        self.root_atom = int(root_atom)
        bonds = []
        for k, bond in enumerate(rotatable_bonds):
            if not isinstance(bond, RotatableBond):
                a, b, down = bond
                bond = RotatableBond(int(a), int(b), frozenset(int(i) for i in down))
            idx = [bond.axis_from, bond.axis_to, *bond.downstream]
            if any(not 0 <= i < n for i in idx):
                raise StructureError(f"rotatable bond {k} references an atom out of range")
            if bond.axis_from == bond.axis_to:
                raise StructureError(f"rotatable bond {k} has a degenerate axis")
            if {bond.axis_from, bond.axis_to} & bond.downstream:
                raise StructureError(f"rotatable bond {k}: downstream set contains an axis atom")
            if self.root_atom in bond.downstream:
                raise StructureError(f"rotatable bond {k}: root atom is downstream")
            bonds.append(bond)
        _check_tree(bonds)
        self.rotatable_bonds = tuple(bonds)
        # leaf-to-root: nested sets are strictly smaller than their ancestors
        self.torsion_order = tuple(sorted(range(len(bonds)), key=lambda i: (len(bonds[i].downstream), i)))
        self.reference_centroid = self.coords.mean(axis=0)

    @property
    def num_torsions(self):
        return len(self.rotatable_bonds)

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "ligand",
            "atoms": self._atoms_doc(),
            "root_atom": self.root_atom,
            "rotatable_bonds": [
                {"axis": [b.axis_from, b.axis_to], "downstream": sorted(b.downstream)}
                for b in self.rotatable_bonds
            ],
        }


def _check_tree(bonds):
    for i, a in enumerate(bonds):
        for j in range(i + 1, len(bonds)):
            b = bonds[j]
            common = a.downstream & b.downstream
            if not common:
                continue
            if a.downstream < b.downstream:
                parent, child = b, a
            elif b.downstream < a.downstream:
                parent, child = a, b
            else:
                raise StructureError(f"rotatable bonds {i} and {j} have overlapping downstream sets")
            rigid = parent.downstream | {parent.axis_from, parent.axis_to}
            if not {child.axis_from, child.axis_to} <= rigid:
                raise StructureError(
                    f"rotatable bonds {i} and {j}: nested bond axis does not move with its parent")


@dataclass
class ConformationDOF:
    """Pose variables: translation (A), rotation vector (rad) about the
    reference centroid, and one torsion angle (rad) per rotatable bond."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torsions: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        self.torsions = np.asarray(self.torsions, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(self.translation)) and np.all(np.isfinite(self.rotation))
                and np.all(np.isfinite(self.torsions))):
            raise ContractError("conformation DOF components must be finite")

    @classmethod
    def zeros(cls, num_torsions):
        return cls(np.zeros(3), np.zeros(3), np.zeros(num_torsions))

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:3], vec[3:6], vec[6:])

    def to_vector(self):
        return np.concatenate([self.translation, self.rotation, self.torsions])

    def __len__(self):
        return 6 + len(self.torsions)

    def __eq__(self, other):
        return (isinstance(other, ConformationDOF)
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.torsions, other.torsions))

    def to_dict(self):
        return {
            "translation": [float(v) for v in self.translation],
            "rotation": [float(v) for v in self.rotation],
            "torsions": [float(v) for v in self.torsions],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["translation"], doc["rotation"], doc["torsions"])


def _check_dof(ligand, dof):
    if len(dof.torsions) != ligand.num_torsions:
        raise ContractError(
            f"DOF has {len(dof.torsions)} torsions, ligand has {ligand.num_torsions} rotatable bonds")


def apply_torsions(ligand, torsions):
    """Reference coordinates with torsions applied leaf-to-root."""
    coords = np.array(ligand.coords)
    for k in ligand.torsion_order:
        angle = torsions[k]
        if angle == 0.0:
            continue
        bond = ligand.rotatable_bonds[k]
        pivot = coords[bond.axis_to]
        axis = pivot - coords[bond.axis_from]
        axis = axis / np.linalg.norm(axis)
        R = axis_angle_matrix(axis, angle)
        idx = bond.downstream_index
        coords[idx] = (coords[idx] - pivot) @ R.T + pivot
    return coords


def apply_dof(ligand, dof):
    """Realize a conformation: torsions, then rotation about the reference
    centroid, then translation. Returns a new (n, 3) array."""
    _check_dof(ligand, dof)
    coords = apply_torsions(ligand, dof.torsions)
    c0 = ligand.reference_centroid
    if np.any(dof.rotation != 0.0):
        R = rotvec_to_matrix(dof.rotation)
        coords = (coords - c0) @ R.T + c0
    return coords + dof.translation


def rmsd(coords_a, coords_b):
    a = np.asarray(coords_a, dtype=float)
    b = np.asarray(coords_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ContractError(f"rmsd needs equal (n, 3) arrays, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ContractError("rmsd of empty coordinate lists")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def bounding_box(coords, padding=0.0):
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) == 0:
        raise ContractError("bounding_box needs at least one 3D coordinate")
    if padding < 0:
        raise ContractError(f"padding must be >= 0, got {padding}")
    return coords.min(axis=0) - padding, coords.max(axis=0) + padding


def _check_version(doc, what):
    if not isinstance(doc, dict):
        raise FormatError(f"{what}: expected a mapping at top level")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")


def parse_molecule(doc, table=None, kind=None):
    """Build a Ligand or Receptor from a molecule document.

    ``doc`` may be a JSON string or an already-decoded mapping. ``kind``
    overrides the document's own ``kind`` field (default ``"ligand"``).
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise FormatError(f"molecule document is not valid JSON: {exc}") from exc
    _check_version(doc, "molecule")
    table = table or AtomTypeTable.default()
    kind = kind or doc.get("kind", "ligand")
    try:
        atoms = doc["atoms"]
        coords = np.array([[a["x"], a["y"], a["z"]] for a in atoms], dtype=float).reshape(-1, 3)
        names = [a["type"] for a in atoms]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed atom record: {exc}") from exc
    types = [table.index(n) for n in names]
    if kind == "receptor":
        return Receptor(coords, types, table)
    if kind != "ligand":
        raise FormatError(f"unknown molecule kind {kind!r}")
    try:
        bonds = [(b["axis"][0], b["axis"][1], b["downstream"]) for b in doc.get("rotatable_bonds", [])]
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed rotatable bond record: {exc}") from exc
    return Ligand(coords, types, table, root_atom=doc.get("root_atom", 0), rotatable_bonds=bonds)


def load_molecule(path, table=None, kind=None):
    return parse_molecule(Path(path).read_text(), table=table, kind=kind)


def save_molecule(mol, path):
    Path(path).write_text(json.dumps(mol.to_dict(), indent=1) + "\n")


def load_type_table(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return AtomTypeTable.from_dict(doc)


def save_type_table(table, path):
    Path(path).write_text(json.dumps(table.to_dict(), indent=1) + "\n")
