"""Procedurally generated receptor/ligand systems for desk-scale runs.

Ligands are short flexible chains; receptors are a shell of atoms lining a
pocket shaped around the ligand's crystal pose. Receptor and ligand atoms
use separate type names so the network sees them in different channels.
"""

import numpy as np

from .geometry import axis_angle_matrix, rotvec_to_matrix, uniform_rotvec
from .grid import GridSpec, rasterize_atoms
from .molecule import AtomTypeTable, ConformationDOF, Ligand, Receptor
from .network import BINDING, NONBINDING
from .sampling import LabelThresholds, Target, make_record, sample_random_pose, target_rng
from .training import GridExample

SYNTHETIC_TYPES = (
    ("RC", 1.9),
    ("RN", 1.8),
    ("RO", 1.7),
    ("RS", 2.0),
    ("LC", 1.9),
    ("LN", 1.8),
    ("LO", 1.7),
)


def _chain(n, rng, bond=1.5, angle=np.deg2rad(111.0)):
    pts = [np.zeros(3), np.array([bond, 0.0, 0.0])]
    prev_dir = np.array([1.0, 0.0, 0.0])
    normal = np.array([0.0, 0.0, 1.0])
    for _ in range(n - 2):
        # bend away from the previous bond, then spin about it by a random dihedral
        d = axis_angle_matrix(normal, np.pi - angle) @ prev_dir
        d = axis_angle_matrix(prev_dir, rng.uniform(-np.pi, np.pi)) @ d
        normal = np.cross(prev_dir, d)
        normal /= np.linalg.norm(normal)
        pts.append(pts[-1] + bond * d)
        prev_dir = d
    return np.array(pts)


def make_ligand(table, rng, min_atoms=6, max_atoms=10, max_torsions=3):
    n = int(rng.integers(min_atoms, max_atoms + 1))
    coords = _chain(n, rng)
    # keep chains that do not fold back onto themselves
    for _ in range(50):
        d = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
        if np.all(d[np.triu_indices(n, 2)] > 2.2):
            break
        coords = _chain(n, rng)
    lig_types = [table.index(t) for t in ("LC", "LN", "LO")]
    types = rng.choice(lig_types, size=n, p=(0.6, 0.2, 0.2))
    k = int(rng.integers(1, max_torsions + 1))
    starts = sorted(rng.choice(np.arange(1, n - 2), size=min(k, n - 3), replace=False))
    bonds = [(int(i), int(i + 1), range(int(i) + 2, n)) for i in starts]
    return Ligand(coords, types, table, root_atom=0, rotatable_bonds=bonds)


def make_pocket(ligand_coords, table, rng, n_atoms=70, shell=(3.3, 5.5), spacing=2.6):
    center = ligand_coords.mean(axis=0)
    radius = np.max(np.linalg.norm(ligand_coords - center, axis=1)) + shell[1]
    rec_types = [table.index(t) for t in ("RC", "RN", "RO", "RS")]
    pts = []
    for _ in range(20000):
        if len(pts) == n_atoms:
            break
        p = center + rng.uniform(-radius, radius, size=3)
        dmin = np.min(np.linalg.norm(ligand_coords - p, axis=1))
        if not shell[0] <= dmin <= shell[1]:
            continue
        if pts and np.min(np.linalg.norm(np.array(pts) - p, axis=1)) < spacing:
            continue
        pts.append(p)
    types = rng.choice(rec_types, size=len(pts), p=(0.5, 0.2, 0.2, 0.1))
    return Receptor(np.array(pts).reshape(-1, 3), types, table)


def make_corpus(n_targets=10, seed=0):
    """Return (type_table, targets). The ligand reference conformation of
    every target is its crystal pose, placed at a random orientation and
    position."""
    table = AtomTypeTable(SYNTHETIC_TYPES)
    targets = []
    for i in range(n_targets):
        rng = np.random.default_rng([int(seed), 1_000_003, i])
        lig = make_ligand(table, rng)
        R = rotvec_to_matrix(uniform_rotvec(rng))
        placed = (lig.coords - lig.coords.mean(axis=0)) @ R.T + rng.uniform(-20.0, 20.0, size=3)
        lig = Ligand(placed, lig.types, table, lig.root_atom, lig.rotatable_bonds)
        rec = make_pocket(lig.coords, table, rng)
        targets.append(Target(f"syn{i:03d}", rec, lig, lig.coords))
    return table, targets


def near_native_dof(ligand, rng, translation_sigma=0.7, max_angle=np.deg2rad(25.0), torsion_sigma=0.35):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return ConformationDOF(
        rng.normal(scale=translation_sigma, size=3),
        axis * rng.uniform(0.0, max_angle),
        rng.normal(scale=torsion_sigma, size=ligand.num_torsions),
    )


def make_training_set(targets, per_target=20, seed=0, thresholds=LabelThresholds(), decoy_shift=4.0):
    """Stand-in for docked training poses: half near-native perturbations of
    the crystal pose, half random decoys (centroid up to ``decoy_shift`` A
    outside the crystal bounding box), labelled by RMSD."""
    records = []
    for t_index, target in enumerate(targets):
        rng = target_rng(seed + 7919, t_index)
        for k in range(per_target):
            if k % 2 == 0:
                dof = near_native_dof(target.ligand, rng)
            else:
                dof = sample_random_pose(target.ligand, target.crystal_coords, rng)
                dof.translation = dof.translation + rng.uniform(-decoy_shift, decoy_shift, size=3)
            records.append(make_record(target, dof, f"{target.target_id}/train{k}", thresholds,
                                       source="docked"))
    return records


def separable_grid_dataset(n_examples=200, spec=None, seed=0, noise=0.05):
    """Two-class grid examples that a small network can fit: binding
    examples carry a density blob in channel 0, non-binding ones in channel
    1, at a random position, on top of uniform noise in both channels."""
    spec = spec or GridSpec((0.0, 0.0, 0.0), 7.0, 1.0, 2)
    rng = np.random.default_rng(seed)
    radii = np.full(spec.channel_count, 1.8)
    half = spec.edge_length / 2
    examples = []
    for k in range(n_examples):
        label = BINDING if k % 2 == 0 else NONBINDING
        values = rng.uniform(0.0, noise, size=spec.shape)
        centers = np.asarray(spec.center) + rng.uniform(-half / 2, half / 2, size=(2, 3))
        rasterize_atoms(centers, [label, label], radii, spec, out=values)
        examples.append(GridExample(values, label))
    return examples
