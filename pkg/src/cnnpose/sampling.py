"""Random pose generation, RMSD labelling and pose dataset files."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .geometry import rotvec_to_matrix, uniform_rotvec
from .molecule import (AtomTypeTable, ConformationDOF, _check_version, apply_dof, apply_torsions,
                       bounding_box, load_molecule, load_type_table, rmsd, save_molecule,
                       save_type_table)

BINDING = "binding"
AMBIGUOUS = "ambiguous"
NONBINDING = "non-binding"
LABELS = (BINDING, AMBIGUOUS, NONBINDING)


@dataclass(frozen=True)
class LabelThresholds:
    binding_max: float = 2.0
    nonbinding_min: float = 4.0

    def __post_init__(self):
        if not self.binding_max < self.nonbinding_min:
            raise ContractError("binding_max must be below nonbinding_min")


def label_pose(value, thresholds=LabelThresholds()):
    """binding below binding_max, non-binding above nonbinding_min, otherwise
    ambiguous (the thresholds themselves are ambiguous)."""
    if not value >= 0:
        raise ContractError(f"rmsd must be >= 0, got {value}")
    if value < thresholds.binding_max:
        return BINDING
    if value > thresholds.nonbinding_min:
        return NONBINDING
    return AMBIGUOUS


@dataclass
class Target:
    """One protein-ligand system. The grid is centered on the crystal ligand."""

    target_id: str
    receptor: object
    ligand: object
    crystal_coords: np.ndarray

    def __post_init__(self):
        self.crystal_coords = np.asarray(self.crystal_coords, dtype=float)
        if self.crystal_coords.shape != self.ligand.coords.shape:
            raise ContractError(f"target {self.target_id}: crystal coordinates do not match the ligand")

    @property
    def center(self):
        return self.crystal_coords.mean(axis=0)

    def grid_spec(self, template):
        return template.with_center(self.center)


@dataclass
class PoseRecord:
    pose_id: str
    target_id: str
    dof: ConformationDOF
    rmsd: float
    label: str
    score: float = None
    exclude_from_training: bool = False
    source: str = "random"

    def to_dict(self):
        doc = {
            "pose_id": self.pose_id,
            "target_id": self.target_id,
            "dof": self.dof.to_dict(),
            "rmsd": self.rmsd,
            "label": self.label,
            "source": self.source,
        }
        if self.score is not None:
            doc["score"] = self.score
        if self.exclude_from_training:
            doc["exclude_from_training"] = True
        return doc

    @classmethod
    def from_dict(cls, doc):
        return cls(
            pose_id=str(doc["pose_id"]),
            target_id=str(doc["target_id"]),
            dof=ConformationDOF.from_dict(doc["dof"]),
            rmsd=float(doc["rmsd"]),
            label=doc["label"],
            score=doc.get("score"),
            exclude_from_training=bool(doc.get("exclude_from_training", False)),
            source=doc.get("source", "random"),
        )


def sample_random_pose(ligand, crystal_coords, rng):
    """Uniform torsions in [-pi, pi), a uniform random orientation, and a
    translation putting the posed centroid uniformly inside the crystal
    pose's bounding box."""
    torsions = rng.uniform(-np.pi, np.pi, size=ligand.num_torsions)
    rotation = uniform_rotvec(rng)
    lo, hi = bounding_box(crystal_coords)
    target_centroid = lo + rng.random(3) * (hi - lo)
    c0 = ligand.reference_centroid
    twisted = apply_torsions(ligand, torsions).mean(axis=0)
    rotated = rotvec_to_matrix(rotation) @ (twisted - c0) + c0
    return ConformationDOF(target_centroid - rotated, rotation, torsions)


def target_rng(seed, target_index):
    return np.random.default_rng([int(seed), int(target_index)])


def make_record(target, dof, pose_id, thresholds=LabelThresholds(), source="random"):
    value = rmsd(apply_dof(target.ligand, dof), target.crystal_coords)
    return PoseRecord(pose_id, target.target_id, dof, value, label_pose(value, thresholds), source=source)


def generate_random_set(targets, per_target=500, seed=0, thresholds=LabelThresholds()):
    """``per_target`` random poses for each target. Each target draws from
    its own stream seeded by (seed, target index)."""
    if per_target < 1:
        raise ContractError(f"per_target must be >= 1, got {per_target}")
    records = []
    for t_index, target in enumerate(targets):
        rng = target_rng(seed, t_index)
        for k in range(per_target):
            dof = sample_random_pose(target.ligand, target.crystal_coords, rng)
            records.append(make_record(target, dof, f"{target.target_id}/{k}", thresholds))
    return records


def save_dataset(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_dataset(path, thresholds=LabelThresholds()):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = PoseRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed pose record: {exc}") from exc
            if rec.label not in LABELS:
                raise FormatError(f"{path}:{lineno}: unknown label {rec.label!r}")
            expected = label_pose(rec.rmsd, thresholds)
            if rec.label != expected:
                raise FormatError(
                    f"{path}:{lineno}: label {rec.label!r} contradicts rmsd {rec.rmsd} (expected {expected!r})")
            records.append(rec)
    return records


def histogram_rows(values, source_set, bin_width=0.5, lo=None, hi=None):
    """(bin_lo, bin_hi, count, source_set) rows over bins of ``bin_width``
    aligned to multiples of the width. The last bin is closed on the right."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return []
    if lo is None:
        lo = np.floor(values.min() / bin_width) * bin_width
    if hi is None:
        hi = np.floor(values.max() / bin_width) * bin_width + bin_width
    nbins = max(1, int(round((hi - lo) / bin_width)))
    edges = lo + bin_width * np.arange(nbins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i]), source_set) for i in range(nbins)]


def write_histogram(rows, path, header=("bin_lo", "bin_hi", "count", "source_set")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{row[0]:.6g}", f"{row[1]:.6g}", *row[2:]])


# -- target manifests ------------------------------------------------------

def load_targets(path):
    """Read a target manifest: a type table plus receptor/ligand documents
    per target. Paths are relative to the manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    _check_version(doc, "target manifest")
    base = path.parent
    types = doc.get("types")
    if isinstance(types, str):
        table = load_type_table(base / types)
    elif types is None:
        table = AtomTypeTable.default()
    else:
        table = AtomTypeTable.from_dict(types)
    targets = []
    for entry in doc["targets"]:
        rec = load_molecule(base / entry["receptor"], table, kind="receptor")
        lig = load_molecule(base / entry["ligand"], table, kind="ligand")
        crystal = lig.coords
        if entry.get("crystal"):
            crystal = load_molecule(base / entry["crystal"], table, kind="ligand").coords
        targets.append(Target(str(entry["id"]), rec, lig, crystal))
    return table, targets


def save_targets(table, targets, directory):
    """Write a manifest, type table and molecule files into ``directory``."""
    directory = Path(directory)
    (directory / "molecules").mkdir(parents=True, exist_ok=True)
    save_type_table(table, directory / "types.json")
    entries = []
    for t in targets:
        rec_name = f"molecules/{t.target_id}_receptor.json"
        lig_name = f"molecules/{t.target_id}_ligand.json"
        save_molecule(t.receptor, directory / rec_name)
        save_molecule(t.ligand, directory / lig_name)
        entry = {"id": t.target_id, "receptor": rec_name, "ligand": lig_name}
        if not np.array_equal(t.crystal_coords, t.ligand.coords):
            raise ContractError("save_targets expects the ligand reference to be the crystal pose")
        entries.append(entry)
    manifest = directory / "targets.json"
    manifest.write_text(json.dumps({"format_version": 1, "types": "types.json", "targets": entries},
                                   indent=1) + "\n")
    return manifest
