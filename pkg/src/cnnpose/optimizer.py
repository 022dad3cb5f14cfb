"""Local pose optimization: atom gradients -> DOF gradients -> BFGS ascent."""

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, InputError
from .geometry import left_jacobian
from .grid import grid_backward, rasterize_atoms
from .molecule import ConformationDOF, apply_dof, rmsd
from .network import BINDING, class_output_gradient, forward

IMPROVEMENT_BELOW_TOLERANCE = "improvement below tolerance"
LINE_SEARCH_FAILED = "line search failed"
MAX_ITERATIONS = "max iterations"
NON_FINITE = "non-finite value"


@dataclass
class DofGradient:
    """Score gradient in pose space. ``rotation`` is the torque about the
    rotation pivot (the reference centroid carried along by the pose)."""

    translation: np.ndarray
    rotation: np.ndarray
    torsions: np.ndarray

    def to_vector(self):
        return np.concatenate([self.translation, self.rotation, self.torsions])


def assemble_dof_gradient(atom_grads, ligand, dof, coords=None):
    """Project per-atom forces onto translation, rotation and torsions.

    ``coords`` are the posed coordinates for ``dof`` (recomputed if None).
    """
    F = np.asarray(atom_grads, dtype=float)
    if F.shape != (len(ligand), 3):
        raise ContractError(f"atom gradients shape {F.shape} != ({len(ligand)}, 3)")
    if coords is None:
        coords = apply_dof(ligand, dof)
    pivot = ligand.reference_centroid + dof.translation
    trans = F.sum(axis=0)
    torque = np.cross(coords - pivot, F).sum(axis=0)
    tors = np.zeros(ligand.num_torsions)
    for k, bond in enumerate(ligand.rotatable_bonds):
        p = coords[bond.axis_to]
        u = p - coords[bond.axis_from]
        u = u / np.linalg.norm(u)
        idx = bond.downstream_index
        tors[k] = u @ np.cross(coords[idx] - p, F[idx]).sum(axis=0)
    return DofGradient(trans, torque, tors)


def dof_vector_gradient(grad, dof):
    """Gradient with respect to the flat (translation, rotation vector,
    torsions) parameterization. The torque maps through the transposed
    left Jacobian of the rotation vector; at zero rotation they coincide."""
    rot = left_jacobian(dof.rotation).T @ grad.rotation
    return np.concatenate([grad.translation, rot, grad.torsions])


@dataclass
class BfgsOptions:
    improvement_tolerance: float = 1e-5
    max_iterations: int = 100
    backtrack_factor: float = 0.5
    sufficient_increase: float = 1e-4
    max_backtracks: int = 20
    scale: tuple = None  # optional diagonal pre-scaling of the variables

    def __post_init__(self):
        if not self.improvement_tolerance > 0:
            raise ConfigurationError("improvement_tolerance must be > 0")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not 0 < self.backtrack_factor < 1:
            raise ConfigurationError("backtrack_factor must be in (0, 1)")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown BFGS option keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class BfgsTrace:
    x: np.ndarray
    score: float
    gradient: np.ndarray
    steps: int
    reason: str
    scores: list = field(default_factory=list)  # score after each accepted step
    evaluations: int = 0


def bfgs_maximize(score_and_gradient, start, opts=None, callback=None):
    """Maximize a smooth function with BFGS and backtracking line search.

    ``score_and_gradient(x)`` returns ``(score, gradient)``. If ``start`` is
    a ConformationDOF the callable receives ConformationDOF values and the
    returned trace's ``x`` is a ConformationDOF too.
    Stops when one accepted step improves the score by less than
    ``opts.improvement_tolerance``, when the line search cannot find a
    sufficient increase, or after ``opts.max_iterations`` steps.
    """
    opts = opts or BfgsOptions()
    as_dof = isinstance(start, ConformationDOF)
    x0 = start.to_vector() if as_dof else np.asarray(start, dtype=float).copy()
    scale = np.ones_like(x0) if opts.scale is None else np.asarray(opts.scale, dtype=float)
    evaluations = 0

    def fg(z):
        nonlocal evaluations
        evaluations += 1
        x = z * scale
        s, g = score_and_gradient(ConformationDOF.from_vector(x) if as_dof else x)
        g = np.asarray(g.to_vector() if isinstance(g, (DofGradient, ConformationDOF)) else g, dtype=float)
        return float(s), g * scale

    def result(z, s, g, steps, reason, scores):
        x = z * scale
        return BfgsTrace(ConformationDOF.from_vector(x) if as_dof else x, s, g / scale, steps,
                         reason, scores, evaluations)

    z = x0 / scale
    f, g = fg(z)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise InputError("score or gradient is not finite at the starting point")
    n = len(z)
    H = np.eye(n)
    bad_curvature = 0
    scores = []
    for step in range(1, opts.max_iterations + 1):
        d = H @ g  # ascent direction
        slope = g @ d
        alpha = 1.0
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            z_new = z + alpha * d
            f_new, g_new = fg(z_new)
            if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
                return result(z, f, g, step - 1, NON_FINITE, scores)
            if f_new >= f + opts.sufficient_increase * alpha * slope:
                accepted = True
                break
            alpha *= opts.backtrack_factor
        if not accepted:
            return result(z, f, g, step - 1, LINE_SEARCH_FAILED, scores)
        s = z_new - z
        y = g - g_new  # gradient change of the negated score
        improvement = f_new - f
        z, f, g = z_new, f_new, g_new
        scores.append(f)
        if callback is not None:
            callback(z * scale)
        if improvement < opts.improvement_tolerance:
            return result(z, f, g, step, IMPROVEMENT_BELOW_TOLERANCE, scores)
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            bad_curvature = 0
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * (y @ Hy) + rho) * np.outer(s, s))
        else:
            bad_curvature += 1
            if bad_curvature >= 3:
                H = np.eye(n)
                bad_curvature = 0
    return result(z, f, g, opts.max_iterations, MAX_ITERATIONS, scores)


# -- scoring functions over atom coordinates ------------------------------

class CnnAtomScorer:
    """Scores posed ligand coordinates with a network: returns the selected
    class output and its gradient with respect to each ligand atom."""

    def __init__(self, model, receptor, ligand_types, spec, mode="probability", class_index=BINDING):
        self.model = model
        self.ligand_types = np.asarray(ligand_types)
        self.spec = spec
        self.mode = mode
        self.class_index = class_index
        self.radii = receptor.table.radii
        # the receptor never moves: rasterize it once, add ligand atoms per call
        self.receptor_grid = rasterize_atoms(receptor.coords, receptor.types, self.radii, spec)

    def __call__(self, coords):
        values = rasterize_atoms(coords, self.ligand_types, self.radii, self.spec,
                                 out=self.receptor_grid.copy())
        state = forward(self.model, values)
        score, dgrid = class_output_gradient(self.model, values, self.class_index, self.mode, state=state)
        return score, grid_backward(dgrid, coords, self.ligand_types, self.spec, self.radii)


class CrystalDistanceScorer:
    """Analytic score -sum |a_i - crystal_i|^2, maximal at the crystal pose."""

    def __init__(self, crystal_coords):
        self.crystal = np.asarray(crystal_coords, dtype=float)

    def __call__(self, coords):
        diff = coords - self.crystal
        return -float(np.sum(diff * diff)), -2.0 * diff


def dof_objective(ligand, atom_scorer):
    """Wrap a coordinate scorer as score_and_gradient over ConformationDOF."""

    def score_and_gradient(dof):
        coords = apply_dof(ligand, dof)
        score, atom_grads = atom_scorer(coords)
        grad = assemble_dof_gradient(atom_grads, ligand, dof, coords)
        return score, dof_vector_gradient(grad, dof)

    return score_and_gradient


@dataclass
class OptimizationResult:
    pose_id: str
    target_id: str
    initial_dof: ConformationDOF
    final_dof: ConformationDOF
    initial_score: float
    final_score: float
    initial_rmsd: float
    final_rmsd: float
    steps: int
    reason: str
    left_grid: bool = False
    evaluations: int = 0

    @property
    def delta_rmsd(self):
        return self.final_rmsd - self.initial_rmsd

    def to_dict(self):
        return {
            "pose_id": self.pose_id,
            "target_id": self.target_id,
            "initial_dof": self.initial_dof.to_dict(),
            "final_dof": self.final_dof.to_dict(),
            "initial_score": self.initial_score,
            "final_score": self.final_score,
            "initial_rmsd": self.initial_rmsd,
            "final_rmsd": self.final_rmsd,
            "delta_rmsd": self.delta_rmsd,
            "steps": self.steps,
            "reason": self.reason,
            "left_grid": self.left_grid,
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            pose_id=doc["pose_id"],
            target_id=doc["target_id"],
            initial_dof=ConformationDOF.from_dict(doc["initial_dof"]),
            final_dof=ConformationDOF.from_dict(doc["final_dof"]),
            initial_score=doc["initial_score"],
            final_score=doc["final_score"],
            initial_rmsd=doc["initial_rmsd"],
            final_rmsd=doc["final_rmsd"],
            steps=doc["steps"],
            reason=doc["reason"],
            left_grid=doc.get("left_grid", False),
            evaluations=doc.get("evaluations", 0),
        )


def optimize_pose(model, receptor, ligand, crystal_coords, start_dof, opts=None, mode="probability",
                  spec=None, pose_id="", target_id=""):
    """Optimize one ligand pose to a local maximum of the binding output.

    ``model`` is a NetworkModel (scored on ``spec``, the lattice fixed at
    the binding site) or any callable mapping posed coordinates to
    ``(score, atom_gradients)``.
    """
    if callable(model):
        scorer = model
    else:
        if spec is None:
            raise ContractError("a GridSpec is required to score with a network")
        scorer = CnnAtomScorer(model, receptor, ligand.types, spec, mode)
    objective = dof_objective(ligand, scorer)
    left = False

    def outside(x):
        return spec is not None and not spec.contains(apply_dof(ligand, ConformationDOF.from_vector(x)).mean(axis=0))

    def watch(x):
        nonlocal left
        left = left or outside(x)

    initial_score, _ = objective(start_dof)
    watch(start_dof.to_vector())
    trace = bfgs_maximize(objective, start_dof, opts, callback=watch)
    crystal = np.asarray(crystal_coords, dtype=float)
    return OptimizationResult(
        pose_id=pose_id,
        target_id=target_id,
        initial_dof=start_dof,
        final_dof=trace.x,
        initial_score=float(initial_score),
        final_score=trace.score,
        initial_rmsd=rmsd(apply_dof(ligand, start_dof), crystal),
        final_rmsd=rmsd(apply_dof(ligand, trace.x), crystal),
        steps=trace.steps,
        reason=trace.reason,
        left_grid=left,
        evaluations=trace.evaluations,
    )


def save_results(results, path):
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_results(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(OptimizationResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed result record: {exc}") from exc
    return out
