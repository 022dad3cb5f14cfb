import json

import numpy as np
import pytest

from cnnpose.errors import ContractError, FormatError, InputError
from cnnpose.gradcheck import central_difference, dof_suite, random_ligand
from cnnpose.grid import GridSpec
from cnnpose.molecule import AtomTypeTable, ConformationDOF, Receptor, apply_dof, rmsd
from cnnpose.network import build_model
from cnnpose.optimizer import (IMPROVEMENT_BELOW_TOLERANCE, LINE_SEARCH_FAILED, MAX_ITERATIONS, NON_FINITE,
                               BfgsOptions, CrystalDistanceScorer, OptimizationResult, assemble_dof_gradient,
                               bfgs_maximize, dof_objective, dof_vector_gradient, load_results, optimize_pose,
                               save_results)

TABLE = AtomTypeTable((("A", 1.6), ("B", 1.9)))


def random_dof(rng, n_tors, scale=1.0):
    return ConformationDOF(rng.normal(scale=scale, size=3), rng.normal(scale=0.5 * scale, size=3),
                           rng.uniform(-np.pi, np.pi, size=n_tors))


# -- assemble_dof_gradient ---------------------------------------------------------

def test_uniform_force_is_pure_translation(rng):
    lig = random_ligand(rng, TABLE, 3)
    dof = ConformationDOF(rng.normal(size=3), rng.normal(size=3), np.zeros(3))
    F = np.tile(rng.normal(size=3), (len(lig), 1))
    g = assemble_dof_gradient(F, lig, dof)
    assert np.allclose(g.translation, len(lig) * F[0], atol=1e-12)
    assert np.allclose(g.rotation, 0.0, atol=1e-12)


def test_upstream_atoms_do_not_drive_torsions(rng):
    lig = random_ligand(rng, TABLE, 2)
    dof = random_dof(rng, 2)
    F = rng.normal(size=(len(lig), 3))
    F[sorted(lig.rotatable_bonds[0].downstream)] = 0.0
    g = assemble_dof_gradient(F, lig, dof)
    assert g.torsions[0] == 0.0


def test_dof_gradient_matches_finite_differences():
    result = dof_suite(n_ligands=2, seed=5)
    assert result.passed, result.line()


def test_oracle_score_dof_gradient_matches_finite_differences(rng):
    for n_tors in range(6):
        lig = random_ligand(rng, TABLE, n_tors)
        obj = dof_objective(lig, CrystalDistanceScorer(lig.coords + rng.normal(scale=0.3, size=lig.coords.shape)))
        dof = random_dof(rng, n_tors)
        _, analytic = obj(dof)
        numeric = central_difference(lambda v: obj(ConformationDOF.from_vector(v))[0], dof.to_vector(), 1e-5)
        assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


def test_internal_geometry_score_has_no_rigid_gradient(rng):
    def pairwise(coords):
        diff = coords[:, None] - coords[None]
        d2 = np.sum(diff * diff, axis=-1)
        score = float(np.sum(np.sin(d2))) / 2
        grad = 2.0 * np.sum(np.cos(d2)[..., None] * diff, axis=1)
        return score, grad

    lig = random_ligand(rng, TABLE, 3)
    dof = random_dof(rng, 3)
    _, g = dof_objective(lig, pairwise)(dof)
    assert np.allclose(g[:6], 0.0, atol=1e-9)
    assert np.abs(g[6:]).max() > 1e-3


def test_rotation_gradient_uses_left_jacobian(rng):
    lig = random_ligand(rng, TABLE, 0)
    dof = random_dof(rng, 0, scale=2.0)
    F = rng.normal(size=(len(lig), 3))
    raw = assemble_dof_gradient(F, lig, dof)
    at_zero = dof_vector_gradient(raw, ConformationDOF(dof.translation, np.zeros(3), []))
    assert np.array_equal(at_zero[3:6], raw.rotation)


def test_gradient_shape_mismatch(rng):
    lig = random_ligand(rng, TABLE, 1)
    with pytest.raises(ContractError):
        assemble_dof_gradient(np.zeros((2, 3)), lig, ConformationDOF.zeros(1))


# -- BFGS ------------------------------------------------------------------------

def test_concave_quadratic_converges(rng):
    target = rng.normal(size=5)
    trace = bfgs_maximize(lambda x: (-float((x - target) @ (x - target)), -2 * (x - target)), rng.normal(size=5))
    assert np.abs(trace.x - target).max() < 1e-6
    assert trace.reason == IMPROVEMENT_BELOW_TOLERANCE


def test_flat_start_stops_immediately():
    trace = bfgs_maximize(lambda x: (3.0, np.zeros_like(x)), np.ones(4))
    assert trace.steps <= 1
    assert trace.reason == IMPROVEMENT_BELOW_TOLERANCE


def banana(v):
    x, y = v
    f = -((1 - x) ** 2 + 10 * (y - x * x) ** 2)
    g = np.array([2 * (1 - x) + 40 * x * (y - x * x), -20 * (y - x * x)])
    return f, g


def test_banana_matches_dense_grid_search():
    xs = np.linspace(-2, 2, 801)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    F = -((1 - X) ** 2 + 10 * (Y - X * X) ** 2)
    best = F.max()
    trace = bfgs_maximize(banana, np.array([-1.2, 1.0]), BfgsOptions(improvement_tolerance=1e-12))
    assert abs(trace.score - best) < 1e-8


def test_accepted_scores_never_decrease(rng):
    trace = bfgs_maximize(banana, np.array([-1.2, 1.0]))
    steps = [banana(np.array([-1.2, 1.0]))[0]] + trace.scores
    assert all(b >= a for a, b in zip(steps, steps[1:]))
    assert trace.reason == IMPROVEMENT_BELOW_TOLERANCE
    # the final step's improvement is what stopped the run
    assert steps[-1] - steps[-2] < 1e-5
    assert all(b - a >= 1e-5 for a, b in zip(steps[:-2], steps[1:-1]))


def test_non_finite_start_is_input_error():
    with pytest.raises(InputError):
        bfgs_maximize(lambda x: (np.nan, np.zeros_like(x)), np.zeros(2))


def test_non_finite_mid_run_terminates():
    def f(x):
        if x[0] > 0.5:
            return np.inf, np.ones_like(x)
        return float(x[0]), np.array([1.0, 0.0])

    trace = bfgs_maximize(f, np.zeros(2))
    assert trace.reason == NON_FINITE


def test_wrong_gradient_fails_line_search():
    trace = bfgs_maximize(lambda x: (-float(x @ x), 2 * x), np.ones(2))
    assert trace.reason == LINE_SEARCH_FAILED
    assert trace.steps == 0


def test_unbounded_score_hits_max_iterations():
    trace = bfgs_maximize(lambda x: (float(x.sum()), np.ones_like(x)), np.zeros(3), BfgsOptions(max_iterations=7))
    assert trace.reason == MAX_ITERATIONS and trace.steps == 7


def test_options_validation():
    with pytest.raises(ValueError):
        BfgsOptions(improvement_tolerance=0)
    with pytest.raises(ValueError):
        BfgsOptions(max_iterations=0)
    with pytest.raises(ValueError):
        BfgsOptions.from_dict({"nope": 1})


def test_diagonal_scale_finds_the_same_optimum(rng):
    target = rng.normal(size=4)
    opts = BfgsOptions(scale=(1.0, 2.0, 0.5, 3.0), improvement_tolerance=1e-12)
    trace = bfgs_maximize(lambda x: (-float((x - target) @ (x - target)), -2 * (x - target)), np.zeros(4), opts)
    assert np.abs(trace.x - target).max() < 1e-6


# -- optimize_pose ------------------------------------------------------------------

def perturbation(rng, n_tors):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, 2.0) / np.linalg.norm(t)
    return ConformationDOF(t, axis * rng.uniform(0, np.deg2rad(30)), rng.uniform(-np.deg2rad(30), np.deg2rad(30), n_tors))


def test_oracle_score_recovers_crystal_pose(rng):
    lig = random_ligand(rng, TABLE, 3)
    crystal = lig.coords
    for _ in range(5):
        res = optimize_pose(CrystalDistanceScorer(crystal), None, lig, crystal, perturbation(rng, 3))
        assert res.final_rmsd < 0.01
        assert res.delta_rmsd == res.final_rmsd - res.initial_rmsd


def setup_cnn(rng, n_tors=2):
    spec = GridSpec((0.0, 0.0, 0.0), 15.0, 1.0, 2)
    lig = random_ligand(rng, TABLE, n_tors)
    rec = Receptor(rng.uniform(-6, 6, size=(25, 3)), rng.integers(0, 2, size=25), TABLE)
    return spec, lig, rec


def test_constant_model_leaves_pose_unchanged(rng):
    spec, lig, rec = setup_cnn(rng)
    model = build_model(spec, (2, 2, 2), seed=0)
    for _, _, p in model.parameters():
        p[:] = 0.0
    start = random_dof(rng, 2, scale=0.5)
    res = optimize_pose(model, rec, lig, lig.coords, start, spec=spec)
    assert res.final_dof == start
    assert res.delta_rmsd == 0.0
    assert res.final_score == res.initial_score == 0.5


def test_cnn_optimization_never_lowers_the_score(rng):
    spec, lig, rec = setup_cnn(rng)
    model = build_model(spec, (4, 4, 6), seed=1)
    for _, name, p in model.parameters():
        if name == "b":
            p[:] = rng.normal(scale=0.05, size=p.shape)
    for mode in ("probability", "logit"):
        res = optimize_pose(model, rec, lig, lig.coords, random_dof(rng, 2, scale=0.5), mode=mode, spec=spec)
        assert res.final_score >= res.initial_score
        again = optimize_pose(model, rec, lig, lig.coords, res.initial_dof, mode=mode, spec=spec)
        assert again.to_dict() == res.to_dict()


def test_cnn_requires_a_grid_spec(rng):
    spec, lig, rec = setup_cnn(rng)
    with pytest.raises(ContractError):
        optimize_pose(build_model(spec, (2, 2, 2)), rec, lig, lig.coords, ConformationDOF.zeros(2))


def test_leaving_the_grid_is_recorded(rng):
    lig = random_ligand(rng, TABLE, 0)
    spec = GridSpec(tuple(lig.reference_centroid), 4.0, 1.0, 2)
    far = lig.coords + np.array([10.0, 0.0, 0.0])
    res = optimize_pose(CrystalDistanceScorer(far), None, lig, lig.coords, ConformationDOF.zeros(0), spec=spec)
    assert res.left_grid
    assert res.final_rmsd == pytest.approx(10.0, abs=1e-3)


def test_result_file_round_trip(tmp_path, rng):
    lig = random_ligand(rng, TABLE, 1)
    res = [optimize_pose(CrystalDistanceScorer(lig.coords), None, lig, lig.coords, perturbation(rng, 1),
                         pose_id=f"p{i}", target_id="t") for i in range(3)]
    save_results(res, tmp_path / "r.jsonl")
    loaded = load_results(tmp_path / "r.jsonl")
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in res]
    doc = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert doc["delta_rmsd"] == res[0].delta_rmsd


def test_malformed_result_line_reports_line_number(tmp_path):
    good = OptimizationResult("p", "t", ConformationDOF.zeros(0), ConformationDOF.zeros(0), 0.0, 0.0, 1.0, 1.0, 0,
                              IMPROVEMENT_BELOW_TOLERANCE)
    (tmp_path / "r.jsonl").write_text(json.dumps(good.to_dict()) + "\n{broken\n")
    with pytest.raises(FormatError, match=":2:"):
        load_results(tmp_path / "r.jsonl")
