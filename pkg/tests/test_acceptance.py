"""The eight acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line. Run ``pytest -v
tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py`` to see
them; the end-to-end criterion takes several minutes.
"""

import csv
import filecmp
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cnnpose.gradcheck import dof_suite, grid_suite, kernel_suite, network_suite
from cnnpose.grid import GridSpec, atom_density
from cnnpose.molecule import ConformationDOF, apply_dof, rmsd
from cnnpose.network import build_model
from cnnpose.optimizer import IMPROVEMENT_BELOW_TOLERANCE, BfgsOptions, CrystalDistanceScorer, bfgs_maximize, \
    dof_objective
from cnnpose.synthetic import make_corpus, separable_grid_dataset
from cnnpose.training import TrainConfig, accuracy, learning_rate, train

LINES = []
_capture = None


@pytest.fixture(autouse=True)
def _live_lines(request):
    """Lets ``emit`` bypass output capture so the lines show in plain ``pytest -v``."""
    global _capture
    _capture = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _capture = None


def emit(line):
    LINES.append(line)
    if _capture is None:
        print(line, flush=True)
        return
    with _capture.global_and_fixture_disabled():
        print("\n" + line, flush=True)


def report(ok, number, text):
    emit(f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}")
    return ok


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def cli(*argv, cwd=None):
    proc = subprocess.run([sys.executable, "-m", "cnnpose.cli", *argv], capture_output=True, text=True, cwd=cwd)
    assert proc.returncode == 0, proc.stderr
    return proc


def same_tree(a, b):
    """Relative paths of files that differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    fa = {p.relative_to(a) for p in a.rglob("*") if p.is_file()}
    fb = {p.relative_to(b) for p in b.rglob("*") if p.is_file()}
    diff = sorted(str(p) for p in fa ^ fb)
    diff += sorted(str(p) for p in fa & fb if not filecmp.cmp(a / p, b / p, shallow=False))
    return diff, len(fa)


def test_1_density_kernel():
    res, secs = timed(kernel_suite)
    exact = atom_density(0.0, 1.7) == 1.0
    ok = res.passed and exact and secs < 1.0
    assert report(ok, 1, f"kernel branch gaps {res.worst:.1e} < 1e-12, g(0) == 1 exactly: {exact}, {secs:.2f}s"), \
        res.line()


def test_2_grid_gradients():
    res, secs = timed(lambda: grid_suite(n_configs=100, seed=0))
    assert report(res.passed, 2, f"{res.line().split(' ', 1)[1]} ({secs:.1f}s)")


def test_3_network_gradients():
    res, secs = timed(lambda: network_suite(n_models=20, seed=0))
    assert report(res.passed and secs < 60, 3, f"{res.line().split(' ', 1)[1]} ({secs:.1f}s)")


def test_4_dof_gradients():
    res, secs = timed(lambda: dof_suite(n_ligands=12, seed=0, max_torsions=5))
    assert report(res.passed and secs < 60, 4, f"{res.line().split(' ', 1)[1]}, 0-5 torsions ({secs:.1f}s)")


def _perturbation(rng, n_tors):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= rng.uniform(0.0, 2.0) / np.linalg.norm(shift)
    limit = np.deg2rad(30.0)
    return ConformationDOF(shift, axis * rng.uniform(0.0, limit), rng.uniform(-limit, limit, n_tors))


def test_5_pose_recovery_oracle():
    def run():
        _, targets = make_corpus(10, seed=5)
        opts = BfgsOptions()
        recovered, rule_ok = 0, True
        for trial in range(100):
            rng = np.random.default_rng([5, trial])
            lig = targets[trial % len(targets)].ligand
            obj = dof_objective(lig, CrystalDistanceScorer(lig.coords))
            start = _perturbation(rng, lig.num_torsions)
            trace = bfgs_maximize(obj, start, opts)
            recovered += rmsd(apply_dof(lig, trace.x), lig.coords) < 0.01
            # stopped by the improvement rule, on the first accepted step below the tolerance
            gains = np.diff([obj(start)[0]] + trace.scores)
            rule_ok &= (trace.reason == IMPROVEMENT_BELOW_TOLERANCE and len(gains) > 0
                        and gains[-1] < opts.improvement_tolerance
                        and bool(np.all(gains[:-1] >= opts.improvement_tolerance)))
        return recovered, rule_ok

    (recovered, rule_ok), secs = timed(run)
    ok = recovered >= 95 and rule_ok and secs < 60
    assert report(ok, 5, f"{recovered}/100 perturbed poses recovered to RMSD < 0.01 A, "
                         f"improvement rule honored: {rule_ok} ({secs:.1f}s)")


def test_6_training_sanity():
    def run():
        spec = GridSpec((0.0, 0.0, 0.0), 7.0, 1.0, 2)
        ex = separable_grid_dataset(200, spec, seed=0)
        cfg = TrainConfig(base_lr=0.01, momentum=0.9, weight_decay=0.001, batch_size=50, max_iterations=500, seed=1)
        model, _ = train(build_model(spec, (8, 16, 32), seed=0), ex, cfg)
        return accuracy(model, ex), cfg

    (acc, cfg), secs = timed(run)
    lr0, lr1000 = learning_rate(cfg, 0), learning_rate(cfg, 1000)
    ok = acc >= 0.95 and lr0 == 0.01 and abs(lr1000 - 0.005) < 1e-15
    assert report(ok, 6, f"training accuracy {acc:.3f} >= 0.95 after 500 iterations, "
                         f"lr(0)={lr0:g} lr(1000)={lr1000:g} ({secs:.1f}s)")


PIPELINE_ARGS = ("--n-targets", "10", "--per-target", "50", "--rounds", "2", "--seed", "7",
                 "--edge-length", "15", "--resolution", "1", "--filters", "8", "16", "32",
                 "--max-iterations", "150", "--workers", "1")


def _read_report(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_7_end_to_end_pipeline(tmp_path):
    times = []
    for name in ("a", "b"):
        _, secs = timed(lambda: cli("pipeline", *PIPELINE_ARGS, "--log-level", "warning",
                                    "--out", str(tmp_path / name)))
        times.append(secs)
    diff, n_files = same_tree(tmp_path / "a", tmp_path / "b")
    rows = _read_report(tmp_path / "a" / "report.csv")
    methods = sorted({r["method"] for r in rows})
    partition = methods == ["CNN1", "CNN2"]
    sigma = {}
    for m in methods:
        by_cat = {r["category"]: r for r in rows if r["method"] == m}
        partition &= int(by_cat["all"]["n"]) == 500
        partition &= sum(int(by_cat[c]["n"]) for c in ("binding", "ambiguous", "non-binding")) == 500
        sigma[m] = float(by_cat["all"]["sigma"])
    grid_side = round(15 / 1) + 1
    ok = not diff and partition and max(times) < 1800 and grid_side <= 16
    assert report(ok, 7, f"pipeline --rounds 2 on 10 targets x 50 poses, {grid_side}^3 grid: "
                         f"{max(times) / 60:.1f} min per run, {n_files} files byte-identical: {not diff}, "
                         f"category counts partition: {partition}"), diff
    emit(f"REPORT criterion 7: delta-RMSD sigma CNN1 {sigma.get('CNN1', float('nan')):.3f}, "
         f"CNN2 {sigma.get('CNN2', float('nan')):.3f} (reduction "
         f"{'observed' if sigma.get('CNN2', 0) < sigma.get('CNN1', 0) else 'not observed'}; not asserted)")


def test_8_determinism(tmp_path):
    grid = ("--edge-length", "7", "--resolution", "1", "--filters", "4", "4", "4")

    def session(root, workers):
        root.mkdir()
        corpus = root / "corpus"
        manifest = ("--targets", str(corpus / "targets.json"))
        cli("synth", "--n-targets", "3", "--train-per-target", "10", "--seed", "3", "--out", str(corpus))
        cli("sample", *manifest, "--per-target", "6", "--seed", "3", "--out", str(root / "random.jsonl"),
            "--histogram", str(root / "random_hist.csv"))
        cli("train", *manifest, "--dataset", str(corpus / "training_set.jsonl"), *grid, "--batch-size", "10",
            "--max-iterations", "20", "--seed", "3", "--out", str(root / "model.bin"))
        cli("optimize", *manifest, "--model", str(root / "model.bin"), "--dataset", str(root / "random.jsonl"),
            "--workers", str(workers), "--seed", "3", "--out", str(root / "results.jsonl"))
        cli("stats", "--results", f"CNN1={root / 'results.jsonl'}", "--out", str(root / "stats"))
        cli("rasterize", *manifest, "--edge-length", "8", "--resolution", "1", "--out", str(root / "grid.bin"))
        cli("pipeline", *manifest, "--training-set", str(corpus / "training_set.jsonl"), "--per-target", "3",
            *grid, "--batch-size", "10", "--max-iterations", "10", "--bfgs-max-iterations", "5",
            "--workers", str(workers), "--seed", "3", "--out", str(root / "pipeline"))
        cli("gradcheck", "--quick", "--seed", "3", "--out", str(root / "gradcheck.txt"))

    (_, secs) = timed(lambda: (session(tmp_path / "one", 1), session(tmp_path / "two", 1),
                               session(tmp_path / "par", 2)))
    rerun, n_files = same_tree(tmp_path / "one", tmp_path / "two")
    workers, _ = same_tree(tmp_path / "one", tmp_path / "par")
    ok = not rerun and not workers
    assert report(ok, 8, f"{n_files} output files of 8 seeded commands byte-identical across reruns: "
                         f"{not rerun}, across 1 vs 2 workers: {not workers} ({secs:.0f}s)"), rerun + workers


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
