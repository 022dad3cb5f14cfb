"""Iterative train -> optimize -> extend rounds and the delta-RMSD reports."""

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigurationError
from .grid import GridSpec
from .molecule import apply_dof
from .network import BINDING as CLASS_BINDING
from .network import NONBINDING as CLASS_NONBINDING
from .network import build_model, load_model, save_model
from .optimizer import BfgsOptions, OptimizationResult, load_results, optimize_pose, save_results
from .sampling import (AMBIGUOUS, BINDING, NONBINDING, LabelThresholds, PoseRecord, histogram_rows,
                       label_pose, load_dataset, save_dataset)
from .training import TrainConfig, TrainExample, train, write_loss_trace

log = logging.getLogger(__name__)

CATEGORIES = ("all", BINDING, AMBIGUOUS, NONBINDING)


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PipelineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    bfgs: BfgsOptions = field(default_factory=BfgsOptions)
    thresholds: LabelThresholds = field(default_factory=LabelThresholds)
    edge_length: float = 24.0
    resolution: float = 0.5
    filters: tuple = (32, 64, 128)
    mode: str = "probability"
    seed: int = 0
    rounds: int = 2

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.mode not in ("probability", "logit"):
            raise ConfigurationError(f"mode must be 'probability' or 'logit', got {self.mode!r}")
        self.filters = tuple(int(f) for f in self.filters)

    def grid_template(self, channel_count):
        return GridSpec((0.0, 0.0, 0.0), self.edge_length, self.resolution, channel_count)

    def to_dict(self):
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["train"] = self.train.to_dict()
        doc["bfgs"] = self.bfgs.to_dict()
        doc["thresholds"] = {"binding_max": self.thresholds.binding_max,
                             "nonbinding_min": self.thresholds.nonbinding_min}
        doc["filters"] = list(self.filters)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "train" in doc:
            doc["train"] = TrainConfig.from_dict(doc["train"])
        if "bfgs" in doc:
            doc["bfgs"] = BfgsOptions.from_dict(doc["bfgs"])
        if "thresholds" in doc:
            doc["thresholds"] = LabelThresholds(**doc["thresholds"])
        return cls(**doc)


# -- training set assembly -------------------------------------------------

def extend_training_set(original, optimized, thresholds=LabelThresholds(), tag="opt"):
    """Original records plus every optimized final pose, relabelled by its
    final RMSD. Ambiguous additions stay in the set but are flagged so they
    are never used in training batches."""
    extended = list(original)
    for r in optimized:
        label = label_pose(r.final_rmsd, thresholds)
        extended.append(PoseRecord(
            pose_id=f"{r.pose_id}#{tag}",
            target_id=r.target_id,
            dof=r.final_dof,
            rmsd=r.final_rmsd,
            label=label,
            score=r.final_score,
            exclude_from_training=label == AMBIGUOUS,
            source=tag,
        ))
    return extended


def records_to_examples(records, targets, template):
    """Training examples for every usable record (ambiguous or flagged
    records are skipped)."""
    by_id = {t.target_id: t for t in targets}
    examples = []
    for rec in records:
        if rec.exclude_from_training or rec.label == AMBIGUOUS:
            continue
        t = by_id[rec.target_id]
        examples.append(TrainExample(
            receptor=t.receptor,
            ligand_coords=apply_dof(t.ligand, rec.dof),
            ligand_types=t.ligand.types,
            label=CLASS_BINDING if rec.label == BINDING else CLASS_NONBINDING,
            spec=t.grid_spec(template),
        ))
    return examples


# -- optimization fan-out --------------------------------------------------

_worker_state = {}


def _init_worker(model, targets, template, opts, mode):
    _worker_state.update(model=model, targets={t.target_id: t for t in targets},
                         template=template, opts=opts, mode=mode)


def _optimize_record(rec):
    st = _worker_state
    t = st["targets"][rec.target_id]
    return optimize_pose(st["model"], t.receptor, t.ligand, t.crystal_coords, rec.dof, st["opts"],
                         st["mode"], spec=t.grid_spec(st["template"]), pose_id=rec.pose_id,
                         target_id=t.target_id)


def optimize_records(model, targets, records, config, workers=1):
    """Optimize every record's pose; results come back in input order."""
    template = config.grid_template(len(targets[0].receptor.table))
    args = (model, targets, template, config.bfgs, config.mode)
    if workers <= 1 or len(records) < 2:
        _init_worker(*args)
        return [_optimize_record(r) for r in records]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=args) as pool:
        return list(pool.map(_optimize_record, records, chunksize=max(1, len(records) // (4 * workers))))


# -- statistics -------------------------------------------------------------

@dataclass
class CategoryStats:
    n: int
    mean: float = None
    sem: float = None
    sigma: float = None


@dataclass
class IterationReport:
    method: str
    rows: dict  # category -> CategoryStats

    def csv_rows(self):
        out = []
        for cat in CATEGORIES:
            s = self.rows[cat]
            out.append([self.method, cat, s.n, _fmt(s.mean), _fmt(s.sem), _fmt(s.sigma)])
        return out


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def _stats(values):
    n = len(values)
    if n == 0:
        return CategoryStats(0)
    mean = math.fsum(values) / n
    if n == 1:
        return CategoryStats(1, mean)
    sigma = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    return CategoryStats(n, mean, sigma / math.sqrt(n), sigma)


def delta_rmsd_stats(results, thresholds=LabelThresholds(), method=""):
    """Mean delta-RMSD, SEM and sample standard deviation (n - 1), over all
    poses and per initial-RMSD category."""
    groups = {cat: [] for cat in CATEGORIES}
    for r in results:
        d = r.delta_rmsd
        groups["all"].append(d)
        groups[label_pose(r.initial_rmsd, thresholds)].append(d)
    return IterationReport(method, {cat: _stats(vals) for cat, vals in groups.items()})


@dataclass
class Comparison:
    reports: list
    histogram: list  # (method, bin_lo, bin_hi, count)
    scatter: list  # (method, pose_id, initial_rmsd, delta_rmsd)

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_report(self.reports, directory / "report.csv")
        with open(directory / "histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "bin_lo", "bin_hi", "count"])
            for m, lo, hi, c in self.histogram:
                w.writerow([m, f"{lo:.6g}", f"{hi:.6g}", c])
        with open(directory / "scatter.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "pose_id", "initial_rmsd", "delta_rmsd"])
            for m, pid, init, delta in self.scatter:
                w.writerow([m, pid, f"{init:.6f}", f"{delta:.6f}"])


def write_report(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "category", "n", "mean_delta_rmsd", "sem", "sigma"])
        for rep in reports:
            w.writerows(rep.csv_rows())


def compare_methods(result_sets, thresholds=LabelThresholds(), bin_width=0.5):
    """Table, histogram and scatter data for named result sets that must all
    cover the same poses."""
    names = list(result_sets)
    id_sets = {name: {r.pose_id for r in result_sets[name]} for name in names}
    if names:
        union = set().union(*id_sets.values())
        missing = set()
        for name in names:
            missing |= {f"{name}:{pid}" for pid in union - id_sets[name]}
        if missing:
            raise AlignmentError(f"result sets cover different poses; missing: {sorted(missing)}", missing)
    reports = [delta_rmsd_stats(result_sets[n], thresholds, n) for n in names]
    deltas = [r.delta_rmsd for n in names for r in result_sets[n]]
    histogram = []
    if deltas:
        lo = math.floor(min(deltas) / bin_width) * bin_width
        hi = math.floor(max(deltas) / bin_width) * bin_width + bin_width
        for n in names:
            rows = histogram_rows([r.delta_rmsd for r in result_sets[n]], n, bin_width, lo, hi)
            histogram += [(n, blo, bhi, c) for blo, bhi, c, _ in rows]
    scatter = [(n, r.pose_id, r.initial_rmsd, r.delta_rmsd)
               for n in names for r in sorted(result_sets[n], key=lambda r: r.pose_id)]
    return Comparison(reports, histogram, scatter)


def results_from_datasets(initial, final):
    """Pair an initial pose set with externally optimized poses (same pose
    ids) so another optimizer's output can be compared like our own."""
    final_by_id = {r.pose_id: r for r in final}
    missing = [r.pose_id for r in initial if r.pose_id not in final_by_id]
    if missing:
        raise AlignmentError(f"external poses missing for {len(missing)} ids: {missing[:10]}", missing)
    out = []
    for r in initial:
        f = final_by_id[r.pose_id]
        out.append(OptimizationResult(r.pose_id, r.target_id, r.dof, f.dof, r.score, f.score,
                                      r.rmsd, f.rmsd, 0, "external"))
    return out


def dof_set_hash(dofs):
    h = hashlib.sha256()
    for d in dofs:
        h.update(np.ascontiguousarray(d.to_vector(), dtype="<f8").tobytes())
    return h.hexdigest()


# -- the iterative procedure -----------------------------------------------

@dataclass
class PipelineOutput:
    models: list
    results: list  # one list of OptimizationResult per round
    training_sets: list
    reports: list
    comparison: Comparison
    loss_traces: list


def run_pipeline(config, targets, initial_training_set, random_set, out_dir=None, workers=1,
                 resume=False):
    """Round 1 trains on the initial set and optimizes the random set. Each
    later round trains on the previous training set extended with the
    previous round's optimized poses, then optimizes the original random
    poses again from their initial DOF. With ``out_dir`` every round is
    checkpointed (model, loss trace, training set, results)."""
    table = targets[0].receptor.table
    template = config.grid_template(len(table))
    out_dir = Path(out_dir) if out_dir is not None else None
    train_set = list(initial_training_set)
    models, all_results, sets, reports, traces = [], [], [], [], []
    for k in range(1, config.rounds + 1):
        rdir = out_dir / f"round_{k}" if out_dir is not None else None
        sets.append(train_set)
        done = rdir is not None and resume and (rdir / "model.bin").exists() and (rdir / "results.jsonl").exists()
        if done:
            log.info("round %d: resuming from %s", k, rdir)
            model = load_model(rdir / "model.bin", expected_channels=len(table))
            results = load_results(rdir / "results.jsonl")
            trace = []
        else:
            examples = records_to_examples(train_set, targets, template)
            n_bind = sum(ex.label == CLASS_BINDING for ex in examples)
            log.info("round %d: training on %d examples (%d binding)", k, len(examples), n_bind)
            model = build_model(template, config.filters, seed=derive_seed(config.seed, k, 1))
            tconf = TrainConfig(**{**config.train.to_dict(), "seed": derive_seed(config.seed, k, 2)})
            model, trace = train(model, examples, tconf)
            log.info("round %d: optimizing %d poses", k, len(random_set))
            results = optimize_records(model, targets, random_set, config, workers)
            if rdir is not None:
                rdir.mkdir(parents=True, exist_ok=True)
                save_model(model, rdir / "model.bin")
                write_loss_trace(trace, rdir / "loss.csv")
                save_dataset(train_set, rdir / "train_set.jsonl")
                save_results(results, rdir / "results.jsonl")
        models.append(model)
        all_results.append(results)
        traces.append(trace)
        reports.append(delta_rmsd_stats(results, config.thresholds, f"CNN{k}"))
        train_set = extend_training_set(train_set, results, config.thresholds, tag=f"opt{k}")
    comparison = compare_methods({f"CNN{k + 1}": r for k, r in enumerate(all_results)}, config.thresholds)
    if out_dir is not None:
        comparison.write(out_dir)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    if len(reports) >= 2:
        s1, s2 = reports[0].rows["all"].sigma, reports[-1].rows["all"].sigma
        log.info("delta-RMSD sigma: CNN1 %s, CNN%d %s", _fmt(s1), len(reports), _fmt(s2))
    return PipelineOutput(models, all_results, sets, reports, comparison, traces)


def load_round_results(out_dir, k):
    return load_results(Path(out_dir) / f"round_{k}" / "results.jsonl")


def load_round_training_set(out_dir, k, thresholds=LabelThresholds()):
    return load_dataset(Path(out_dir) / f"round_{k}" / "train_set.jsonl", thresholds)
