"""Command-line interface: one ``cnnpose`` binary with a subcommand per stage.

Settings resolve in three layers: built-in defaults, then a JSON config file
(``--config`` or ``$CNNPOSE_CONFIG``), then flags. Config keys mirror the
flags one to one; nested sections (``train``, ``bfgs``, ``thresholds``)
follow :class:`~cnnpose.pipeline.PipelineConfig`. Unknown keys are an error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, ContractError
from .gradcheck import run_all
from .grid import GridSpec, rasterize, save_grid
from .molecule import AtomTypeTable, apply_dof, load_molecule, load_type_table
from .network import build_model, load_model, save_model
from .optimizer import BfgsOptions, load_results, save_results
from .pipeline import (PipelineConfig, compare_methods, derive_seed, optimize_records, records_to_examples,
                       results_from_datasets, run_pipeline)
from .sampling import (LabelThresholds, generate_random_set, histogram_rows, load_dataset, load_targets,
                       save_dataset, save_targets, write_histogram)
from .synthetic import make_corpus, make_training_set
from .training import TrainConfig, train, write_loss_trace

log = logging.getLogger("cnnpose")

CONFIG_ENV = "CNNPOSE_CONFIG"
WORKERS_ENV = "CNNPOSE_WORKERS"

_TRAIN = TrainConfig()
_BFGS = BfgsOptions()
_THRESH = LabelThresholds()
_PIPE = PipelineConfig()


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# config key -> (flag, type, nargs, default, help)
OPTIONS = {
    "seed": ("--seed", int, None, 0, "random seed; identical seeds give identical outputs"),
    "workers": ("--workers", int, None, None,
                f"parallel pose optimizations (default: ${WORKERS_ENV} or the number of cores; "
                "1 is sequential)"),
    "edge_length": ("--edge-length", float, None, _PIPE.edge_length, "grid edge length in A"),
    "resolution": ("--resolution", float, None, _PIPE.resolution, "grid spacing in A"),
    "filters": ("--filters", int, "+", list(_PIPE.filters), "conv filters per pool/conv block"),
    "mode": ("--mode", str, None, _PIPE.mode, "optimized output: 'probability' or 'logit'"),
    "rounds": ("--rounds", int, None, _PIPE.rounds, "train/optimize rounds"),
    "train.base_lr": ("--base-lr", float, None, _TRAIN.base_lr, "initial learning rate"),
    "train.momentum": ("--momentum", float, None, _TRAIN.momentum, "SGD momentum"),
    "train.gamma": ("--gamma", float, None, _TRAIN.gamma, "inverse LR decay gamma"),
    "train.power": ("--power", float, None, _TRAIN.power, "inverse LR decay power"),
    "train.weight_decay": ("--weight-decay", float, None, _TRAIN.weight_decay, "L2 weight decay"),
    "train.batch_size": ("--batch-size", int, None, _TRAIN.batch_size, "examples per batch (even)"),
    "train.max_iterations": ("--max-iterations", int, None, _TRAIN.max_iterations, "training iterations"),
    "train.augment": ("--augment", _bool, None, _TRAIN.augment, "random rotation/translation per example"),
    "train.max_translation": ("--max-translation", float, None, _TRAIN.max_translation,
                              "augmentation translation bound per axis, A"),
    "bfgs.improvement_tolerance": ("--improvement-tolerance", float, None, _BFGS.improvement_tolerance,
                                   "stop when an accepted step improves the score by less"),
    "bfgs.max_iterations": ("--bfgs-max-iterations", int, None, _BFGS.max_iterations,
                            "BFGS iteration cap"),
    "bfgs.backtrack_factor": ("--backtrack-factor", float, None, _BFGS.backtrack_factor,
                              "line search step shrink factor"),
    "bfgs.sufficient_increase": ("--sufficient-increase", float, None, _BFGS.sufficient_increase,
                                 "Armijo constant"),
    "bfgs.max_backtracks": ("--max-backtracks", int, None, _BFGS.max_backtracks,
                            "line search attempts before giving up"),
    "bfgs.scale": ("--bfgs-scale", float, "+", _BFGS.scale, "optional per-variable scale"),
    "thresholds.binding_max": ("--binding-max", float, None, _THRESH.binding_max,
                               "RMSD below which a pose is binding"),
    "thresholds.nonbinding_min": ("--nonbinding-min", float, None, _THRESH.nonbinding_min,
                                  "RMSD above which a pose is non-binding"),
    # inputs and outputs
    "targets": ("--targets", str, None, None, "target manifest (JSON); omit for a synthetic corpus"),
    "n_targets": ("--n-targets", int, None, 10, "synthetic corpus size when --targets is omitted"),
    "train_per_target": ("--train-per-target", int, None, 20,
                         "synthetic training poses per target when --training-set is omitted"),
    "per_target": ("--per-target", int, None, 500, "random poses per target"),
    "training_set": ("--training-set", str, None, None, "initial training dataset (JSONL)"),
    "random_set": ("--random-set", str, None, None, "random pose dataset (JSONL)"),
    "dataset": ("--dataset", str, None, None, "pose dataset (JSONL)"),
    "model": ("--model", str, None, None, "model file"),
    "results": ("--results", str, "append", None, "result file, optionally METHOD=PATH (repeatable)"),
    "external": ("--external", str, "append", None,
                 "externally optimized poses as METHOD=INITIAL.jsonl,FINAL.jsonl (repeatable)"),
    "receptor": ("--receptor", str, None, None, "receptor molecule (JSON)"),
    "ligand": ("--ligand", str, None, None, "ligand molecule (JSON)"),
    "types": ("--types", str, None, None, "atom type table (JSON); default table if omitted"),
    "target_id": ("--target-id", str, None, None, "target to use from the manifest"),
    "pose_id": ("--pose-id", str, None, None, "pose from --dataset to place the ligand"),
    "center": ("--center", float, 3, None, "grid center x y z (default: ligand centroid)"),
    "bin_width": ("--bin-width", float, None, 0.5, "histogram bin width, A"),
    "histogram": ("--histogram", str, None, None, "also write an RMSD histogram CSV here"),
    "loss_csv": ("--loss-csv", str, None, None, "loss trace CSV (default: next to the model)"),
    "resume": ("--resume", _bool, None, False, "reuse finished rounds found in --out"),
    "quick": ("--quick", _bool, None, False, "smaller gradient check suites"),
    "out": ("--out", str, None, None, "output path"),
}

CONFIG_SECTIONS = ("train", "bfgs", "thresholds")

COMMON = ("seed",)
GRID = ("edge_length", "resolution")
TRAIN_KEYS = tuple(k for k in OPTIONS if k.startswith("train."))
BFGS_KEYS = tuple(k for k in OPTIONS if k.startswith("bfgs."))
THRESH_KEYS = tuple(k for k in OPTIONS if k.startswith("thresholds."))
CORPUS = ("targets", "n_targets")

COMMANDS = {
    "synth": ("write a procedurally generated target corpus and training set",
              ("n_targets", "train_per_target", *THRESH_KEYS, "out")),
    "rasterize": ("rasterize a receptor/ligand pair into a grid file",
                  ("receptor", "ligand", "types", *CORPUS, "target_id", "dataset", "pose_id", "center",
                   *GRID, "out")),
    "sample": ("generate random poses around each crystal ligand",
               (*CORPUS, "per_target", *THRESH_KEYS, "histogram", "bin_width", "out")),
    "train": ("train a model on a pose dataset",
              (*CORPUS, "dataset", *GRID, "filters", *TRAIN_KEYS, *THRESH_KEYS, "out", "loss_csv")),
    "optimize": ("optimize every pose of a dataset against a model",
                 (*CORPUS, "model", "dataset", "mode", *BFGS_KEYS, *THRESH_KEYS, "workers", "out")),
    "pipeline": ("run the iterative train/optimize/extend procedure",
                 (*CORPUS, "train_per_target", "per_target", "training_set", "random_set", "rounds",
                  *GRID, "filters", "mode", *TRAIN_KEYS, *BFGS_KEYS, *THRESH_KEYS, "workers", "resume",
                  "out")),
    "stats": ("delta-RMSD report, histogram and scatter CSVs for result files",
              ("results", "external", *THRESH_KEYS, "bin_width", "out")),
    "gradcheck": ("run every finite-difference gradient check", ("quick", "out")),
}


def _help(key):
    flag, _, _, default, text = OPTIONS[key]
    if default is None or key == "workers":
        return text
    if isinstance(default, list):
        default = " ".join(str(v) for v in default)
    return f"{text} (default: {default})"


def build_parser():
    parser = argparse.ArgumentParser(prog="cnnpose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help=f"JSON config file (default: ${CONFIG_ENV} if set)")
        p.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"),
                       help="stderr log verbosity (default: info)")
        for key in (*COMMON, *keys):
            flag, typ, nargs, _, _ = OPTIONS[key]
            kwargs = {"dest": key, "default": argparse.SUPPRESS, "help": _help(key)}
            if typ is _bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, **kwargs)
                continue
            if nargs == "append":
                kwargs["action"] = "append"
            elif nargs is not None:
                kwargs["nargs"] = nargs
            p.add_argument(flag, type=typ, metavar=flag[2:].upper().replace("-", "_"), **kwargs)
    return parser


def _flatten(doc, prefix=""):
    flat = {}
    for key, value in doc.items():
        full = prefix + key
        if not prefix and key in CONFIG_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {key!r} must be an object")
            flat.update(_flatten(value, key + "."))
        else:
            flat[full] = value
    return flat


def load_config_file(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    flat = _flatten(doc)
    # the training seed is always derived from the top-level seed
    flat.pop("train.seed", None)
    unknown = sorted(set(flat) - set(OPTIONS))
    if unknown:
        raise ConfigurationError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return flat


def resolve_settings(args, environ=os.environ):
    """defaults < config file < flags."""
    settings = {key: spec[3] for key, spec in OPTIONS.items()}
    config_path = getattr(args, "config", None) or environ.get(CONFIG_ENV)
    if config_path:
        settings.update(load_config_file(config_path))
    for key in OPTIONS:
        if hasattr(args, key):
            settings[key] = getattr(args, key)
    if settings["workers"] is None:
        env = environ.get(WORKERS_ENV)
        try:
            settings["workers"] = int(env) if env else (os.cpu_count() or 1)
        except ValueError as exc:
            raise ConfigurationError(f"${WORKERS_ENV} must be an integer, got {env!r}") from exc
    if settings["workers"] < 1:
        raise ConfigurationError(f"workers must be >= 1, got {settings['workers']}")
    return settings


def pipeline_config(s):
    def section(prefix):
        return {k.split(".", 1)[1]: v for k, v in s.items() if k.startswith(prefix + ".")}

    train_doc = section("train")
    train_doc["seed"] = s["seed"]
    bfgs_doc = section("bfgs")
    if bfgs_doc.get("scale") is not None:
        bfgs_doc["scale"] = tuple(bfgs_doc["scale"])
    return PipelineConfig(
        train=TrainConfig.from_dict(train_doc),
        bfgs=BfgsOptions.from_dict(bfgs_doc),
        thresholds=LabelThresholds(**section("thresholds")),
        edge_length=float(s["edge_length"]),
        resolution=float(s["resolution"]),
        filters=tuple(s["filters"]),
        mode=s["mode"],
        seed=int(s["seed"]),
        rounds=int(s["rounds"]),
    )


def _require(s, *keys):
    for key in keys:
        if s.get(key) is None:
            raise ConfigurationError(f"{OPTIONS[key][0]} is required")


def _corpus(s):
    if s["targets"]:
        return load_targets(s["targets"])
    log.info("no --targets given: generating a synthetic corpus of %d targets (seed %d)",
             s["n_targets"], s["seed"])
    return make_corpus(s["n_targets"], s["seed"])


def _out(s):
    _require(s, "out")
    path = Path(s["out"])
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands --------------------------------------------------------------

def cmd_synth(s):
    _require(s, "out")
    cfg = pipeline_config(s)
    table, targets = make_corpus(s["n_targets"], s["seed"])
    manifest = save_targets(table, targets, s["out"])
    records = make_training_set(targets, s["train_per_target"], s["seed"], cfg.thresholds)
    save_dataset(records, Path(s["out"]) / "training_set.jsonl")
    log.info("wrote %s and %d training poses", manifest, len(records))


def cmd_rasterize(s):
    out = _out(s)
    if s["receptor"] or s["ligand"]:
        _require(s, "receptor", "ligand")
        table = load_type_table(s["types"]) if s["types"] else AtomTypeTable.default()
        receptor = load_molecule(s["receptor"], table, kind="receptor")
        ligand = load_molecule(s["ligand"], table, kind="ligand")
        coords = ligand.coords
        center = coords.mean(axis=0)
    else:
        table, targets = _corpus(s)
        by_id = {t.target_id: t for t in targets}
        tid = s["target_id"] or targets[0].target_id
        if tid not in by_id:
            raise ContractError(f"unknown target id {tid!r}")
        target = by_id[tid]
        receptor, ligand = target.receptor, target.ligand
        coords = target.crystal_coords
        center = target.center
        if s["pose_id"]:
            _require(s, "dataset")
            poses = {r.pose_id: r for r in load_dataset(s["dataset"], pipeline_config(s).thresholds)}
            if s["pose_id"] not in poses:
                raise ContractError(f"pose {s['pose_id']!r} not found in {s['dataset']}")
            coords = apply_dof(ligand, poses[s["pose_id"]].dof)
    if s["center"] is not None:
        center = np.asarray(s["center"], dtype=float)
    spec = GridSpec(tuple(center), float(s["edge_length"]), float(s["resolution"]), len(table))
    save_grid(rasterize(receptor, coords, ligand.types, spec), out)
    log.info("wrote %s: %s lattice", out, "x".join(str(v) for v in spec.shape))


def cmd_sample(s):
    out = _out(s)
    cfg = pipeline_config(s)
    _, targets = _corpus(s)
    records = generate_random_set(targets, s["per_target"], s["seed"], cfg.thresholds)
    save_dataset(records, out)
    counts = {lab: sum(r.label == lab for r in records) for lab in ("binding", "ambiguous", "non-binding")}
    log.info("wrote %d poses to %s (%s)", len(records), out, counts)
    if s["histogram"]:
        write_histogram(histogram_rows([r.rmsd for r in records], "random", s["bin_width"]), s["histogram"])


def cmd_train(s):
    _require(s, "dataset")
    out = _out(s)
    cfg = pipeline_config(s)
    table, targets = _corpus(s)
    template = cfg.grid_template(len(table))
    examples = records_to_examples(load_dataset(s["dataset"], cfg.thresholds), targets, template)
    # same seed derivation as pipeline round 1
    model = build_model(template, cfg.filters, seed=derive_seed(cfg.seed, 1, 1))
    tconf = TrainConfig(**{**cfg.train.to_dict(), "seed": derive_seed(cfg.seed, 1, 2)})

    def progress(row):
        if row.iteration % 100 == 0:
            log.info("iteration %d: loss %.4f accuracy %.2f", row.iteration, row.loss, row.accuracy)

    model, trace = train(model, examples, tconf, progress)
    save_model(model, out)
    loss_path = Path(s["loss_csv"]) if s["loss_csv"] else out.with_suffix(".loss.csv")
    write_loss_trace(trace, loss_path)
    log.info("wrote %s and %s", out, loss_path)


def cmd_optimize(s):
    _require(s, "model", "dataset")
    out = _out(s)
    cfg = pipeline_config(s)
    table, targets = _corpus(s)
    model = load_model(s["model"], expected_channels=len(table))
    if model.grid_spec is not None:
        # score on the lattice the model was trained for
        cfg.edge_length = model.grid_spec.edge_length
        cfg.resolution = model.grid_spec.resolution
    records = load_dataset(s["dataset"], cfg.thresholds)
    results = optimize_records(model, targets, records, cfg, s["workers"])
    save_results(results, out)
    log.info("wrote %d results to %s", len(results), out)


def cmd_pipeline(s):
    _require(s, "out")
    cfg = pipeline_config(s)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    table, targets = _corpus(s)
    if s["training_set"]:
        training = load_dataset(s["training_set"], cfg.thresholds)
    else:
        training = make_training_set(targets, s["train_per_target"], cfg.seed, cfg.thresholds)
    if s["random_set"]:
        random_set = load_dataset(s["random_set"], cfg.thresholds)
    else:
        random_set = generate_random_set(targets, s["per_target"], cfg.seed, cfg.thresholds)
    save_dataset(random_set, out / "random_set.jsonl")
    res = run_pipeline(cfg, targets, training, random_set, out_dir=out, workers=s["workers"],
                       resume=s["resume"])
    for rep in res.reports:
        a = rep.rows["all"]
        log.info("%s: n=%d mean delta-RMSD %s sigma %s", rep.method, a.n,
                 "-" if a.mean is None else f"{a.mean:.3f}", "-" if a.sigma is None else f"{a.sigma:.3f}")


def _named(spec, what):
    if "=" in spec:
        name, value = spec.split("=", 1)
        if not name:
            raise ContractError(f"empty method name in {what} {spec!r}")
        return name, value
    return Path(spec).stem, spec


def cmd_stats(s):
    _require(s, "out")
    if not s["results"] and not s["external"]:
        raise ConfigurationError("give at least one --results or --external")
    cfg = pipeline_config(s)
    sets = {}
    for spec in s["results"] or ():
        name, path = _named(spec, "--results")
        sets[name] = load_results(path)
    for spec in s["external"] or ():
        name, paths = _named(spec, "--external")
        try:
            initial, final = paths.split(",")
        except ValueError as exc:
            raise ContractError(f"--external expects METHOD=INITIAL,FINAL, got {spec!r}") from exc
        sets[name] = results_from_datasets(load_dataset(initial, cfg.thresholds),
                                           load_dataset(final, cfg.thresholds))
    compare_methods(sets, cfg.thresholds, s["bin_width"]).write(s["out"])
    log.info("wrote report.csv, histogram.csv and scatter.csv to %s", s["out"])


def cmd_gradcheck(s):
    results = run_all(seed=s["seed"], quick=s["quick"])
    lines = [r.line() for r in results]
    for line in lines:
        log.info("%s", line)
    if s["out"]:
        _out(s).write_text("\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ContractError(f"gradient checks failed: {', '.join(failed)}")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        settings = resolve_settings(args)
        HANDLERS[args.command](settings)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"cnnpose {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
