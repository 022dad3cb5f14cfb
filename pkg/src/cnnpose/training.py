"""SGD training of the pose classifier with balanced batches and augmentation."""

import csv
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigurationError
from .geometry import rotvec_to_matrix, uniform_rotvec
from .grid import rasterize
from .molecule import Receptor
from .network import BINDING, NONBINDING, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    gamma: float = 0.001
    power: float = 1.0
    weight_decay: float = 0.001
    batch_size: int = 50
    max_iterations: int = 100_000
    seed: int = 0
    augment: bool = True
    max_translation: float = 2.0

    def __post_init__(self):
        for f in ("base_lr", "momentum", "gamma", "power", "weight_decay", "batch_size", "max_iterations"):
            if not getattr(self, f) > 0:
                raise ConfigurationError(f"train config field {f} must be positive")
        if self.batch_size % 2:
            raise ConfigurationError(f"batch_size must be even for class balancing, got {self.batch_size}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


def learning_rate(config, iteration):
    """Inverse decay: base_lr * (1 + gamma * t) ** -power."""
    return config.base_lr * (1.0 + config.gamma * iteration) ** (-config.power)


@dataclass
class TrainExample:
    """A receptor plus posed ligand atoms, labelled binding or non-binding."""

    receptor: Receptor
    ligand_coords: np.ndarray
    ligand_types: np.ndarray
    label: int
    spec: object  # GridSpec centered on this target's binding site

    def grid(self, rng=None, max_translation=2.0):
        ex = augment(self, rng, max_translation) if rng is not None else self
        return rasterize(ex.receptor, ex.ligand_coords, ex.ligand_types, ex.spec).values


@dataclass
class GridExample:
    """A precomputed grid with a label; augmentation does not apply."""

    values: np.ndarray
    label: int

    def grid(self, rng=None, max_translation=2.0):
        return self.values


def augment(example, rng, max_translation=2.0):
    """Rigidly move the whole complex: uniform random rotation about the
    grid center, then a uniform offset in [-max, max] along each axis."""
    center = np.asarray(example.spec.center)
    R = rotvec_to_matrix(uniform_rotvec(rng))
    shift = rng.uniform(-max_translation, max_translation, size=3)

    def move(coords):
        return (np.asarray(coords) - center) @ R.T + center + shift

    rec = example.receptor
    if rec is not None:
        rec = Receptor(move(rec.coords), rec.types, rec.table)
    return replace(example, receptor=rec, ligand_coords=move(example.ligand_coords))


class _ClassStream:
    """Endless shuffled stream of example indices for one class; reshuffled
    at every pass, so a minority class is oversampled by cycling."""

    def __init__(self, indices, rng):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.order = self.rng.permutation(self.indices)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
            step = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos:self.pos + step])
            self.pos += step
        return out


@dataclass
class TraceRow:
    iteration: int
    lr: float
    loss: float
    accuracy: float


def train(model, examples, config, progress=None):
    """Train a copy of ``model``; returns (trained_model, loss_trace).

    Each batch holds batch_size/2 examples per class. The loss is softmax
    cross-entropy; L2 weight decay is applied to conv/dense weights (not
    biases) in the update, Caffe style: v = m v + lr (g + wd w); w -= v.
    """
    labels = np.array([ex.label for ex in examples])
    pos = np.flatnonzero(labels == BINDING)
    neg = np.flatnonzero(labels == NONBINDING)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigurationError(
            f"training needs both classes; got {len(pos)} binding and {len(neg)} non-binding examples")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    streams = (_ClassStream(pos, rng), _ClassStream(neg, rng))
    half = config.batch_size // 2
    velocity = {(i, name): np.zeros_like(p) for i, name, p in model.parameters()}
    cache = {}
    trace = []
    for it in range(config.max_iterations):
        batch = streams[0].take(half) + streams[1].take(half)
        if config.augment:
            x = np.stack([examples[k].grid(rng, config.max_translation) for k in batch])
        else:
            for k in batch:
                if k not in cache:
                    cache[k] = examples[k].grid()
            x = np.stack([cache[k] for k in batch])
        y = labels[batch]
        state = model.forward_batch(x)
        loss = cross_entropy(state.probabilities, y)
        acc = float(np.mean(np.argmax(state.logits, axis=1) == y))
        dlogits = state.probabilities.copy()
        dlogits[np.arange(len(y)), y] -= 1.0
        dlogits /= len(y)
        grads, _ = model.backward_batch(state, dlogits, input_grad=False)
        lr = learning_rate(config, it)
        for i, name, p in model.parameters():
            g = grads[(i, name)]
            if name == "W":
                g = g + config.weight_decay * p
            v = velocity[(i, name)]
            v *= config.momentum
            v += lr * g
            p -= v
        trace.append(TraceRow(it, lr, loss, acc))
        if progress is not None:
            progress(trace[-1])
    return model, trace


def accuracy(model, examples, batch_size=64):
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        x = np.stack([ex.grid() for ex in chunk])
        pred = np.argmax(model.forward_batch(x).logits, axis=1)
        correct += int(np.sum(pred == np.array([ex.label for ex in chunk])))
    return correct / len(examples)


def write_loss_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss", "accuracy"])
        for row in trace:
            w.writerow([row.iteration, repr(row.lr), repr(row.loss), repr(row.accuracy)])


def read_loss_trace(path):
    with open(path, newline="") as fh:
        return [TraceRow(int(r["iteration"]), float(r["lr"]), float(r["loss"]), float(r["accuracy"]))
                for r in csv.DictReader(fh)]
