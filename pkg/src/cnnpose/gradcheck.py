"""Central finite-difference checks for every analytic gradient in the package.

Each suite returns a :class:`CheckResult` with the worst relative error
seen; ``relative_error`` divides by the larger magnitude of the two values
with a tiny absolute floor so exact zeros compare equal.
"""

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, _E2, atom_density, atom_density_deriv, grid_backward, rasterize_atoms
from .molecule import AtomTypeTable, ConformationDOF, Ligand, Receptor, apply_dof
from .network import (Conv3d, Crop, Dense, MaxPool, NetworkModel, ReLU, backward, build_model,
                      forward)
from .optimizer import CnnAtomScorer, dof_objective

ABS_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float
    cases: int

    @property
    def passed(self):
        return self.worst < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst relative error {self.worst:.3e} < {self.tolerance:g} over {self.cases} cases"


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    a = np.asarray(analytic, dtype=np.longdouble)
    n = np.asarray(numeric, dtype=np.longdouble)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, x, h):
    x = np.array(x, dtype=np.result_type(x, float))
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def kernel_suite(radii=(0.5, 1.0, 1.5, 1.9, 2.2)):
    """Branch limits of the density kernel at d = r and d = 1.5 r."""
    worst = 0.0
    for r in radii:
        gauss = lambda d: np.exp(-2.0 * d * d / (r * r))
        quad = lambda d: 4.0 / (_E2 * r * r) * d * d - 12.0 / (_E2 * r) * d + 9.0 / _E2
        dgauss = lambda d: -4.0 * d / (r * r) * np.exp(-2.0 * d * d / (r * r))
        dquad = lambda d: 8.0 / (_E2 * r * r) * d - 12.0 / (_E2 * r)
        gaps = [
            abs(gauss(r) - quad(r)),
            abs(dgauss(r) - dquad(r)),
            abs(quad(1.5 * r) - 0.0),
            abs(dquad(1.5 * r) - 0.0),
            abs(atom_density(r, r) - np.exp(-2.0)),
            abs(atom_density(1.5 * r, r)),
            abs(atom_density_deriv(1.5 * r, r)),
            abs(atom_density(0.0, r) - 1.0),
        ]
        worst = max(worst, max(gaps))
    return CheckResult("density kernel branch limits", worst, 1e-12, len(radii))


def grid_suite(n_configs=100, seed=0, h=1e-5, tol=1e-5):
    """Random 1-5 atom ligands on an 8^3, 2-channel lattice."""
    rng = np.random.default_rng(seed)
    radii = np.array([1.2, 1.7])
    spec = GridSpec((0.0, 0.0, 0.0), 7.0, 1.0, 2)
    worst = 0.0
    for _ in range(n_configs):
        n = int(rng.integers(1, 6))
        coords = rng.uniform(-3.0, 3.0, size=(n, 3))
        types = rng.integers(0, 2, size=n)
        up = rng.normal(size=spec.shape)
        analytic = grid_backward(up, coords, types, spec, radii)

        def f(c):
            return float(np.sum(up * rasterize_atoms(c, types, radii, spec)))

        numeric = central_difference(f, coords, h)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return CheckResult("grid backward vs finite differences", worst, tol, n_configs)


def random_tiny_model(rng, channels=2, side=None):
    """A small conv/relu/pool/dense model with nonzero biases."""
    side = side or int(rng.choice([4, 6, 8]))
    f1, f2 = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    layers = [Conv3d.init(channels, f1, rng), ReLU(), MaxPool(), Conv3d.init(f1, f2, rng), ReLU()]
    feat = f2 * (side // 2) ** 3
    layers.append(Dense.init(feat, 2, rng))
    for layer in layers:
        if hasattr(layer, "b"):
            layer.b[:] = rng.normal(scale=0.1, size=layer.b.shape)
    return NetworkModel(layers, (channels, side, side, side))


def reference_logits(model, x, params=None, dtype=np.longdouble):
    """Batched forward pass written independently of the layer classes:
    shifted-slice convolution and window-max pooling, evaluated in extended
    precision so finite differences at small steps are not dominated by
    rounding.

    ``x`` has a leading batch axis. ``params`` optionally maps
    ``(layer_index, name)`` to a batch of replacement arrays with the same
    leading axis, so many perturbed models run in one pass."""
    params = params or {}
    x = np.asarray(x, dtype=dtype)
    B = len(x)
    for li, layer in enumerate(model.layers):

        def param(name):
            p = params.get((li, name))
            if p is None:
                p = getattr(layer, name)[None]
            return np.broadcast_to(np.asarray(p, dtype=dtype), (B,) + getattr(layer, name).shape)

        if isinstance(layer, Crop):
            s = layer.size
            x = x[:, :, :s, :s, :s]
        elif isinstance(layer, MaxPool):
            d, h, w = x.shape[2:]
            x = x[:, :, :d // 2 * 2, :h // 2 * 2, :w // 2 * 2]
            x = np.max([x[:, :, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)], axis=0)
        elif isinstance(layer, Conv3d):
            W, bias = param("W"), param("b")
            d, h, w = x.shape[2:]
            xp = np.zeros(x.shape[:2] + (d + 2, h + 2, w + 2), dtype=dtype)
            xp[:, :, 1:-1, 1:-1, 1:-1] = x
            out = np.zeros((B, W.shape[1], d, h, w), dtype=dtype)
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        out += np.einsum("boc,bcxyz->boxyz", W[:, :, :, i, j, k],
                                         xp[:, :, i:i + d, j:j + h, k:k + w])
            x = out + bias[:, :, None, None, None]
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, Dense):
            x = np.einsum("bof,bf->bo", param("W"), x.reshape(B, -1)) + param("b")
        else:
            raise TypeError(f"no reference implementation for {type(layer).__name__}")
    return x


def reference_loss(model, x, label, params=None, dtype=np.longdouble):
    """Softmax cross-entropy of ``label`` for each batch member."""
    z = reference_logits(model, x, params, dtype)
    m = z.max(axis=1)
    return m + np.log(np.sum(np.exp(z - m[:, None]), axis=1)) - z[:, label]


def _perturbed(base, h):
    """2n copies of ``base``: +h then -h on each entry in turn."""
    base = np.asarray(base, dtype=np.longdouble)
    n = base.size
    stack = np.repeat(base.reshape(1, -1), 2 * n, axis=0)
    idx = np.arange(n)
    stack[2 * idx, idx] += h
    stack[2 * idx + 1, idx] -= h
    return stack.reshape((2 * n,) + base.shape)


def _batched_difference(losses, shape, h):
    return ((losses[0::2] - losses[1::2]) / (2 * np.longdouble(h))).reshape(shape)


def network_suite(n_models=20, seed=0, h=1e-6, tol=1e-5):
    """Every weight and input gradient of randomized tiny models."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        model = random_tiny_model(rng)
        x = rng.normal(size=model.input_shape)
        label = int(rng.integers(0, 2))
        grads, dx = backward(model, forward(model, x), label)
        fd = _batched_difference(reference_loss(model, _perturbed(x, h), label), x.shape, h)
        worst = max(worst, float(relative_error(dx, fd).max()))
        for (i, name), g in grads.items():
            original = getattr(model.layers[i], name)
            stack = _perturbed(original, h)
            losses = reference_loss(model, np.broadcast_to(x, (len(stack),) + x.shape), label,
                                    params={(i, name): stack})
            fd = _batched_difference(losses, original.shape, h)
            worst = max(worst, float(relative_error(g, fd).max()))
    return CheckResult("network weight/input gradients vs finite differences", worst, tol, n_models)


def random_ligand(rng, table, n_torsions):
    """A chain ligand with ``n_torsions`` nested rotatable bonds."""
    n = n_torsions + 4
    steps = rng.normal(size=(n, 3))
    steps = 1.5 * steps / np.linalg.norm(steps, axis=1, keepdims=True)
    coords = np.cumsum(steps, axis=0)
    bonds = [(i, i + 1, range(i + 2, n)) for i in range(1, n_torsions + 1)]
    types = rng.integers(0, len(table), size=n)
    return Ligand(coords - coords.mean(axis=0), types, table, 0, bonds)


def dof_suite(n_ligands=6, seed=0, h=1e-5, tol=1e-4, max_torsions=5):
    """Translation/rotation/torsion gradients through rasterization and a
    small network, compared with finite differences of the score."""
    rng = np.random.default_rng(seed)
    table = AtomTypeTable((("A", 1.6), ("B", 1.9)))
    spec = GridSpec((0.0, 0.0, 0.0), 15.0, 1.0, 2)
    worst = 0.0
    cases = 0
    for i in range(n_ligands):
        n_tors = i % (max_torsions + 1)
        lig = random_ligand(rng, table, n_tors)
        rec = Receptor(rng.uniform(-6.0, 6.0, size=(25, 3)), rng.integers(0, 2, size=25), table)
        model = build_model(spec, filters=(4, 4, 6), seed=int(rng.integers(1 << 30)))
        for _, name, p in model.parameters():
            if name == "b":
                p[:] = rng.normal(scale=0.05, size=p.shape)
        for mode in ("probability", "logit"):
            obj = dof_objective(lig, CnnAtomScorer(model, rec, lig.types, spec, mode))
            dof = ConformationDOF(rng.normal(scale=0.5, size=3), rng.normal(scale=0.6, size=3),
                                  rng.uniform(-np.pi, np.pi, size=n_tors))
            _, analytic = obj(dof)

            def f(v):
                return obj(ConformationDOF.from_vector(v))[0]

            numeric = central_difference(f, dof.to_vector(), h)
            worst = max(worst, float(relative_error(analytic, numeric).max()))
            cases += 1
    return CheckResult("DOF gradients through grid and network vs finite differences", worst, tol, cases)


def run_all(seed=0, quick=False):
    scale = 4 if quick else 1
    return [
        kernel_suite(),
        grid_suite(n_configs=100 // scale, seed=seed),
        network_suite(n_models=max(20 // scale, 1), seed=seed),
        dof_suite(n_ligands=6, seed=seed),
    ]
