"""A small 3D convolutional pose classifier written directly in numpy.

The default architecture is three ``maxpool -> conv -> relu`` modules
(32, 64, 128 filters; 3x3x3 kernels, stride 1, padding 1; 2x2x2 pooling,
stride 2) followed by a fully connected layer with two outputs. Output 0 is
the binding class, output 1 the non-binding class.
"""

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, StateError
from .grid import AtomGrid, GridSpec

BINDING = 0
NONBINDING = 1

MODEL_MAGIC = b"CNNPMODL"
MODEL_FORMAT_VERSION = 1


def _im2col(x):
    """(N, C, D, H, W) -> (N, C*27, D*H*W) columns of 3x3x3 neighbourhoods
    under zero padding 1."""
    n, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((n, c, 27, d, h, w))
    t = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[:, :, t] = xp[:, :, i:i + d, j:j + h, k:k + w]
                t += 1
    return cols.reshape(n, c * 27, d * h * w)


def conv3d(x, W, b=None, cols=None):
    """3x3x3 cross-correlation with stride 1 and zero padding 1.

    x: (N, C, D, H, W); W: (O, C, 3, 3, 3) -> (N, O, D, H, W)
    """
    n, _, d, h, w = x.shape
    if cols is None:
        cols = _im2col(x)
    out = np.matmul(W.reshape(len(W), -1), cols).reshape(n, len(W), d, h, w)
    if b is not None:
        out += b[None, :, None, None, None]
    return out


class Layer:
    kind = ""
    params = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache, need_dx=True, need_params=True):
        """Return (dx, {param_name: grad}). Skipped parts come back as None/{}."""
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def describe(self):
        return {"kind": self.kind}


class Crop(Layer):
    """Keep the first ``size`` lattice points along each spatial axis."""

    kind = "crop"

    def __init__(self, size):
        self.size = int(size)

    def forward(self, x):
        s = self.size
        return x[:, :, :s, :s, :s], x.shape

    def backward(self, dout, in_shape, need_dx=True, need_params=True):
        dx = np.zeros(in_shape)
        s = self.size
        dx[:, :, :s, :s, :s] = dout
        return dx, {}

    def output_shape(self, shape):
        c, *dims = shape
        if any(d < self.size for d in dims):
            raise ContractError(f"cannot crop spatial dims {dims} to {self.size}")
        return (c, self.size, self.size, self.size)

    def describe(self):
        return {"kind": self.kind, "size": self.size}


class MaxPool(Layer):
    """2x2x2 max pooling, stride 2. Ties go to the lowest index in the window."""

    kind = "maxpool"

    def forward(self, x):
        n, c, d, h, w = x.shape
        d2, h2, w2 = d // 2, h // 2, w // 2
        xr = x[:, :, :2 * d2, :2 * h2, :2 * w2].reshape(n, c, d2, 2, h2, 2, w2, 2)
        xr = xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d2, h2, w2, 8)
        arg = np.argmax(xr, axis=-1)
        out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache, need_dx=True, need_params=True):
        in_shape, arg = cache
        n, c, d, h, w = in_shape
        d2, h2, w2 = arg.shape[2:]
        dxr = np.zeros(arg.shape + (8,))
        np.put_along_axis(dxr, arg[..., None], dout[..., None], axis=-1)
        dxr = dxr.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        dx = np.zeros(in_shape)
        dx[:, :, :2 * d2, :2 * h2, :2 * w2] = dxr.reshape(n, c, 2 * d2, 2 * h2, 2 * w2)
        return dx, {}

    def output_shape(self, shape):
        c, d, h, w = shape
        if min(d, h, w) < 2:
            raise ContractError(f"cannot pool spatial dims {(d, h, w)}")
        return (c, d // 2, h // 2, w // 2)


class Conv3d(Layer):
    kind = "conv"
    params = ("W", "b")

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)

    @classmethod
    def init(cls, in_channels, filters, rng):
        fan_in = in_channels * 27
        bound = np.sqrt(3.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(filters, in_channels, 3, 3, 3))
        return cls(W, np.zeros(filters))

    def forward(self, x):
        cols = _im2col(x)
        return conv3d(x, self.W, self.b, cols), cols

    def backward(self, dout, cols, need_dx=True, need_params=True):
        grads = {}
        if need_params:
            n, o = dout.shape[:2]
            flat = dout.reshape(n, o, -1)
            grads["W"] = np.tensordot(flat, cols, axes=([0, 2], [0, 2])).reshape(self.W.shape)
            grads["b"] = flat.sum(axis=(0, 2))
        dx = None
        if need_dx:
            # input gradient: correlate with the spatially flipped, transposed kernel
            Wf = np.ascontiguousarray(self.W[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            dx = conv3d(dout, Wf)
        return dx, grads

    def output_shape(self, shape):
        c, d, h, w = shape
        if c != self.W.shape[1]:
            raise ContractError(f"conv expects {self.W.shape[1]} input channels, got {c}")
        return (self.W.shape[0], d, h, w)

    def describe(self):
        return {"kind": self.kind, "shape": list(self.W.shape)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask, need_dx=True, need_params=True):
        return dout * mask, {}


class Dense(Layer):
    kind = "dense"
    params = ("W", "b")

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)

    @classmethod
    def init(cls, in_features, outputs, rng):
        bound = np.sqrt(3.0 / in_features)
        W = rng.uniform(-bound, bound, size=(outputs, in_features))
        return cls(W, np.zeros(outputs))

    def forward(self, x):
        flat = x.reshape(len(x), -1)
        return flat @ self.W.T + self.b, (x.shape, flat)

    def backward(self, dout, cache, need_dx=True, need_params=True):
        in_shape, flat = cache
        grads = {"W": dout.T @ flat, "b": dout.sum(axis=0)} if need_params else {}
        dx = (dout @ self.W).reshape(in_shape) if need_dx else None
        return dx, grads

    def output_shape(self, shape):
        features = int(np.prod(shape))
        if features != self.W.shape[1]:
            raise ContractError(f"dense layer expects {self.W.shape[1]} inputs, got {features}")
        return (self.W.shape[0],)

    def describe(self):
        return {"kind": self.kind, "shape": list(self.W.shape)}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardState:
    """Logits and probabilities of a forward pass plus the per-layer caches
    needed to run it backwards."""

    logits: np.ndarray
    probabilities: np.ndarray
    caches: list
    input_shape: tuple


class NetworkModel:
    """Ordered layer list mapping a (C, n, n, n) grid to two class logits.

    ``grid_spec`` records the lattice the model was built for; its center is
    informational only (every target has its own binding-site center).
    """

    def __init__(self, layers, input_shape, grid_spec=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.grid_spec = grid_spec
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (2,):
            raise ContractError(f"network must end with 2 outputs, got shape {shape}")

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Yield (layer_index, name, array) for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield i, name, getattr(layer, name)

    def num_parameters(self):
        return sum(p.size for _, _, p in self.parameters())

    def forward_batch(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ContractError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return ForwardState(x, softmax(x), caches, self.input_shape)

    def backward_batch(self, state, dlogits, param_grads=True, input_grad=True):
        """Backpropagate ``dlogits``; returns ({(layer, name): grad}, dx).

        With ``input_grad=False`` the pass stops at the first trainable
        layer and dx is None; with ``param_grads=False`` the dict is empty.
        """
        if not isinstance(state, ForwardState):
            raise StateError("backward called without a forward pass")
        first = min((i for i, layer in enumerate(self.layers) if layer.params), default=0)
        stop = 0 if input_grad else first
        grads = {}
        d = np.asarray(dlogits, dtype=float)
        for i in range(len(self.layers) - 1, stop - 1, -1):
            need_dx = input_grad or i > first
            d, g = self.layers[i].backward(d, state.caches[i], need_dx, param_grads)
            for name, val in g.items():
                grads[(i, name)] = val
        return grads, (d if input_grad else None)


def build_model(grid_spec, filters=(32, 64, 128), seed=0):
    """The default pool/conv/relu stack for a given lattice.

    The lattice is cropped to the largest multiple of ``2 ** len(filters)``
    points per side (49 -> 48 for the default grid) so every pooling step
    halves evenly.
    """
    rng = np.random.default_rng(seed)
    n = grid_spec.points_per_side
    factor = 2 ** len(filters)
    m = (n // factor) * factor
    if m == 0:
        raise ContractError(f"{n} lattice points per side is too small for {len(filters)} pooling steps")
    layers = []
    if m != n:
        layers.append(Crop(m))
    channels = grid_spec.channel_count
    for f in filters:
        layers += [MaxPool(), Conv3d.init(channels, f, rng), ReLU()]
        channels = f
    side = m // factor
    layers.append(Dense.init(channels * side ** 3, 2, rng))
    return NetworkModel(layers, grid_spec.shape, grid_spec)


def _as_input(model, grid):
    values = grid.values if isinstance(grid, AtomGrid) else np.asarray(grid, dtype=float)
    if values.shape != model.input_shape:
        raise ContractError(f"grid shape {values.shape} does not match model input {model.input_shape}")
    return values[None]


def forward(model, grid):
    """Score one grid. Returns a ForwardState with 2-vector logits/probabilities."""
    state = model.forward_batch(_as_input(model, grid))
    return ForwardState(state.logits[0], state.probabilities[0], state.caches, state.input_shape)


def cross_entropy(probabilities, labels):
    p = np.asarray(probabilities)
    labels = np.asarray(labels)
    picked = p[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def backward(model, state, target_label):
    """Gradients of the softmax cross-entropy loss for ``target_label``.

    ``state`` must be the value returned by :func:`forward`. Returns
    ``(weight_grads, input_grad)`` where weight_grads maps
    ``(layer_index, "W"|"b")`` to arrays.
    """
    if not isinstance(state, ForwardState):
        raise StateError("backward requires the state returned by forward()")
    if target_label not in (BINDING, NONBINDING):
        raise ContractError(f"invalid target label {target_label!r}")
    dlogits = state.probabilities.copy()
    dlogits[target_label] -= 1.0
    batch_state = ForwardState(state.logits[None], state.probabilities[None], state.caches,
                               state.input_shape)
    grads, dx = model.backward_batch(batch_state, dlogits[None])
    return grads, dx[0]


def output_gradient_seed(probabilities, class_index, mode):
    """d(selected output)/d(logits)."""
    seed = np.zeros_like(probabilities)
    if mode == "logit":
        seed[class_index] = 1.0
    elif mode == "probability":
        p = probabilities
        seed = -p[class_index] * p
        seed[class_index] += p[class_index]
    else:
        raise ContractError(f"mode must be 'probability' or 'logit', got {mode!r}")
    return seed


def class_output_gradient(model, grid, class_index=BINDING, mode="probability", state=None):
    """Gradient of one class output (softmax probability or raw logit)
    with respect to every input voxel.

    Returns ``(value, input_grad)``.
    """
    if class_index not in (0, 1):
        raise ContractError(f"class_index must be 0 or 1, got {class_index!r}")
    if state is None:
        state = forward(model, grid)
    seed = output_gradient_seed(state.probabilities, class_index, mode)
    value = state.logits[class_index] if mode == "logit" else state.probabilities[class_index]
    batch_state = ForwardState(state.logits[None], state.probabilities[None], state.caches,
                               state.input_shape)
    _, dx = model.backward_batch(batch_state, seed[None], param_grads=False)
    return float(value), dx[0]


# -- persistence ----------------------------------------------------------

def save_model(model, path):
    """Binary weight file: magic, u32 header length, JSON header with the
    grid spec echo and per-layer shape table, little-endian float64 payload."""
    spec = model.grid_spec.to_dict() if model.grid_spec is not None else None
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "grid_spec": spec,
        "input_shape": list(model.input_shape),
        "layers": [layer.describe() for layer in model.layers],
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, _, arr in model.parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path, expected_channels=None):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic or truncated)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    if len(data) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format_version {header.get('format_version')!r}")
    input_shape = tuple(header["input_shape"])
    spec = GridSpec.from_dict(header["grid_spec"]) if header.get("grid_spec") else None
    if spec is not None and spec.channel_count != input_shape[0]:
        raise FormatError(
            f"{path}: channel_count mismatch: grid spec has {spec.channel_count}, "
            f"input shape has {input_shape[0]}")
    if expected_channels is not None and input_shape[0] != expected_channels:
        raise FormatError(
            f"{path}: channel_count mismatch: expected {expected_channels}, file has {input_shape[0]}")
    offset = 12 + hlen
    layers = []

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated weight payload")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(float)
        offset = end
        return arr

    for desc in header["layers"]:
        kind = desc["kind"]
        if kind == "crop":
            layers.append(Crop(desc["size"]))
        elif kind == "maxpool":
            layers.append(MaxPool())
        elif kind == "relu":
            layers.append(ReLU())
        elif kind in ("conv", "dense"):
            shape = tuple(desc["shape"])
            W = take(shape)
            b = take((shape[0],))
            layers.append(Conv3d(W, b) if kind == "conv" else Dense(W, b))
        else:
            raise FormatError(f"{path}: unknown layer kind {kind!r}")
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after weights")
    try:
        return NetworkModel(layers, input_shape, spec)
    except ContractError as exc:
        raise FormatError(f"{path}: inconsistent layer shapes: {exc}") from exc
