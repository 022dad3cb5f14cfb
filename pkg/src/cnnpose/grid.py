"""Differentiable atomic density grids.

Each atom contributes a smooth, compactly supported density to the channel
of its type; the density is a Gaussian out to the van der Waals radius and
a quadratic tail that reaches zero with zero slope at 1.5 radii.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

_E2 = math.exp(2.0)

GRID_MAGIC = b"CNNPGRID"
GRID_FORMAT_VERSION = 1


def atom_density(d, r):
    """Density of an atom of radius ``r`` at distance ``d``."""
    if not r > 0:
        raise ContractError(f"radius must be > 0, got {r}")
    if d < 0:
        raise ContractError(f"distance must be >= 0, got {d}")
    if d < r:
        return math.exp(-2.0 * d * d / (r * r))
    if d < 1.5 * r:
        return 4.0 / (_E2 * r * r) * d * d - 12.0 / (_E2 * r) * d + 9.0 / _E2
    return 0.0


def atom_density_deriv(d, r):
    """Derivative of :func:`atom_density` with respect to distance."""
    if not r > 0:
        raise ContractError(f"radius must be > 0, got {r}")
    if d < 0:
        raise ContractError(f"distance must be >= 0, got {d}")
    if d <= r:
        return -4.0 * d / (r * r) * math.exp(-2.0 * d * d / (r * r))
    if d < 1.5 * r:
        return 8.0 / (_E2 * r * r) * d - 12.0 / (_E2 * r)
    return 0.0


def _density_array(d, r):
    # same operation order as atom_density
    out = np.where(
        d < r,
        np.exp(-2.0 * d * d / (r * r)),
        4.0 / (_E2 * r * r) * d * d - 12.0 / (_E2 * r) * d + 9.0 / _E2,
    )
    out[d >= 1.5 * r] = 0.0
    return out


def _deriv_array(d, r):
    out = np.where(
        d <= r,
        -4.0 * d / (r * r) * np.exp(-2.0 * d * d / (r * r)),
        8.0 / (_E2 * r * r) * d - 12.0 / (_E2 * r),
    )
    out[d >= 1.5 * r] = 0.0
    return out


@dataclass(frozen=True)
class GridSpec:
    """Cubic lattice centered on the binding site.

    There are ``round(edge_length / resolution) + 1`` points per side, so
    both faces of the box are sampled (49 points for the 24 A / 0.5 A default).
    """

    center: tuple = (0.0, 0.0, 0.0)
    edge_length: float = 24.0
    resolution: float = 0.5
    channel_count: int = 1

    def __post_init__(self):
        center = tuple(float(c) for c in np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "center", center)
        if not self.edge_length > 0:
            raise ContractError(f"edge_length must be > 0, got {self.edge_length}")
        if not self.resolution > 0:
            raise ContractError(f"resolution must be > 0, got {self.resolution}")
        if self.channel_count < 1:
            raise ContractError(f"channel_count must be >= 1, got {self.channel_count}")

    @property
    def points_per_side(self):
        return int(round(self.edge_length / self.resolution)) + 1

    @property
    def shape(self):
        n = self.points_per_side
        return (self.channel_count, n, n, n)

    @property
    def origin(self):
        half = (self.points_per_side - 1) * self.resolution / 2.0
        return np.asarray(self.center) - half

    def point_coords(self, axis_index):
        return self.origin[None, :] + np.asarray(axis_index, dtype=float) * self.resolution

    def with_center(self, center):
        return GridSpec(tuple(center), self.edge_length, self.resolution, self.channel_count)

    def contains(self, point):
        lo = self.origin
        hi = lo + (self.points_per_side - 1) * self.resolution
        point = np.asarray(point)
        return bool(np.all(point >= lo) and np.all(point <= hi))

    def to_dict(self):
        return {
            "center": list(self.center),
            "edge_length": self.edge_length,
            "resolution": self.resolution,
            "channel_count": self.channel_count,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["center"]), float(doc["edge_length"]), float(doc["resolution"]),
                   int(doc["channel_count"]))


@dataclass
class AtomGrid:
    spec: GridSpec
    values: np.ndarray  # (channel, x, y, z)

    def __post_init__(self):
        if self.values.shape != self.spec.shape:
            raise ContractError(f"grid values shape {self.values.shape} != spec shape {self.spec.shape}")

    @property
    def channels(self):
        return list(self.values)


def _stencil(coords, radii_per_atom, spec, want_disp=False):
    """Lattice neighbourhoods of each atom, restricted to the cube that can
    lie within 1.5 r. Returns flat indices, distances, displacement vectors
    (atom - point, only with ``want_disp``) and a validity mask, each with a
    leading atom axis."""
    n = spec.points_per_side
    res = spec.resolution
    origin = spec.origin
    half = int(math.ceil(1.5 * float(radii_per_atom.max()) / res)) + 1
    offsets = np.arange(-half, half + 1)
    base = np.floor((coords - origin) / res).astype(np.int64)  # (A, 3)
    ix = base[:, 0, None] + offsets  # (A, K)
    iy = base[:, 1, None] + offsets
    iz = base[:, 2, None] + offsets
    valid = ((ix >= 0) & (ix < n))[:, :, None, None] \
        & ((iy >= 0) & (iy < n))[:, None, :, None] \
        & ((iz >= 0) & (iz < n))[:, None, None, :]
    dx = coords[:, 0, None] - (origin[0] + ix * res)
    dy = coords[:, 1, None] - (origin[1] + iy * res)
    dz = coords[:, 2, None] - (origin[2] + iz * res)
    # same summation order as summing the squared displacement components
    dist = np.sqrt((dx * dx)[:, :, None, None] + (dy * dy)[:, None, :, None] + (dz * dz)[:, None, None, :])
    flat = (ix[:, :, None, None] * n + iy[:, None, :, None]) * n + iz[:, None, None, :]
    A = len(coords)
    disp = None
    if want_disp:
        disp = np.stack(np.broadcast_arrays(dx[:, :, None, None], dy[:, None, :, None],
                                            dz[:, None, None, :]), axis=-1).reshape(A, -1, 3)
    return flat.reshape(A, -1), dist.reshape(A, -1), disp, valid.reshape(A, -1)


def _check_atoms(coords, types, radii):
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    types = np.asarray(types, dtype=np.int64).reshape(-1)
    if len(coords) != len(types):
        raise ContractError(f"{len(coords)} coordinates but {len(types)} types")
    if len(types) and (types.min() < 0 or types.max() >= len(radii)):
        raise ContractError("atom type index outside the channel range")
    return coords, types


def rasterize_atoms(coords, types, radii, spec, out=None):
    """Accumulate atom densities into ``out`` (created zeroed if None).

    Atoms are summed in input order at every lattice point, which makes the
    result bit-identical to iterating over the whole lattice per atom.
    """
    radii = np.asarray(radii, dtype=float)
    if len(radii) != spec.channel_count:
        raise ContractError(f"{len(radii)} radii for {spec.channel_count} channels")
    coords, types = _check_atoms(coords, types, radii)
    if out is None:
        out = np.zeros(spec.shape)
    elif out.shape != spec.shape:
        raise ContractError(f"output grid shape {out.shape} != {spec.shape}")
    if len(coords) == 0:
        return out
    r = radii[types]
    flat, dist, _, valid = _stencil(coords, r, spec)
    rr = np.broadcast_to(r[:, None], dist.shape)
    keep = valid & (dist < 1.5 * rr)
    npts = spec.points_per_side ** 3
    target = (flat + (types * npts)[:, None])[keep]
    np.add.at(out.reshape(-1), target, _density_array(dist[keep], rr[keep]))
    return out


def rasterize(receptor, ligand_coords, ligand_types, spec, radii=None):
    """Density grid of a receptor (may be None) plus posed ligand atoms.

    Radii default to the type table of the receptor.
    """
    if radii is None:
        if receptor is None:
            raise ContractError("radii are required when no receptor is given")
        radii = receptor.table.radii
    values = np.zeros(spec.shape)
    if receptor is not None:
        rasterize_atoms(receptor.coords, receptor.types, radii, spec, out=values)
    rasterize_atoms(ligand_coords, ligand_types, radii, spec, out=values)
    return AtomGrid(spec, values)


def grid_backward(upstream, ligand_coords, ligand_types, spec, radii):
    """Per-atom gradients of a scalar given its gradient with respect to every
    grid value. Returns an (n_atoms, 3) array."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != spec.shape:
        raise ContractError(f"upstream gradient shape {upstream.shape} != grid shape {spec.shape}")
    radii = np.asarray(radii, dtype=float)
    coords, types = _check_atoms(ligand_coords, ligand_types, radii)
    grads = np.zeros((len(coords), 3))
    if len(coords) == 0:
        return grads
    r = radii[types]
    flat, dist, disp, valid = _stencil(coords, r, spec, want_disp=True)
    npts = spec.points_per_side ** 3
    safe = np.where(valid, flat + (types * npts)[:, None], 0)
    up = np.where(valid, upstream.reshape(-1)[safe], 0.0)
    deriv = _deriv_array(dist, r[:, None])
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(dist > 0.0, up * deriv / dist, 0.0)
    grads = np.einsum("ak,akj->aj", scale, disp)
    return grads


def save_grid(grid, path):
    """Binary dump: magic, header length, JSON header, channel-major
    x-fastest little-endian float64 values."""
    header = {
        "format_version": GRID_FORMAT_VERSION,
        "spec": grid.spec.to_dict(),
        "channel_count": grid.spec.channel_count,
        "dimensions": [grid.spec.points_per_side] * 3,
        "order": "channel-major, x-fastest",
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(np.transpose(grid.values, (0, 3, 2, 1))).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def load_grid(path):
    data = Path(path).read_bytes()
    if data[:8] != GRID_MAGIC:
        raise FormatError(f"{path}: not a grid dump (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<I", data, 8)
        header = json.loads(data[12:12 + hlen])
    except (struct.error, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt grid header: {exc}") from exc
    if header.get("format_version") != GRID_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported grid format_version {header.get('format_version')!r}")
    spec = GridSpec.from_dict(header["spec"])
    c, n = spec.channel_count, spec.points_per_side
    body = data[12 + hlen:]
    if len(body) != 8 * c * n ** 3:
        raise FormatError(f"{path}: expected {8 * c * n ** 3} payload bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f8").reshape(c, n, n, n)
    return AtomGrid(spec, np.transpose(vals, (0, 3, 2, 1)).astype(float))
