"""Grids, particles, pressure containers and the field <-> tensor mapping.

Layout conventions
------------------
* ``dims = (d, h, w)`` counts *cells* along the three axes. Index tuples
  ``(i, j, k)`` address (depth, height, width) in row-major order; axis 1 is
  vertical.
* Pressure-like unknowns live at cell centres. Velocities live on a staggered
  (MAC) grid: component ``a`` is sampled at the centres of the faces normal to
  axis ``a``. Those face samples are the "nodes" of the particle transfers.
* Face arrays carry one ghost layer on every side so that quadratic B-spline
  stencils of particles near the walls stay in bounds. Logical face index
  ``0`` and ``dims[a]`` along axis ``a`` are the domain walls.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, RangeError, ShapeError

GHOST = 1
PAD = 2  # tensor padding per side
FIELD_NAMES = ("p_fluid", "p_solid", "y_slip", "h_interface")


class Label(enum.IntEnum):
    EMPTY = 0
    FLUID = 1
    SOLID = 2
    INTERFACE = 3
    SLIP = 4
    FREE_SURFACE = 5


class Material(enum.IntEnum):
    FLUID = 0
    SOLID = 1


FLUID_LIKE = (Label.FLUID, Label.SLIP, Label.FREE_SURFACE, Label.INTERFACE)


def face_shape(dims, axis):
    """Stored shape of the face array for velocity component ``axis``."""
    return tuple(n + 2 * GHOST + (1 if b == axis else 0) for b, n in enumerate(dims))


@dataclass
class SimGrid:
    dims: tuple
    spacing: float
    mass_f: list = None
    vel_f: list = None
    mass_s: list = None
    vel_s: list = None
    rho_f: list = None  # face density: p2g mass over p2g particle volume
    rho_s: list = None
    cell_mass_f: np.ndarray = None
    cell_mass_s: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ShapeError(f"grid needs >= 4 cells per axis, got {self.dims}")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        for name in ("mass_f", "vel_f", "mass_s", "vel_s", "rho_f", "rho_s"):
            if getattr(self, name) is None:
                setattr(self, name, [np.zeros(face_shape(self.dims, a)) for a in range(3)])
        for name in ("cell_mass_f", "cell_mass_s"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.dims))
        if self.labels is None:
            self.labels = np.zeros(self.dims, dtype=np.int8)

    @property
    def cell_volume(self):
        return self.spacing ** 3

    def copy(self):
        return SimGrid(
            self.dims, self.spacing,
            [m.copy() for m in self.mass_f], [v.copy() for v in self.vel_f],
            [m.copy() for m in self.mass_s], [v.copy() for v in self.vel_s],
            [r.copy() for r in self.rho_f], [r.copy() for r in self.rho_s],
            self.cell_mass_f.copy(), self.cell_mass_s.copy(), self.labels.copy(),
        )

    def interior(self, arr, axis):
        """View of a face array restricted to the in-domain faces (walls included)."""
        sl = [slice(GHOST, GHOST + n) for n in self.dims]
        sl[axis] = slice(GHOST, GHOST + self.dims[axis] + 1)
        return arr[tuple(sl)]

    def cell_speed(self, which="fluid"):
        """Speed at cell centres from face-averaged velocity components."""
        vel = self.vel_f if which == "fluid" else self.vel_s
        comps = []
        for a in range(3):
            v = self.interior(vel[a], a)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            comps.append(0.5 * (v[tuple(lo)] + v[tuple(hi)]))
        return np.sqrt(sum(c * c for c in comps))


@dataclass
class ParticleSet:
    position: np.ndarray
    velocity: np.ndarray
    affine: np.ndarray
    mass: np.ndarray
    material: np.ndarray
    body: np.ndarray
    volume: np.ndarray = None

    _FIELDS = ("position", "velocity", "affine", "mass", "material", "body", "volume")

    def __post_init__(self):
        if self.volume is None:
            self.volume = np.zeros(len(self.mass))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)),
                   np.zeros(0), np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self):
        return len(self.mass)

    def copy(self):
        return ParticleSet(*(getattr(self, f).copy() for f in self._FIELDS))

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return ParticleSet.empty()
        return ParticleSet(*(np.concatenate([getattr(p, f) for p in parts])
                             for f in ParticleSet._FIELDS))


def _coords(a):
    return np.asarray(a, dtype=np.int64).reshape(-1, 3)


@dataclass
class PressureFields:
    """Sparse pressure unknowns, each paired with its cell coordinates."""

    p_fluid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_solid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_slip: np.ndarray = field(default_factory=lambda: np.zeros(0))
    h_interface: np.ndarray = field(default_factory=lambda: np.zeros(0))
    r_fluid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    r_solid: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    r_slip: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    r_interface: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        for name, rname in zip(FIELD_NAMES, self.coord_names()):
            vals = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            coords = _coords(getattr(self, rname))
            if len(vals) != len(coords):
                raise ConsistencyError(f"{name}: {len(vals)} values but {len(coords)} coordinates")
            setattr(self, name, vals)
            setattr(self, rname, coords)

    @staticmethod
    def coord_names():
        return ("r_fluid", "r_solid", "r_slip", "r_interface")

    def items(self):
        for name, rname in zip(FIELD_NAMES, self.coord_names()):
            yield name, getattr(self, name), getattr(self, rname)

    def with_values(self, p_fluid, p_solid, y_slip, h_interface):
        return PressureFields(p_fluid, p_solid, y_slip, h_interface,
                              self.r_fluid, self.r_solid, self.r_slip, self.r_interface)

    def vector(self):
        """Concatenated unknown vector in system order (p_solid, p_fluid, y, h)."""
        return np.concatenate([self.p_solid, self.p_fluid, self.y_slip, self.h_interface])

    def total_length(self):
        return sum(len(v) for _, v, _ in self.items())


@dataclass
class PressureTensors:
    X_f: np.ndarray
    X_s: np.ndarray
    X_i: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if not (self.X_f.shape == self.X_s.shape == self.X_i.shape) or self.X_f.ndim != 3:
            raise ShapeError("tensor channels must share one rank-3 shape")

    @property
    def shape(self):
        return self.X_f.shape

    def stack(self):
        return np.stack([self.X_f, self.X_s, self.X_i]).astype(np.float32)

    @classmethod
    def from_stack(cls, arr, frame_index=0):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ShapeError(f"expected (3, D, H, W), got {arr.shape}")
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy(), frame_index)


def _check_range(coords, dims, name):
    if len(coords) and ((coords < 0).any() or (coords >= np.asarray(dims)).any()):
        raise RangeError(f"{name}: coordinate outside grid of {tuple(dims)} cells")


def _check_unique(coords, dims, name):
    flat = np.ravel_multi_index(coords.T, dims) if len(coords) else np.zeros(0, dtype=np.int64)
    if len(np.unique(flat)) != len(flat):
        raise ConsistencyError(f"{name}: duplicate coordinates")


def map_fields(fields: PressureFields, dims, frame_index=0) -> PressureTensors:
    """Scatter sparse fields into three zero-padded dense tensors (float32)."""
    dims = tuple(int(n) for n in dims)
    for name, _, coords in fields.items():
        _check_range(coords, dims, name)
    _check_unique(np.concatenate([fields.r_fluid, fields.r_slip]), dims, "p_fluid + y_slip")
    _check_unique(fields.r_solid, dims, "p_solid")
    _check_unique(fields.r_interface, dims, "h_interface")

    shape = tuple(n + 2 * PAD for n in dims)
    out = [np.zeros(shape, dtype=np.float32) for _ in range(3)]

    def scatter(target, vals, coords):
        c = coords + PAD
        target[c[:, 0], c[:, 1], c[:, 2]] = vals

    scatter(out[0], fields.p_fluid, fields.r_fluid)
    scatter(out[0], fields.y_slip, fields.r_slip)
    scatter(out[1], fields.p_solid, fields.r_solid)
    scatter(out[2], fields.h_interface, fields.r_interface)
    return PressureTensors(out[0], out[1], out[2], frame_index)


def invmap(tensors: PressureTensors, template: PressureFields) -> PressureFields:
    """Gather tensor values at the template's coordinates (widened to float64)."""
    dims = tuple(n - 2 * PAD for n in tensors.shape)

    def gather(src, coords, name):
        _check_range(coords, dims, name)
        c = coords + PAD
        return src[c[:, 0], c[:, 1], c[:, 2]].astype(np.float64)

    return template.with_values(
        gather(tensors.X_f, template.r_fluid, "p_fluid"),
        gather(tensors.X_s, template.r_solid, "p_solid"),
        gather(tensors.X_f, template.r_slip, "y_slip"),
        gather(tensors.X_i, template.r_interface, "h_interface"),
    )


def normalize(x):
    """Signed log10 compression: lg(x+1) for x >= 0, -lg(1-x) otherwise."""
    x = np.asarray(x, dtype=np.float64)
    y = np.sign(x) * np.log10(np.abs(x) + 1.0)
    return y if y.ndim else float(y)


def denormalize(y):
    y = np.asarray(y, dtype=np.float64)
    x = np.sign(y) * (np.power(10.0, np.abs(y)) - 1.0)
    return x if x.ndim else float(x)


def normalize_tensors(t: PressureTensors) -> PressureTensors:
    return PressureTensors(*(normalize(c).astype(np.float32) for c in (t.X_f, t.X_s, t.X_i)), t.frame_index)


def denormalize_tensors(t: PressureTensors) -> PressureTensors:
    # kept in float64 so the solver sees no extra rounding beyond the stored f32
    return PressureTensors(*(denormalize(c) for c in (t.X_f, t.X_s, t.X_i)), t.frame_index)


PGT_MAGIC = b"PGT1"
_PGT_HEADER = struct.Struct("<4s5I")


def write_pgt(path, tensors: PressureTensors):
    d, h, w = tensors.shape
    data = tensors.stack().astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_PGT_HEADER.pack(PGT_MAGIC, d, h, w, int(tensors.frame_index), 3))
        fh.write(data.tobytes(order="C"))


def read_pgt(path) -> PressureTensors:
    raw = Path(path).read_bytes()
    if len(raw) < _PGT_HEADER.size:
        raise ConsistencyError(f"{path}: truncated header")
    magic, d, h, w, frame, nch = _PGT_HEADER.unpack_from(raw)
    if magic != PGT_MAGIC:
        raise ConsistencyError(f"{path}: bad magic {magic!r}")
    if nch != 3:
        raise ConsistencyError(f"{path}: expected 3 channels, got {nch}")
    expected = _PGT_HEADER.size + 4 * nch * d * h * w
    if len(raw) != expected:
        raise ConsistencyError(f"{path}: size {len(raw)} != {expected}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_PGT_HEADER.size).reshape(nch, d, h, w)
    return PressureTensors.from_stack(arr, frame)
