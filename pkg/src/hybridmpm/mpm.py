"""APIC material-point transfers on a staggered grid, cell classification and
the physical time step."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceError, RangeError
from .grid import GHOST, Label, Material, ParticleSet, SimGrid, face_shape

log = logging.getLogger(__name__)

WALL_MARGIN = 0.1  # particles are kept this many cells away from the walls


@dataclass
class SceneConfig:
    dims: tuple = (16, 16, 16)
    spacing: float = 1.0 / 16
    dt: float = 1e-3
    gravity: tuple = (0.0, -9.81, 0.0)
    fluid_density: float = 1000.0
    particles_per_cell: int = 8
    kappa: float = 1e6
    solver: str = "gs"
    tol: float = 1e-3
    cfl: float = 1.0
    seed: int = 0
    # each block: {"lo": [x, y, z], "hi": [x, y, z], "velocity": [..]} in domain units
    fluid_blocks: list = field(default_factory=list)
    # each sphere: {"center": [..], "radius": r, "velocity": [..]}
    fluid_spheres: list = field(default_factory=list)
    # each solid: {"shape": "box"|"sphere", "center": [..], "half": [..] | "radius": r,
    #              "density": rho, "velocity": [..]}
    solids: list = field(default_factory=list)
    name: str = "scene"

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.gravity = tuple(float(g) for g in self.gravity)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        side = round(self.particles_per_cell ** (1 / 3))
        if side ** 3 != self.particles_per_cell:
            raise ValueError("particles_per_cell must be a perfect cube")
        if min(self.dims) < 4:
            raise ValueError("grid needs >= 4 cells per axis")
        if self.solver not in ("gs", "mgpcg"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @property
    def extent(self):
        return np.asarray(self.dims, dtype=float) * self.spacing

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------- weights

def _bspline(u):
    """Quadratic B-spline base index, weights and node offsets for coordinates
    ``u`` already expressed in node units."""
    base = np.floor(u - 0.5).astype(np.int64)
    fx = u - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    return base, fx, w


def _stencil(position, spacing, axis, shape):
    """Flat node indices, weights and node-minus-particle offsets for the
    27-node stencil of velocity component ``axis``.

    Returns arrays of shape (n, 27), (n, 27) and (n, 27, 3).
    """
    u = position / spacing - np.where(np.arange(3) == axis, 0.0, 0.5)
    base, fx, w = _bspline(u)
    stored = base + GHOST
    if len(position) and ((stored < 0).any() or (stored + 2 >= np.asarray(shape)).any()):
        raise RangeError("particle outside the B-spline support of the grid")
    off = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])
    idx = stored[:, None, :] + off[None]
    flat = np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), shape)
    weight = w[:, 0, off[:, 0]] * w[:, 1, off[:, 1]] * w[:, 2, off[:, 2]]
    dpos = (off[None, :, :] - fx[:, None, :]) * spacing
    return flat, weight, dpos


# ---------------------------------------------------------------- transfers

def p2g(particles: ParticleSet, dims, spacing) -> SimGrid:
    """APIC particle-to-grid transfer into separate fluid and solid channels."""
    grid = SimGrid(dims, spacing)
    if len(particles) == 0:
        return grid
    x = particles.position
    cell = np.floor(x / spacing).astype(np.int64)
    if (cell < 0).any() or (cell >= np.asarray(grid.dims)).any():
        raise RangeError("particle outside grid domain")
    for mat, masses, velocities, density, cell_mass in (
        (Material.FLUID, grid.mass_f, grid.vel_f, grid.rho_f, "cell_mass_f"),
        (Material.SOLID, grid.mass_s, grid.vel_s, grid.rho_s, "cell_mass_s"),
    ):
        sel = particles.material == mat
        if not sel.any():
            continue
        xp, vp, cp, mp = x[sel], particles.velocity[sel], particles.affine[sel], particles.mass[sel]
        volp = particles.volume[sel]
        flat_cell = np.ravel_multi_index(cell[sel].T, grid.dims)
        setattr(grid, cell_mass, np.bincount(flat_cell, weights=mp, minlength=np.prod(grid.dims))
                .reshape(grid.dims))
        for a in range(3):
            shape = face_shape(grid.dims, a)
            flat, w, dpos = _stencil(xp, spacing, a, shape)
            mw = mp[:, None] * w
            mom = mw * (vp[:, a][:, None] + np.einsum("pj,pnj->pn", cp[:, a, :], dpos))
            size = int(np.prod(shape))
            m = np.bincount(flat.ravel(), weights=mw.ravel(), minlength=size)
            p = np.bincount(flat.ravel(), weights=mom.ravel(), minlength=size)
            vol = np.bincount(flat.ravel(), weights=(volp[:, None] * w).ravel(), minlength=size)
            v = np.zeros(size)
            rho = np.zeros(size)
            nz = m > 0
            v[nz] = p[nz] / m[nz]
            rho[nz] = m[nz] / vol[nz]
            masses[a] = m.reshape(shape)
            velocities[a] = v.reshape(shape)
            density[a] = rho.reshape(shape)
    return grid


def grid_momentum(grid: SimGrid, which="fluid"):
    mass = grid.mass_f if which == "fluid" else grid.mass_s
    vel = grid.vel_f if which == "fluid" else grid.vel_s
    return np.array([(mass[a] * vel[a]).sum() for a in range(3)])


def g2p(grid: SimGrid, particles: ParticleSet) -> ParticleSet:
    """Gather velocities and APIC affine matrices; positions are not moved here."""
    out = particles.copy()
    d_inv = 4.0 / grid.spacing ** 2
    for mat, vel in ((Material.FLUID, grid.vel_f), (Material.SOLID, grid.vel_s)):
        sel = np.flatnonzero(particles.material == mat)
        if not len(sel):
            continue
        xp = particles.position[sel]
        for a in range(3):
            flat, w, dpos = _stencil(xp, grid.spacing, a, face_shape(grid.dims, a))
            vn = vel[a].ravel()[flat]
            out.velocity[sel, a] = (w * vn).sum(axis=1)
            out.affine[sel, a, :] = d_inv * np.einsum("pn,pnj->pj", w * vn, dpos)
    return out


# ---------------------------------------------------------------- classification

def _neighbors(mask):
    """For each cell, True if any face neighbour (inside the domain) is set."""
    out = np.zeros_like(mask)
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[:, :, 1:] |= mask[:, :, :-1]
    out[:, :, :-1] |= mask[:, :, 1:]
    return out


def wall_layer(dims):
    m = np.zeros(dims, dtype=bool)
    m[0] = m[-1] = True
    m[:, 0] = m[:, -1] = True
    m[:, :, 0] = m[:, :, -1] = True
    return m


def classify_occupancy(fluid_occ, solid_occ):
    fluid_occ = np.asarray(fluid_occ, dtype=bool)
    solid_occ = np.asarray(solid_occ, dtype=bool)
    labels = np.zeros(fluid_occ.shape, dtype=np.int8)
    interface = fluid_occ & (solid_occ | _neighbors(solid_occ))
    fluid = fluid_occ & ~interface
    empty = ~fluid_occ & ~solid_occ
    labels[solid_occ & ~interface] = Label.SOLID
    labels[fluid] = Label.FLUID
    labels[fluid & _neighbors(empty)] = Label.FREE_SURFACE
    labels[fluid & wall_layer(fluid_occ.shape)] = Label.SLIP
    labels[interface] = Label.INTERFACE
    return labels


def classify_cells(grid: SimGrid) -> SimGrid:
    """Label cells from binned particle mass.

    Fluid-occupied cells that also hold solid mass or touch a solid-occupied
    cell become Interface; remaining fluid cells on the wall layer become
    SlipBoundary, then those touching an empty cell become FreeSurface.
    """
    grid.labels = classify_occupancy(grid.cell_mass_f > 0, grid.cell_mass_s > 0)
    return grid


# ---------------------------------------------------------------- helpers

def enforce_walls(grid: SimGrid):
    """Zero the wall-normal velocity on the domain walls and the ghost layer beyond."""
    for vel in (grid.vel_f, grid.vel_s):
        for a in range(3):
            n = grid.dims[a]
            sl = [slice(None)] * 3
            sl[a] = slice(0, GHOST + 1)
            vel[a][tuple(sl)] = 0.0
            sl[a] = slice(GHOST + n, None)
            vel[a][tuple(sl)] = 0.0


def extrapolate(vel, valid, mass, layers=4):
    """Fill faces that carry mass but were not solved for with the mean of
    solved neighbours, growing outward ``layers`` times."""
    valid = valid.copy()
    for _ in range(layers):
        acc = np.zeros_like(vel)
        cnt = np.zeros_like(vel)
        vv = np.where(valid, vel, 0.0)
        for ax in range(3):
            for s in (1, -1):
                src = [slice(None)] * 3
                dst = [slice(None)] * 3
                if s == 1:
                    src[ax], dst[ax] = slice(0, -1), slice(1, None)
                else:
                    src[ax], dst[ax] = slice(1, None), slice(0, -1)
                acc[tuple(dst)] += vv[tuple(src)]
                cnt[tuple(dst)] += valid[tuple(src)]
        fill = ~valid & (mass > 0) & (cnt > 0)
        if not fill.any():
            break
        vel[fill] = acc[fill] / cnt[fill]
        valid |= fill


def rigid_projection(particles: ParticleSet):
    """Replace each solid body's particle velocities by the body's best-fit
    rigid motion (mass-weighted linear and angular momentum)."""
    solid = particles.material == Material.SOLID
    for b in np.unique(particles.body[solid]):
        idx = np.flatnonzero(solid & (particles.body == b))
        m = particles.mass[idx]
        x = particles.position[idx]
        v = particles.velocity[idx]
        mt = m.sum()
        com = (m[:, None] * x).sum(0) / mt
        vcom = (m[:, None] * v).sum(0) / mt
        r = x - com
        ang = (m[:, None] * np.cross(r, v - vcom)).sum(0)
        inertia = (m * (r * r).sum(1)).sum() * np.eye(3) - np.einsum("p,pi,pj->ij", m, r, r)
        omega = np.linalg.pinv(inertia) @ ang
        particles.velocity[idx] = vcom + np.cross(omega, r)
        skew = np.array([[0, -omega[2], omega[1]], [omega[2], 0, -omega[0]], [-omega[1], omega[0], 0]])
        particles.affine[idx] = skew
    return particles


def clamp_positions(particles: ParticleSet, dims, spacing):
    lo = WALL_MARGIN * spacing
    hi = (np.asarray(dims) - WALL_MARGIN) * spacing
    np.clip(particles.position, lo, hi, out=particles.position)
    return particles


# ---------------------------------------------------------------- scene setup

def _lattice(cfg: SceneConfig):
    side = round(cfg.particles_per_cell ** (1 / 3))
    d, h, w = cfg.dims
    sub = (np.arange(side) + 0.5) / side
    ii, jj, kk = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], 1).astype(float)
    a, b, c = np.meshgrid(sub, sub, sub, indexing="ij")
    offs = np.stack([a.ravel(), b.ravel(), c.ravel()], 1)
    return ((cells[:, None, :] + offs[None]) * cfg.spacing).reshape(-1, 3)


def _inside(points, shape):
    c = np.asarray(shape["center"], dtype=float)
    if shape.get("shape", "box") == "sphere" or "radius" in shape and "half" not in shape:
        return ((points - c) ** 2).sum(1) <= shape["radius"] ** 2
    half = np.asarray(shape["half"], dtype=float)
    return (np.abs(points - c) <= half).all(1)


def _box(block):
    lo = np.asarray(block["lo"], dtype=float)
    hi = np.asarray(block["hi"], dtype=float)
    return {"shape": "box", "center": (lo + hi) / 2, "half": (hi - lo) / 2}


def seed_particles(cfg: SceneConfig) -> ParticleSet:
    pts = _lattice(cfg)
    vol = cfg.spacing ** 3 / cfg.particles_per_cell
    taken = np.zeros(len(pts), dtype=bool)
    parts = []
    for b, solid in enumerate(cfg.solids):
        sel = _inside(pts, solid) & ~taken
        taken |= sel
        n = int(sel.sum())
        vel = np.asarray(solid.get("velocity", (0, 0, 0)), dtype=float)
        parts.append(ParticleSet(pts[sel], np.tile(vel, (n, 1)), np.zeros((n, 3, 3)),
                                 np.full(n, solid["density"] * vol),
                                 np.full(n, Material.SOLID, dtype=np.int8), np.full(n, b, dtype=np.int64),
                                 np.full(n, vol)))
    regions = [(_box(b), b.get("velocity", (0, 0, 0))) for b in cfg.fluid_blocks]
    regions += [({"shape": "sphere", **s}, s.get("velocity", (0, 0, 0))) for s in cfg.fluid_spheres]
    for shape, vel in regions:
        sel = _inside(pts, shape) & ~taken
        taken |= sel
        n = int(sel.sum())
        parts.append(ParticleSet(pts[sel], np.tile(np.asarray(vel, dtype=float), (n, 1)),
                                 np.zeros((n, 3, 3)), np.full(n, cfg.fluid_density * vol),
                                 np.full(n, Material.FLUID, dtype=np.int8), np.full(n, -1, dtype=np.int64),
                                 np.full(n, vol)))
    particles = ParticleSet.concat(parts)
    return clamp_positions(particles, cfg.dims, cfg.spacing)


# ---------------------------------------------------------------- stepping

@dataclass
class SimState:
    particles: ParticleSet
    frame: int = 0
    time: float = 0.0
    solid_pressure: np.ndarray = None  # dense per-cell solid pressure of the previous frame

    def copy(self):
        sp = None if self.solid_pressure is None else self.solid_pressure.copy()
        return SimState(self.particles.copy(), self.frame, self.time, sp)


@dataclass
class StepResult:
    state: SimState
    fields: object
    report: object
    grid: SimGrid
    system: object
    dt: float


def initial_state(cfg: SceneConfig) -> SimState:
    return SimState(seed_particles(cfg), 0, 0.0, np.zeros(cfg.dims))


def stable_dt(cfg: SceneConfig, particles: ParticleSet):
    vmax = float(np.abs(particles.velocity).max()) if len(particles) else 0.0
    dt = cfg.dt
    if vmax * dt / cfg.spacing > cfg.cfl:
        dt = cfg.cfl * cfg.spacing / vmax
        warnings.warn(f"CFL limit: dt clamped from {cfg.dt:g} to {dt:g}", RuntimeWarning, stacklevel=3)
    return dt


def prepare_grid(state: SimState, cfg: SceneConfig, dt):
    """p2g, classification, explicit gravity and wall conditions."""
    grid = p2g(state.particles, cfg.dims, cfg.spacing)
    classify_cells(grid)
    for masses, vel in ((grid.mass_f, grid.vel_f), (grid.mass_s, grid.vel_s)):
        for a in range(3):
            vel[a][masses[a] > 0] += cfg.gravity[a] * dt
    enforce_walls(grid)
    return grid


def finish_step(state: SimState, cfg: SceneConfig, grid: SimGrid, system, fields, dt) -> SimState:
    """Velocity write-back, g2p, rigid projection and advection."""
    from .pressure import apply_pressure

    apply_pressure(grid, system, fields, in_place=True)
    for a in range(3):
        extrapolate(grid.vel_f[a], system.dof_mask_f[a], grid.mass_f[a])
        extrapolate(grid.vel_s[a], system.dof_mask_s[a], grid.mass_s[a])
    enforce_walls(grid)
    particles = g2p(grid, state.particles)
    rigid_projection(particles)
    particles.position += dt * particles.velocity
    clamp_positions(particles, cfg.dims, cfg.spacing)

    solid_p = np.zeros(cfg.dims)
    if len(fields.r_solid):
        solid_p[tuple(fields.r_solid.T)] = fields.p_solid
    return SimState(particles, state.frame + 1, state.time + dt, solid_p)


def solve_system(system, cfg: SceneConfig, x0=None, tol=None, frame=None):
    from .solvers import solve

    tol = cfg.tol if tol is None else tol
    report = solve(system, system.rhs, x0, tol=tol, method=cfg.solver)
    if not report.converged:
        raise ConvergenceError(f"{cfg.solver} stopped at relative residual "
                               f"{report.relative_residual_history[-1]:.3e} > {tol:g}",
                               report, frame)
    return report


def step_physical(state: SimState, cfg: SceneConfig, tol=None, x0=None) -> StepResult:
    """One full cold-start (unless ``x0`` is given) physical step."""
    from .pressure import assemble

    dt = stable_dt(cfg, state.particles)
    grid = prepare_grid(state, cfg, dt)
    system = assemble(grid, dt, kappa=cfg.kappa, solid_pressure=state.solid_pressure)
    report = solve_system(system, cfg, x0, tol, frame=state.frame)
    fields = system.to_fields(report.solution)
    new_state = finish_step(state, cfg, grid, system, fields, dt)
    return StepResult(new_state, fields, report, grid, system, dt)


def write_particles_csv(path, particles: ParticleSet):
    ids = np.arange(len(particles))
    with open(path, "w") as fh:
        fh.write("id,material,x,y,z,vx,vy,vz\n")
        for i in ids:
            x = particles.position[i]
            v = particles.velocity[i]
            mat = "solid" if particles.material[i] == Material.SOLID else "fluid"
            fh.write(f"{i},{mat},{x[0]:.9g},{x[1]:.9g},{x[2]:.9g},{v[0]:.9g},{v[1]:.9g},{v[2]:.9g}\n")
