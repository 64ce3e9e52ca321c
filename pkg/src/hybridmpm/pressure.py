"""Assembly and write-back of the coupled four-block pressure system.

Every unknown is attached to one cell. The blocks are ordered
``(p_solid, p_fluid, y_slip, h_interface)``:

* ``p_solid``  on Solid cells,
* ``p_fluid``  on Fluid and FreeSurface cells,
* ``y_slip``   on SlipBoundary cells (wall-adjacent fluid). Its rows are the
  discrete wall-bounded divergence; the wall-normal velocity enters through
  the boundary data ``b`` (static walls, so zero),
* ``h_interface`` on Interface cells, coupling the fluid faces of the cell
  with the faces it shares with Solid cells.

Velocities live on faces. A face touching a Solid cell is a solid degree of
freedom, any other face touching a fluid-like cell is a fluid degree of
freedom; faces without mass in their material and wall faces are fixed.
With ``J`` the transposed cell-to-face gradient restricted to the free faces,
``M`` the lumped face densities and ``S`` the solid compressibility, the
system matrix is ``dt * J M^-1 J^T + S / dt`` on the solid diagonal. Reading
``J^T`` column blocks as ``G^f``, ``B^T``, ``H^fT`` on fluid faces and
``G^s``, ``-H^sT`` on solid faces reproduces all eight block formulas
(``A11 .. A44``). Pressure at empty cells is a zero ghost value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import ConsistencyError
from .grid import FLUID_LIKE, GHOST, Label, PressureFields, SimGrid

BLOCKS = ("p_solid", "p_fluid", "y_slip", "h_interface")
_BLOCK_LABELS = ((Label.SOLID,), (Label.FLUID, Label.FREE_SURFACE), (Label.SLIP,), (Label.INTERFACE,))


@dataclass
class BlockSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    offsets: tuple  # block start indices, length 5
    coords: np.ndarray  # (n, 3) cell coordinate of each unknown
    J: sp.csr_matrix  # unknowns x free faces
    inv_density: np.ndarray  # per free face
    n_fluid_dofs: int
    dof_index_f: list  # per axis: flat stored face indices of fluid dofs
    dof_index_s: list
    dof_mask_f: list
    dof_mask_s: list
    dims: tuple
    spacing: float
    dt: float
    solid_diag: float

    @property
    def n(self):
        return self.matrix.shape[0]

    def block_slice(self, name):
        i = BLOCKS.index(name)
        return slice(self.offsets[i], self.offsets[i + 1])

    def block(self, r, c):
        """Sub-matrix A_rc with 1-based block indices as in the block layout."""
        return self.matrix[self.block_slice(BLOCKS[r - 1]), :][:, self.block_slice(BLOCKS[c - 1])]

    def rhs_block(self, name):
        return self.rhs[self.block_slice(name)]

    def to_fields(self, x) -> PressureFields:
        x = np.asarray(x, dtype=np.float64)
        if len(x) != self.n:
            raise ConsistencyError(f"solution has {len(x)} entries, system has {self.n}")
        parts = {name: x[self.block_slice(name)] for name in BLOCKS}
        co = {name: self.coords[self.block_slice(name)] for name in BLOCKS}
        return PressureFields(parts["p_fluid"], parts["p_solid"], parts["y_slip"], parts["h_interface"],
                              co["p_fluid"], co["p_solid"], co["y_slip"], co["h_interface"])

    def from_fields(self, fields: PressureFields):
        """Unknown vector in system order; coordinates must match the index maps."""
        pairs = (("p_solid", fields.p_solid, fields.r_solid), ("p_fluid", fields.p_fluid, fields.r_fluid),
                 ("y_slip", fields.y_slip, fields.r_slip), ("h_interface", fields.h_interface, fields.r_interface))
        for name, vals, coords in pairs:
            mine = self.coords[self.block_slice(name)]
            if coords.shape != mine.shape or not np.array_equal(coords, mine):
                raise ConsistencyError(f"{name}: coordinates do not match the system index map")
        return np.concatenate([p[1] for p in pairs])

    def template(self) -> PressureFields:
        return self.to_fields(np.zeros(self.n))

    def operators(self):
        """Named operator blocks (G^f, B, H^f on fluid faces; G^s, H^s on solid faces)."""
        jf = self.J[:, : self.n_fluid_dofs]
        js = self.J[:, self.n_fluid_dofs:]

        def rows(m, name):
            return m[self.block_slice(name), :]

        return {
            "Gf": rows(jf, "p_fluid").T.tocsr(),
            "B": rows(jf, "y_slip").tocsr(),
            "Hf": rows(jf, "h_interface").tocsr(),
            "Gs": rows(js, "p_solid").T.tocsr(),
            "Hs": (-rows(js, "h_interface")).tocsr(),
            "Minv_f": sp.diags(self.inv_density[: self.n_fluid_dofs]),
            "Minv_s": sp.diags(self.inv_density[self.n_fluid_dofs:]),
        }

    def write_matrix_market(self, path):
        scipy.io.mmwrite(str(path), self.matrix, comment="coupled pressure system", symmetry="general")


def _face_slices(dims, axis):
    """Stored-array slice of interior faces along ``axis`` plus the cell slices
    of the lower and upper neighbours."""
    stored = [slice(GHOST, GHOST + n) for n in dims]
    stored[axis] = slice(GHOST + 1, GHOST + dims[axis])
    lower = [slice(None)] * 3
    upper = [slice(None)] * 3
    lower[axis] = slice(0, dims[axis] - 1)
    upper[axis] = slice(1, dims[axis])
    return tuple(stored), tuple(lower), tuple(upper)


def unknown_layout(labels):
    """Cell -> unknown index map and ordered unknown coordinates."""
    index = -np.ones(labels.shape, dtype=np.int64)
    coords = []
    offsets = [0]
    for labs in _BLOCK_LABELS:
        c = np.argwhere(np.isin(labels, labs))
        index[tuple(c.T)] = offsets[-1] + np.arange(len(c))
        coords.append(c)
        offsets.append(offsets[-1] + len(c))
    return index, np.concatenate(coords).astype(np.int64), tuple(offsets)


def assemble(grid: SimGrid, dt, kappa=1e6, solid_pressure=None) -> BlockSystem:
    dims, dx = grid.dims, grid.spacing
    labels = grid.labels
    index, coords, offsets = unknown_layout(labels)
    n = offsets[-1]
    solid_mask = labels == Label.SOLID
    fluid_like = np.isin(labels, FLUID_LIKE)

    rows, cols, vals = [], [], []
    inv_rho, vel = [], []
    dof_index = {"f": [], "s": []}
    dof_mask = {"f": [], "s": []}
    col0 = 0
    for kind in ("f", "s"):
        masses = grid.mass_f if kind == "f" else grid.mass_s
        velocities = grid.vel_f if kind == "f" else grid.vel_s
        densities = grid.rho_f if kind == "f" else grid.rho_s
        for a in range(3):
            st, lo, hi = _face_slices(dims, a)
            touches_solid = solid_mask[lo] | solid_mask[hi]
            if kind == "s":
                kind_ok = touches_solid
            else:
                kind_ok = ~touches_solid & (fluid_like[lo] | fluid_like[hi])
            m = masses[a][st]
            free = kind_ok & (m > 0)
            mask = np.zeros(masses[a].shape, dtype=bool)
            mask[st] = free
            dof_mask[kind].append(mask)
            dof_index[kind].append(np.flatnonzero(mask))
            nf = int(free.sum())
            face_ids = col0 + np.arange(nf)
            for cells, sign in ((index[lo][free], -1.0), (index[hi][free], 1.0)):
                ok = cells >= 0
                rows.append(cells[ok])
                cols.append(face_ids[ok])
                vals.append(np.full(int(ok.sum()), sign / dx))
            # dof order equals mask flatnonzero order, which matches boolean indexing order
            inv_rho.append(1.0 / densities[a][mask])
            vel.append(velocities[a][mask])
            col0 += nf
        if kind == "f":
            n_fluid = col0

    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, col0))
    inv_rho = np.concatenate(inv_rho)
    v = np.concatenate(vel)

    A = (dt * (J @ sp.diags(inv_rho) @ J.T)).tocsr()
    solid_diag = 1.0 / (kappa * dt)
    s_rows = slice(offsets[0], offsets[1])
    diag_add = np.zeros(n)
    diag_add[s_rows] = solid_diag
    A = A + sp.diags(diag_add)
    A = ((A + A.T) * 0.5).tocsr()
    A.sum_duplicates()
    A.sort_indices()

    rhs = J @ v
    if solid_pressure is not None and offsets[1] > offsets[0]:
        rhs[s_rows] += solid_diag * solid_pressure[tuple(coords[s_rows].T)]

    assert len(np.unique(np.ravel_multi_index(coords.T, dims))) == n if n else True
    return BlockSystem(A, rhs, offsets, coords, J.tocsr(), inv_rho, n_fluid,
                       dof_index["f"], dof_index["s"], dof_mask["f"], dof_mask["s"],
                       dims, dx, dt, solid_diag)


def velocity_correction(system: BlockSystem, x):
    """Per-face velocity change ``-dt * M^-1 J^T x``."""
    return -system.dt * system.inv_density * (system.J.T @ x)


def apply_pressure(grid: SimGrid, system: BlockSystem, solution, in_place=False) -> SimGrid:
    """Write the pressure correction back onto the face velocities."""
    if isinstance(solution, PressureFields):
        x = system.from_fields(solution)
    else:
        x = np.asarray(solution, dtype=np.float64)
    if len(x) != system.n:
        raise ConsistencyError(f"solution has {len(x)} entries, system has {system.n}")
    if tuple(grid.dims) != tuple(system.dims):
        raise ConsistencyError("grid and system dimensions differ")
    out = grid if in_place else grid.copy()
    dv = velocity_correction(system, x)
    pos = 0
    for vel, idx in ((out.vel_f, system.dof_index_f), (out.vel_s, system.dof_index_s)):
        for a in range(3):
            k = len(idx[a])
            flat = vel[a].reshape(-1)
            flat[idx[a]] += dv[pos: pos + k]
            pos += k
    return out


def cell_divergence(grid: SimGrid, which="fluid"):
    """Discrete divergence of the face velocities at every cell centre."""
    vel = grid.vel_f if which == "fluid" else grid.vel_s
    div = np.zeros(grid.dims)
    for a in range(3):
        v = grid.interior(vel[a], a)
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[a] = slice(1, None)
        lo[a] = slice(0, -1)
        div += (v[tuple(hi)] - v[tuple(lo)]) / grid.spacing
    return div
