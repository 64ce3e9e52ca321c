import itertools

import numpy as np
import pytest
import scipy.io

from conftest import mixed_scene, uniform_grid
from hybridmpm.grid import Label
from hybridmpm.mpm import initial_state, prepare_grid
from hybridmpm.pressure import BLOCKS, apply_pressure, assemble, cell_divergence
from hybridmpm.solvers import mgpcg

DT = 1e-3
RHO = 1000.0


def stencil_oracle(labels, dx, neumann):
    """Hand-built 7-point matrix over FLUID cells in unknown (argwhere) order."""
    cells = [tuple(c) for c in np.argwhere(labels == Label.FLUID)]
    pos = {c: i for i, c in enumerate(cells)}
    A = np.zeros((len(cells), len(cells)))
    for c, i in pos.items():
        for a, s in itertools.product(range(3), (-1, 1)):
            q = list(c)
            q[a] += s
            q = tuple(q)
            if not 0 <= q[a] < labels.shape[a]:
                if not neumann:
                    A[i, i] += 1
                continue
            A[i, i] += 1
            if q in pos:
                A[i, pos[q]] -= 1
    return A * DT / (RHO * dx ** 2)


def test_stencil_dirichlet_fluid_in_empty():
    dx = 1.0 / 6
    g = uniform_grid((6, 6, 6), dx, RHO, Label.EMPTY)
    g.labels[1:5, 1:5, 1:5] = Label.FLUID
    system = assemble(g, DT)
    A = system.block(2, 2).toarray()
    np.testing.assert_allclose(A, stencil_oracle(g.labels, dx, neumann=False), rtol=1e-12, atol=0)
    assert np.allclose(np.diag(A), 6 * DT / (RHO * dx ** 2))


def test_stencil_neumann_walls_and_null_space():
    dx = 1.0 / 6
    g = uniform_grid((6, 6, 6), dx, RHO, Label.FLUID)
    system = assemble(g, DT)
    A = system.block(2, 2).toarray()
    np.testing.assert_allclose(A, stencil_oracle(g.labels, dx, neumann=True), rtol=1e-12, atol=0)
    # closed domain: constant pressure is in the null space
    assert np.abs(A @ np.ones(len(A))).max() < 1e-12 * np.abs(A).max()


def mixed_system(seed, n=8):
    cfg = mixed_scene(seed, n)
    grid = prepare_grid(initial_state(cfg), cfg, cfg.dt)
    return grid, assemble(grid, cfg.dt, cfg.kappa)


@pytest.mark.parametrize("seed", range(4))
def test_symmetric_with_nonnegative_diagonal(seed):
    _, s = mixed_system(seed)
    A = s.matrix
    assert (A - A.T).count_nonzero() == 0
    assert np.all(A.diagonal() >= 0)
    # all four blocks are populated by the mixed scene
    assert all(s.block_slice(b).stop > s.block_slice(b).start for b in BLOCKS)


def test_positive_semidefinite_small():
    _, s = mixed_system(1, n=5)
    eig = np.linalg.eigvalsh(s.matrix.toarray())
    assert eig.min() >= -1e-10 * eig.max()


def test_zero_velocity_gives_zero_rhs():
    grid, _ = mixed_system(2)
    for vel in (grid.vel_f, grid.vel_s):
        for v in vel:
            v[:] = 0.0
    assert not assemble(grid, DT).rhs.any()


def test_block_formulas_match_operators():
    _, s = mixed_system(3)
    op = s.operators()
    Gf, B, Hf, Gs, Hs = op["Gf"], op["B"], op["Hf"], op["Gs"], op["Hs"]
    Mf, Ms = op["Minv_f"], op["Minv_s"]
    dt = s.dt
    n_solid = s.block_slice("p_solid").stop
    expected = {
        (1, 1): dt * Gs.T @ Ms @ Gs + s.solid_diag * np.eye(n_solid),
        (2, 2): dt * Gf.T @ Mf @ Gf,
        (3, 3): dt * B @ Mf @ B.T,
        (4, 4): dt * (Hf @ Mf @ Hf.T + Hs @ Ms @ Hs.T),
        (1, 4): -dt * Gs.T @ Ms @ Hs.T,
        (2, 3): dt * Gf.T @ Mf @ B.T,
        (2, 4): dt * Gf.T @ Mf @ Hf.T,
        (3, 4): dt * B @ Mf @ Hf.T,
    }
    for (r, c), want in expected.items():
        got = s.block(r, c).toarray()
        want = np.asarray(want.toarray() if hasattr(want, "toarray") else want)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * np.abs(got).max(initial=1.0))
        np.testing.assert_allclose(s.block(c, r).toarray(), got.T, rtol=0, atol=0)
    # solid and slip/fluid blocks never touch
    assert s.block(1, 2).nnz == 0 and s.block(1, 3).nnz == 0


def test_zero_pressure_leaves_velocity():
    grid, s = mixed_system(0)
    out = apply_pressure(grid, s, np.zeros(s.n))
    for a in range(3):
        assert np.array_equal(out.vel_f[a], grid.vel_f[a])
        assert np.array_equal(out.vel_s[a], grid.vel_s[a])


def test_two_cell_divergence_removed():
    dx = 0.25
    g = uniform_grid((6, 6, 6), dx, RHO, Label.EMPTY)
    g.labels[2:4, 2, 2] = Label.FLUID
    # a single outward-pointing face flow between the two cells
    g.vel_f[0][:] = 0.0
    g.vel_f[0][1 + 3, 1 + 2, 1 + 2] = 1.0
    s = assemble(g, DT)
    x = np.linalg.solve(s.matrix.toarray(), s.rhs)
    out = apply_pressure(g, s, x)
    div = cell_divergence(out)
    assert np.abs(div[2:4, 2, 2]).max() < 1e-10


def grid_velocity_vector(s, grid):
    parts = []
    for vel, idx in ((grid.vel_f, s.dof_index_f), (grid.vel_s, s.dof_index_s)):
        for a in range(3):
            parts.append(vel[a].reshape(-1)[idx[a]])
    return np.concatenate(parts)


def test_post_solve_divergence_bound(solved_frame, dam_break_16):
    # on non-solid rows the face flux after correction is exactly the solver residual
    s = solved_frame.system
    flux = s.J @ grid_velocity_vector(s, solved_frame.grid)
    rows = slice(s.block_slice("p_fluid").start, s.n)
    assert np.linalg.norm(flux[rows]) <= dam_break_16.tol * np.linalg.norm(s.rhs) * (1 + 1e-9)


def test_exact_solve_makes_face_flux_divergence_free():
    grid, s = mixed_system(4)
    rep = mgpcg(s, s.rhs, tol=1e-12, max_iter=500)
    out = apply_pressure(grid, s, rep.solution)
    flux = s.J @ grid_velocity_vector(s, out)
    rows = slice(s.block_slice("p_fluid").start, s.n)
    assert np.abs(flux[rows]).max() < 1e-9 * np.abs(s.rhs).max()
    # solid rows balance against the compressibility term
    ps = s.block_slice("p_solid")
    np.testing.assert_allclose(flux[ps], s.solid_diag * rep.solution[ps], atol=1e-9 * np.abs(s.rhs).max())


def test_matrix_market_dump(tmp_path):
    _, s = mixed_system(5, n=6)
    p = tmp_path / "A.mtx"
    s.write_matrix_market(p)
    back = scipy.io.mmread(str(p)).tocsr()
    assert back.shape == s.matrix.shape
    assert abs(back - s.matrix).max() <= 1e-15 * abs(s.matrix).max()
