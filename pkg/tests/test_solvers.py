import csv

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from conftest import uniform_grid
from hybridmpm.errors import IndefiniteMatrixError, SingularMatrixError
from hybridmpm.grid import Label
from hybridmpm.pressure import assemble
from hybridmpm.solvers import gauss_seidel, gs_sweep, mgpcg, relative_residual, solve

SOLVERS = {"gs": gauss_seidel, "mgpcg": mgpcg}


def random_spd(rng, n=50, cond=50.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    A = q @ np.diag(np.geomspace(1.0, cond, n)) @ q.T
    return sp.csr_matrix((A + A.T) / 2)


def poisson_system(n):
    g = uniform_grid((n, n, n), 1.0 / n, 1000.0, Label.EMPTY)
    g.labels[1:-1, 1:-1, 1:-1] = Label.FLUID
    return assemble(g, 1e-3)


@pytest.mark.parametrize("name", SOLVERS)
def test_identity(name):
    b = np.arange(1.0, 11.0)
    rep = SOLVERS[name](sp.identity(10, format="csr"), b, np.zeros(10), tol=1e-12)
    assert rep.iterations == 1
    assert np.array_equal(rep.solution, b)
    assert len(rep.relative_residual_history) == rep.iterations + 1


@pytest.mark.parametrize("name", SOLVERS)
def test_exact_x0_short_circuits(name):
    rng = np.random.default_rng(0)
    A = random_spd(rng, 20)
    x = rng.normal(size=20)
    b = A @ x
    x_star = scipy.linalg.lu_solve(scipy.linalg.lu_factor(A.toarray()), b)
    rep = SOLVERS[name](A, b, x_star, tol=1e-8)
    assert rep.iterations == 0
    assert rep.warm_started
    assert rep.converged


@pytest.mark.parametrize("name", SOLVERS)
@pytest.mark.parametrize("seed", range(3))
def test_matches_dense_lu_oracle(name, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 50, cond=10.0)
    b = rng.normal(size=50)
    want = scipy.linalg.lu_solve(scipy.linalg.lu_factor(A.toarray()), b)
    rep = SOLVERS[name](A, b, np.zeros(50), tol=1e-8, max_iter=100_000)
    assert rep.converged
    assert rep.relative_residual <= 1e-8
    assert np.linalg.norm(rep.solution - want) <= 1e-6 * np.linalg.norm(want)


def test_cross_solver_agreement():
    s = poisson_system(8)
    a = gauss_seidel(s, np.ones(s.n), tol=1e-10, max_iter=100_000)
    b = mgpcg(s, np.ones(s.n), tol=1e-10)
    assert np.linalg.norm(a.solution - b.solution) <= 1e-6 * np.linalg.norm(b.solution)


@pytest.mark.parametrize("name", SOLVERS)
def test_zero_rhs(name):
    A = random_spd(np.random.default_rng(1), 10)
    rep = SOLVERS[name](A, np.zeros(10), np.zeros(10))
    assert rep.iterations == 0 and rep.converged
    assert not rep.solution.any()
    # nonzero x0 with nonzero residual falls back to zero
    rep = SOLVERS[name](A, np.zeros(10), np.ones(10))
    assert not rep.solution.any()


def test_zero_rhs_empty_system():
    rep = gauss_seidel(sp.csr_matrix((0, 0)), np.zeros(0))
    assert rep.converged and rep.iterations == 0


@pytest.mark.parametrize("name", SOLVERS)
def test_singular_diagonal_names_coordinate(name):
    s = poisson_system(6)
    A = s.matrix.tolil()
    A[3, :] = 0.0
    A[:, 3] = 0.0
    A = A.tocsr()
    A.eliminate_zeros()
    s.matrix = A
    b = np.ones(s.n)
    with pytest.raises(SingularMatrixError) as info:
        SOLVERS[name](s, b)
    assert info.value.row == 3
    assert tuple(info.value.coord) == tuple(s.coords[3])
    assert str(tuple(int(c) for c in s.coords[3])) in str(info.value)


def test_indefinite_matrix_rejected():
    # eigenvalues -1 and 3; the first search direction has negative curvature
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(IndefiniteMatrixError):
        mgpcg(A, np.array([1.0, -1.0]), tol=1e-12)


def test_multigrid_beats_gauss_seidel_on_16_cubed():
    s = poisson_system(16)
    b = np.random.default_rng(0).normal(size=s.n)
    mg = mgpcg(s, b, tol=1e-3)
    gs = gauss_seidel(s, b, tol=1e-3)
    assert mg.converged and gs.converged
    assert mg.iterations < gs.iterations


@pytest.mark.parametrize("name", SOLVERS)
def test_warm_start_dominance(name):
    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = poisson_system(8)
        x_star = rng.normal(size=s.n)
        b = s.matrix @ x_star
        noise = rng.normal(size=s.n)
        near = x_star + 0.1 * np.linalg.norm(x_star) * noise / np.linalg.norm(noise) * rng.uniform(0.1, 1.0)
        other = rng.normal(size=s.n) * 3
        it = {k: SOLVERS[name](s, b, x0, tol=1e-6, max_iter=100_000).iterations
              for k, x0 in (("exact", x_star), ("near", near), ("zero", None), ("other", other))}
        ok = it["exact"] <= min(it.values()) and it["near"] <= it["zero"]
        violations += not ok
    assert violations <= 1


@pytest.mark.parametrize("seed", range(5))
def test_gauss_seidel_error_monotone_in_a_norm(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 12, cond=100.0)
    dense = A.toarray()
    w, V = np.linalg.eigh(dense)
    # A-norm via the eigendecomposition oracle
    half = V @ np.diag(np.sqrt(w)) @ V.T
    b = rng.normal(size=12)
    x_star = V @ ((V.T @ b) / w)
    x = np.zeros(12)
    prev = np.linalg.norm(half @ (x - x_star))
    diag = A.diagonal()
    for _ in range(30):
        gs_sweep(A, diag, b, x)
        cur = np.linalg.norm(half @ (x - x_star))
        assert cur <= prev * (1 + 1e-12)
        prev = cur


def test_relative_residual_conventions():
    rng = np.random.default_rng(0)
    A = random_spd(rng, 8)
    b = rng.normal(size=8)
    x = rng.normal(size=8)
    assert relative_residual(A, np.zeros(8), b) == 1.0
    assert relative_residual(A, np.zeros(8), np.zeros(8)) == 0.0
    exact = np.linalg.solve(A.toarray(), b)
    assert relative_residual(A, exact, b) < 1e-14
    dense = A.toarray()
    oracle = np.sqrt(sum((b[i] - sum(dense[i, j] * x[j] for j in range(8))) ** 2 for i in range(8)))
    oracle /= np.sqrt(sum(v * v for v in b))
    assert abs(relative_residual(A, x, b) - oracle) <= 1e-14 * oracle


@pytest.mark.parametrize("name", ["gs", "mgpcg"])
def test_determinism_and_csv(tmp_path, name):
    s = poisson_system(8)
    b = np.random.default_rng(5).normal(size=s.n)
    r1 = solve(s, b, method=name, tol=1e-6)
    r2 = solve(s, b, method=name, tol=1e-6)
    assert r1.solution.tobytes() == r2.solution.tobytes()
    assert r1.relative_residual_history == r2.relative_residual_history
    p = tmp_path / "hist.csv"
    r1.write_csv(p)
    rows = list(csv.DictReader(open(p)))
    assert [int(r["iteration"]) for r in rows] == list(range(r1.iterations + 1))
    assert [float(r["residual"]) for r in rows] == r1.relative_residual_history


def test_max_iter_status():
    s = poisson_system(8)
    rep = gauss_seidel(s, np.ones(s.n), tol=1e-12, max_iter=3)
    assert rep.status == "max_iter" and not rep.converged and rep.iterations == 3


def test_unknown_method():
    with pytest.raises(ValueError):
        solve(poisson_system(4), method="jacobi")
