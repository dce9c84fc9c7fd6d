import numpy as np
import pytest

from biharm.forward import (
    SOLVERS,
    EigenvalueCollision,
    NavierData,
    NavierSolver,
    dirichlet_eigenvalues,
    export_solution,
    greens_identity_residual,
    load_solution,
    manufactured_study,
    neumann_trace,
    solve_navier,
    thread_count,
)
from biharm.grid import DomainSpec, Grid, constant, gaussian_bump


def test_quadratic_solution_is_exact(grid13):
    X = grid13.mesh()
    r2 = X[0] ** 2 + X[1] ** 2 + X[2] ** 2
    f = grid13.trace(r2)
    sol = solve_navier(constant(grid13, 0.0), NavierData(f, np.full_like(f, 6.0)))
    assert np.abs(sol.u - r2).max() < 1e-12
    assert np.abs(sol.w - 6.0).max() < 1e-10


def test_zero_data_gives_zero(grid13):
    z = np.zeros(grid13.n_boundary)
    sol = solve_navier(gaussian_bump(grid13, sigma=0.2), NavierData(z, z))
    assert not np.any(sol.u) and not np.any(sol.w)


def test_data_layout_checked(grid13):
    with pytest.raises(ValueError):
        solve_navier(constant(grid13), NavierData(np.zeros(5), np.zeros(5)))
    with pytest.raises(ValueError):
        NavierData(np.zeros(3), np.zeros(4))


def test_neumann_trace_exact_for_quadratics(grid13):
    X = grid13.mesh()
    d = neumann_trace(X[0] ** 2 + 3 * X[1], grid13)
    # faces x = -1/2, x = +1/2: outward derivative of x^2 is 1
    assert np.allclose(grid13.face_view(d, 0), 1.0, atol=1e-12)
    assert np.allclose(grid13.face_view(d, 1), 1.0, atol=1e-12)
    assert np.allclose(grid13.face_view(d, 2), -3.0, atol=1e-12)
    assert np.allclose(grid13.face_view(d, 3), 3.0, atol=1e-12)
    assert np.allclose(grid13.face_view(d, 5), 0.0, atol=1e-12)


@pytest.mark.parametrize("method", ["lu", "krylov"])
def test_methods_agree(grid13, method):
    rng = np.random.default_rng(3)
    data = NavierData(rng.standard_normal(grid13.n_boundary), rng.standard_normal(grid13.n_boundary))
    q = gaussian_bump(grid13, sigma=0.2, amplitude=3.0) + constant(grid13, 2.0)
    ref = NavierSolver(grid13, q, "lu").solve(data)
    sol = NavierSolver(grid13, q, method).solve(data)
    assert np.abs(sol.u - ref.u).max() < 1e-10 * np.abs(ref.u).max()


def test_spectral_matches_lu_for_constant(grid13):
    rng = np.random.default_rng(4)
    data = NavierData(rng.standard_normal(grid13.n_boundary), rng.standard_normal(grid13.n_boundary))
    q = constant(grid13, -7.0)
    a = NavierSolver(grid13, q, "spectral").solve(data)
    b = NavierSolver(grid13, q, "lu").solve(data)
    assert np.abs(a.u - b.u).max() < 1e-10 * np.abs(b.u).max()


def test_split_equations_residual(grid13):
    q = gaussian_bump(grid13, sigma=0.2, amplitude=4.0)
    rng = np.random.default_rng(5)
    data = NavierData(rng.standard_normal(grid13.n_boundary), rng.standard_normal(grid13.n_boundary))
    s = NavierSolver(grid13, q)
    assert s.residual(s.solve(data)) < 1e-8


def test_complex_data(grid13):
    rng = np.random.default_rng(6)
    f, g = rng.standard_normal((2, grid13.n_boundary))
    q = gaussian_bump(grid13, sigma=0.2)
    re = solve_navier(q, NavierData(f, g))
    cx = solve_navier(q, NavierData(1j * f, 1j * g))
    assert np.allclose(cx.u, 1j * re.u, atol=1e-14)


def test_eigenvalue_collision(grid13):
    lam = dirichlet_eigenvalues(grid13)
    with pytest.raises(EigenvalueCollision):
        NavierSolver(grid13, constant(grid13, -lam[0, 0, 0] ** 2))


def test_manufactured_solution_second_order():
    rows = manufactured_study((13, 17, 25))
    assert rows[1][3] > 1.8 and rows[2][3] > 1.8
    assert rows[2][2] < rows[1][2] < rows[0][2]


def _trig(X, terms):
    u = np.zeros_like(X[0])
    lap = np.zeros_like(X[0])
    for k, a in terms:
        c = a * np.cos(k[0] * X[0] + k[1] * X[1] + k[2] * X[2])
        u += c
        lap -= (k @ k) * c
    return u, lap


def test_greens_identity_converges():
    rng = np.random.default_rng(0)
    tu = [(rng.integers(-2, 3, 3).astype(float), rng.standard_normal()) for _ in range(4)]
    tv = [(rng.integers(-2, 3, 3).astype(float), rng.standard_normal()) for _ in range(4)]
    res = []
    for n in (17, 25, 33):
        g = Grid(DomainSpec(nodes_per_axis=(n,) * 3))
        u, lu = _trig(g.mesh(), tu)
        v, lv = _trig(g.mesh(), tv)
        res.append(abs(greens_identity_residual(u, v, gaussian_bump(g, sigma=0.2), lap_u=lu, lap_v=lv)))
    rate = np.log(res[0] / res[2]) / np.log(32 / 16)
    assert rate >= 1.8


def test_greens_identity_interior_support(grid17):
    u = gaussian_bump(grid17, sigma=0.08).values
    v = gaussian_bump(grid17, center=(0.05, 0.0, 0.0), sigma=0.08).values
    assert abs(greens_identity_residual(u, v, gaussian_bump(grid17, sigma=0.2))) < 1e-5


def test_neumann_trace_of_constant(grid13):
    c = np.full(grid13.shape, 3.0)
    assert np.abs(neumann_trace(c, grid13)).max() < 1e-12


def test_manufactured_normal_derivative():
    # box [0, 1]^3: on the face x = 0 the outward derivative is -pi sin(pi y) sin(pi z)
    errs = []
    for n in (13, 25):
        g = Grid(DomainSpec(center=(0.5, 0.5, 0.5), nodes_per_axis=(n,) * 3))
        X = g.mesh()
        u = np.sin(np.pi * X[0]) * np.sin(np.pi * X[1]) * np.sin(np.pi * X[2])
        d = g.face_view(neumann_trace(u, g), 0)
        A, B = np.meshgrid(g.axes[1], g.axes[2], indexing="ij")
        errs.append(np.abs(d + np.pi * np.sin(np.pi * A) * np.sin(np.pi * B)).max())
    assert np.log(errs[0] / errs[1]) / np.log(2) > 1.8


def test_export_roundtrip(grid13, tmp_path):
    rng = np.random.default_rng(7)
    f = rng.standard_normal(grid13.n_boundary) + 1j * rng.standard_normal(grid13.n_boundary)
    sol = solve_navier(gaussian_bump(grid13, sigma=0.2), NavierData(f, 0 * f))
    export_solution(sol, tmp_path / "sol")
    u, w, meta = load_solution(tmp_path / "sol")
    assert np.array_equal(u, sol.u) and np.array_equal(w, sol.w)
    assert meta["grid_hash"] == grid13.hash


def test_solver_cache_reuse(grid13):
    q = gaussian_bump(grid13, sigma=0.25)
    a = SOLVERS.get(grid13, q)
    hits = SOLVERS.hits
    assert SOLVERS.get(grid13, gaussian_bump(grid13, sigma=0.25)) is a
    assert SOLVERS.hits == hits + 1


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("BIHARM_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("BIHARM_THREADS", "junk")
    assert thread_count() >= 1
