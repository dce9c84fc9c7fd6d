"""Navier boundary value problem for the biharmonic operator with a potential.

The fourth-order problem is split into two Dirichlet Poisson problems,
Lap u = w and Lap w = -q u, with u = f and w = g on the boundary.  Eliminating
w on interior nodes gives (L^2 + Q) u = -L B f - B g where L is the 7-point
Dirichlet Laplacian and B collects boundary neighbours.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, Potential, laplacian

RCOND_MIN = 1e-12


class EigenvalueCollision(RuntimeError):
    """The Navier problem is (numerically) singular for this potential."""


class SolverDivergence(RuntimeError):
    pass


@dataclass
class NavierData:
    f: np.ndarray  # u on the boundary, flat face layout
    g: np.ndarray  # Lap u on the boundary

    def __post_init__(self):
        self.f = np.asarray(self.f)
        self.g = np.asarray(self.g)
        if self.f.shape != self.g.shape:
            raise ValueError("f and g must have the same layout")

    def check(self, grid: Grid):
        if self.f.shape != (grid.n_boundary,):
            raise ValueError(f"boundary data length {self.f.shape} != {grid.n_boundary}")
        if not (np.all(np.isfinite(self.f)) and np.all(np.isfinite(self.g))):
            raise ValueError("boundary data contain non-finite values")


@dataclass
class NeumannData:
    du: np.ndarray  # outward normal derivative of u
    dw: np.ndarray  # outward normal derivative of Lap u

    def __sub__(self, other):
        return NeumannData(self.du - other.du, self.dw - other.dw)

    def __add__(self, other):
        return NeumannData(self.du + other.du, self.dw + other.dw)


@dataclass
class BiharmonicSolution:
    u: np.ndarray
    w: np.ndarray  # discrete Lap u, equal to g on the boundary
    grid: Grid
    q_hash: str

    def neumann(self):
        return NeumannData(neumann_trace(self.u, self.grid), neumann_trace(self.w, self.grid))


def interior_laplacian(grid: Grid):
    m = grid.interior_shape()
    ops = []
    for a in range(3):
        k = m[a]
        d = sp.diags([np.ones(k - 1), -2 * np.ones(k), np.ones(k - 1)], [-1, 0, 1]) / grid.step[a] ** 2
        mats = [sp.identity(m[b]) for b in range(3)]
        mats[a] = d
        ops.append(sp.kron(sp.kron(mats[0], mats[1]), mats[2]))
    return (ops[0] + ops[1] + ops[2]).tocsr()


def boundary_lift(grid: Grid, vec):
    """Contribution of boundary values to the 7-point Laplacian at interior nodes."""
    full = np.zeros(grid.shape, dtype=vec.dtype)
    grid.set_boundary(full, vec)
    full[1:-1, 1:-1, 1:-1] = 0
    out = np.zeros(grid.interior_shape(), dtype=vec.dtype)
    s = slice(1, -1)
    dx = grid.step
    out += (full[2:, s, s] + full[:-2, s, s]) / dx[0] ** 2
    out += (full[s, 2:, s] + full[s, :-2, s]) / dx[1] ** 2
    out += (full[s, s, 2:] + full[s, s, :-2]) / dx[2] ** 2
    return out


def dirichlet_eigenvalues(grid: Grid):
    lam = []
    for a in range(3):
        n = grid.shape[a]
        j = np.arange(1, n - 1)
        lam.append(-4 / grid.step[a] ** 2 * np.sin(np.pi * j / (2 * (n - 1))) ** 2)
    return lam[0][:, None, None] + lam[1][None, :, None] + lam[2][None, None, :]


def _dst(x):
    return sfft.dstn(x, type=1, norm="ortho")


class NavierSolver:
    """Factorised solver for one potential on one grid.

    method: 'spectral' (constant q, exact diagonalisation by sine transforms),
    'lu' (sparse LU of L^2 + Q), 'krylov' (GMRES preconditioned by the
    constant-potential solver), or 'auto'.
    """

    LU_MAX_UNKNOWNS = 8000

    def __init__(self, grid: Grid, q: Potential, method="auto", tol=1e-12):
        if q.grid.hash != grid.hash:
            raise ValueError("potential lives on a different grid")
        self.grid = grid
        self.q = q
        self.tol = tol
        self.m = grid.interior_shape()
        self.N = int(np.prod(self.m))
        self.qi = q.values[1:-1, 1:-1, 1:-1]
        self.Lam = dirichlet_eigenvalues(grid)
        self.L = interior_laplacian(grid)
        if method == "auto":
            if q.is_constant:
                method = "spectral"
            elif self.N <= self.LU_MAX_UNKNOWNS or not self._weyl_certified():
                method = "lu"
            else:
                method = "krylov"
        self.method = method
        self.n_solves = 0
        self._setup()

    def _weyl_certified(self):
        return self._weyl_rcond() >= 1e-8

    def _weyl_rcond(self):
        # eigenvalues of L^2 + Q lie in [l + qmin, l + qmax] for each eigenvalue l of L^2
        l2 = (self.Lam**2).ravel()
        lo, hi = l2 + self.qi.min(), l2 + self.qi.max()
        dist = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
        return float(dist.min() / np.max(np.maximum(np.abs(lo), np.abs(hi))))

    def _setup(self):
        if self.method == "spectral":
            d = self.Lam**2 + self.qi.flat[0]
            self.rcond = float(np.abs(d).min() / np.abs(d).max())
            self._check_rcond()
            self._diag = d
        elif self.method == "lu":
            A = (self.L @ self.L + sp.diags(self.qi.ravel())).tocsc()
            self._A = A
            try:
                self._lu = spla.splu(A)
            except RuntimeError as exc:
                raise EigenvalueCollision(str(exc)) from exc
            inv = spla.LinearOperator(
                A.shape, matvec=self._lu.solve, rmatvec=lambda x: self._lu.solve(x, trans="T"), dtype=float
            )
            est = spla.onenormest(inv)
            self.rcond = float(1.0 / (spla.norm(A, 1) * est))
            self._check_rcond()
        elif self.method == "krylov":
            self.rcond = self._weyl_rcond()
            self._check_rcond()
            self._A = (self.L @ self.L + sp.diags(self.qi.ravel())).tocsr()
            qbar = float(np.mean(self.qi))
            d = self.Lam**2 + qbar
            if np.abs(d).min() < 1e-12 * np.abs(d).max():
                d = self.Lam**2
            self._pre_diag = d
        else:
            raise ValueError(f"unknown method {self.method!r}")

    def _check_rcond(self):
        if not np.isfinite(self.rcond) or self.rcond < RCOND_MIN:
            raise EigenvalueCollision(
                f"reciprocal condition {self.rcond:.3e} below {RCOND_MIN:g}: potential collides with a Navier eigenvalue"
            )

    def _solve_interior(self, rhs):
        """Solve (L^2 + Q) u = rhs for a real interior vector."""
        if self.method == "spectral":
            R = rhs.reshape(self.m)
            return _dst(_dst(R) / self._diag).ravel()
        if self.method == "lu":
            return self._lu.solve(rhs)
        pre = spla.LinearOperator(
            (self.N, self.N), matvec=lambda x: _dst(_dst(x.reshape(self.m)) / self._pre_diag).ravel(), dtype=float
        )
        scale = np.linalg.norm(rhs)
        if scale == 0:
            return np.zeros_like(rhs)
        x, info = spla.gmres(self._A, rhs, M=pre, rtol=self.tol, atol=0.0, restart=60, maxiter=40)
        res = np.linalg.norm(self._A @ x - rhs) / scale
        if info != 0 and res > 1e-9:
            raise SolverDivergence(f"GMRES stalled (info={info}, relative residual {res:.2e})")
        return x

    def solve_rhs(self, rhs):
        if np.iscomplexobj(rhs):
            return self._solve_interior(rhs.real.copy()) + 1j * self._solve_interior(rhs.imag.copy())
        return self._solve_interior(rhs)

    def solve(self, data: NavierData) -> BiharmonicSolution:
        data.check(self.grid)
        g = self.grid
        Bf = boundary_lift(g, data.f).ravel()
        Bg = boundary_lift(g, data.g).ravel()
        rhs = -(self.L @ Bf) - Bg
        u_i = self.solve_rhs(rhs)
        w_i = self.L @ u_i + Bf
        dtype = np.result_type(u_i, data.f, data.g)
        U = np.zeros(g.shape, dtype=dtype)
        Wf = np.zeros(g.shape, dtype=dtype)
        g.set_boundary(U, data.f)
        g.set_boundary(Wf, data.g)
        U[1:-1, 1:-1, 1:-1] = u_i.reshape(self.m)
        Wf[1:-1, 1:-1, 1:-1] = w_i.reshape(self.m)
        self.n_solves += 1
        return BiharmonicSolution(U, Wf, g, self.q.digest())

    def residual(self, sol: BiharmonicSolution):
        """Max-norm residual of the two split equations at interior nodes."""
        g = self.grid
        lap_u = _lap7(sol.u, g)
        lap_w = _lap7(sol.w, g)
        r1 = lap_u - sol.w[1:-1, 1:-1, 1:-1]
        r2 = lap_w + self.qi * sol.u[1:-1, 1:-1, 1:-1]
        return float(max(np.abs(r1).max(), np.abs(r2).max()))


def _lap7(U, grid: Grid):
    s = slice(1, -1)
    dx = grid.step
    c = U[s, s, s]
    return (
        (U[2:, s, s] - 2 * c + U[:-2, s, s]) / dx[0] ** 2
        + (U[s, 2:, s] - 2 * c + U[s, :-2, s]) / dx[1] ** 2
        + (U[s, s, 2:] - 2 * c + U[s, s, :-2]) / dx[2] ** 2
    )


class SolverCache:
    """Small LRU cache of factorised solvers keyed by (grid hash, potential hash)."""

    def __init__(self, maxsize=4):
        self.maxsize = maxsize
        self._d = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, grid: Grid, q: Potential, method="auto"):
        key = (grid.hash, q.digest(), method)
        if key in self._d:
            self.hits += 1
            self._d.move_to_end(key)
            return self._d[key]
        self.misses += 1
        s = NavierSolver(grid, q, method)
        self._d[key] = s
        while len(self._d) > self.maxsize:
            self._d.popitem(last=False)
        return s

    def clear(self):
        self._d.clear()


SOLVERS = SolverCache()


def solve_navier(q: Potential, data: NavierData, grid: Grid | None = None) -> BiharmonicSolution:
    grid = q.grid if grid is None else grid
    return SOLVERS.get(grid, q).solve(data)


def neumann_trace(field, grid: Grid):
    """Outward normal derivative on every face, second-order one-sided differences."""
    out = []
    for f in grid.faces:
        a = f.axis
        F = np.moveaxis(field, a, 0)
        if f.side > 0:
            F = F[::-1]
        d = (3 * F[0] - 4 * F[1] + F[2]) / (2 * grid.step[a])
        out.append(d.ravel())
    return np.concatenate(out)


def greens_identity_residual(u, v, q: Potential, grid: Grid | None = None, lap_u=None, lap_v=None):
    """Volume side minus boundary side of the biharmonic Green formula.

    int (B u) conj(v) - int u conj(B* v)
      = int_bd [d_nu(Lap u) conj(v) + d_nu(u) conj(Lap v) - Lap u conj(d_nu v) - u conj(d_nu Lap v)].
    Laplacians may be passed in when known; otherwise they are differenced.
    """
    grid = q.grid if grid is None else grid
    lap_u = laplacian(u, grid) if lap_u is None else lap_u
    lap_v = laplacian(v, grid) if lap_v is None else lap_v
    qv = q.values
    Bu = laplacian(lap_u, grid) + qv * u
    Bv = laplacian(lap_v, grid) + qv * v  # q real, so B* = B
    vol = grid.integrate(Bu * np.conj(v) - u * np.conj(Bv))
    tr = grid.trace
    nt = lambda x: neumann_trace(x, grid)  # noqa: E731
    bd = grid.boundary_integral(
        nt(lap_u) * np.conj(tr(v))
        + nt(u) * np.conj(tr(lap_v))
        - tr(lap_u) * np.conj(nt(v))
        - tr(u) * np.conj(nt(lap_v))
    )
    return vol - bd


def export_solution(sol: BiharmonicSolution, path):
    """Write u and Lap u as flat little-endian float64 plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.stack([sol.u, sol.w])
    is_complex = np.iscomplexobj(arr)
    if is_complex:
        arr = np.stack([arr.real, arr.imag], axis=-1)
    data = np.ascontiguousarray(arr, dtype="<f8")
    bin_path = path.with_suffix(".bin")
    data.tofile(bin_path)
    meta = {
        "shape": list(data.shape),
        "fields": ["u", "lap_u"],
        "complex": bool(is_complex),
        "dtype": "<f8",
        "grid_hash": sol.grid.hash,
        "q_hash": sol.q_hash,
        "domain": sol.grid.spec.to_dict(),
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return [str(bin_path), str(json_path)]


def load_solution(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
    if meta["complex"]:
        data = data[..., 0] + 1j * data[..., 1]
    return data[0], data[1], meta


def thread_count():
    """Worker count from BIHARM_THREADS, defaulting to the machine's cores."""
    default = os.cpu_count() or 1
    try:
        return max(1, int(os.environ.get("BIHARM_THREADS", default)))
    except ValueError:
        return default


def sine_product_solution(grid: Grid):
    """u = sin(pi x) sin(pi y) sin(pi z), with Lap u = -3 pi^2 u and Lap^2 u = 9 pi^4 u."""
    X = grid.mesh()
    return np.sin(np.pi * X[0]) * np.sin(np.pi * X[1]) * np.sin(np.pi * X[2])


def manufactured_study(grids=(17, 25, 33), half_width=0.5, method="auto"):
    """Max-error convergence of the Navier solve for q = -9 pi^4 and the sine-product solution.

    Returns rows (nodes, step, max_error, rate) with rate measured against the previous grid.
    """
    from .grid import DomainSpec, constant

    rows = []
    prev = None
    for n in grids:
        g = Grid(DomainSpec(half_widths=(half_width,) * 3, nodes_per_axis=(n,) * 3))
        u = sine_product_solution(g)
        q = constant(g, -9 * np.pi**4)
        f = g.trace(u)
        sol = SOLVERS.get(g, q, method).solve(NavierData(f, -3 * np.pi**2 * f))
        err = float(np.max(np.abs(sol.u - u)))
        dx = float(g.step[0])
        rate = float("nan") if prev is None else float(np.log(prev[1] / err) / np.log(prev[0] / dx))
        rows.append((n, dx, err, rate))
        prev = (dx, err)
    return rows
