"""Dirichlet-to-Neumann map of the Navier problem and its matrix representation.

Inputs (f, g) are expanded in per-face sine modes normalised in
H^{7/2} x H^{3/2}; outputs (d_nu u, d_nu Lap u) are written in coordinates whose
Euclidean norm is the discrete H^{5/2} x H^{1/2} norm.  The operator norm of
a difference of maps is then the largest singular value of the matrix difference.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .forward import SOLVERS, NavierData, NavierSolver, NeumannData
from .grid import BoundaryPartition, Grid, Potential, boundary_sobolev_coords, face_wavenumbers

S_IN = (3.5, 1.5)
S_OUT = (2.5, 0.5)
CACHE_VERSION = 1


class BoundaryBasis:
    """Per-face sine modes up to kmax in each tangential direction, for both slots."""

    def __init__(self, grid: Grid, kmax=6, s_in=S_IN):
        self.grid = grid
        self.kmax = int(kmax)
        self.s_in = s_in
        for f in grid.faces:
            if kmax > min(f.shape) - 2:
                raise ValueError(f"kmax={kmax} exceeds the {min(f.shape) - 2} interior face nodes")
        self.labels = [
            (slot, k, m1, m2)
            for slot in (0, 1)
            for k in range(6)
            for m1 in range(1, self.kmax + 1)
            for m2 in range(1, self.kmax + 1)
        ]

    def __len__(self):
        return len(self.labels)

    def element(self, j):
        """Navier data of basis element j (unit norm in the input space)."""
        slot, k, m1, m2 = self.labels[j]
        g = self.grid
        face = g.faces[k]
        na, nb = face.shape
        da, db = face.steps
        ja = np.arange(1, na - 1)
        jb = np.arange(1, nb - 1)
        pa = np.sqrt(2 / (na - 1)) * np.sin(np.pi * m1 * ja / (na - 1))
        pb = np.sqrt(2 / (nb - 1)) * np.sin(np.pi * m2 * jb / (nb - 1))
        k2 = face_wavenumbers(face)[m1 - 1, m2 - 1]
        scale = 1.0 / np.sqrt((1 + k2) ** self.s_in[slot] * da * db)
        arr = np.zeros(face.shape)
        arr[1:-1, 1:-1] = scale * np.outer(pa, pb)
        vec = np.zeros(g.n_boundary)
        vec[g.face_offsets[k]:g.face_offsets[k + 1]] = arr.ravel()
        zero = np.zeros(g.n_boundary)
        return NavierData(vec, zero) if slot == 0 else NavierData(zero, vec)


def output_coords(nd: NeumannData, grid: Grid, faces: Optional[Sequence[int]] = None, s_out=S_OUT):
    return np.concatenate(
        [boundary_sobolev_coords(nd.du, grid, s_out[0], faces), boundary_sobolev_coords(nd.dw, grid, s_out[1], faces)]
    )


class DtNMap:
    """The map (f, g) -> (d_nu u, d_nu Lap u) for one potential, applied by forward solves."""

    def __init__(self, q: Potential, method="auto"):
        self.q = q
        self.grid = q.grid
        self.method = method
        self._solver: Optional[NavierSolver] = None

    @property
    def solver(self):
        if self._solver is None:
            self._solver = SOLVERS.get(self.grid, self.q, self.method)
        return self._solver

    def apply(self, data: NavierData) -> NeumannData:
        return self.solver.solve(data).neumann()

    def matrix(self, kmax=6, cache_dir=None):
        return assemble_dtn(self.q, kmax, cache_dir=cache_dir, method=self.method)


class DtNDifference:
    """N_1 - N_2 applied to nodal Navier data."""

    def __init__(self, map1: DtNMap, map2: DtNMap):
        if map1.grid.hash != map2.grid.hash:
            raise ValueError("maps on different grids")
        self.map1 = map1
        self.map2 = map2
        self.grid = map1.grid

    def apply(self, data: NavierData) -> NeumannData:
        return self.map1.apply(data) - self.map2.apply(data)


@dataclass
class DtNMatrix:
    matrix: np.ndarray
    kmax: int
    grid_hash: str
    q_hash: str
    faces: tuple = (0, 1, 2, 3, 4, 5)
    meta: dict = field(default_factory=dict)

    def __sub__(self, other: "DtNMatrix"):
        self._compatible(other)
        return DtNMatrix(self.matrix - other.matrix, self.kmax, self.grid_hash, f"{self.q_hash}-{other.q_hash}", self.faces)

    def _compatible(self, other):
        if self.matrix.shape != other.matrix.shape or self.faces != other.faces or self.grid_hash != other.grid_hash:
            raise ValueError("DtN matrices use different grids, bases or boundary subsets")

    def op_norm(self):
        if self.matrix.size == 0:
            return 0.0
        return float(np.linalg.norm(self.matrix, 2))

    def restrict_partial(self, partition: BoundaryPartition, grid: Grid):
        """Keep output rows on faces of the measured set (alpha . nu <= eps)."""
        keep = [k for k in self.faces if k in partition.minus_faces]
        rows = _row_index(grid, self.faces, keep)
        return DtNMatrix(self.matrix[rows], self.kmax, self.grid_hash, self.q_hash, tuple(keep), dict(self.meta))

    def perturbed(self, level, seed=0):
        """Copy with i.i.d. Gaussian noise of spectral size about ``level``."""
        rng = np.random.default_rng(seed)
        E = rng.standard_normal(self.matrix.shape)
        E *= level / np.linalg.norm(E, 2)
        return DtNMatrix(self.matrix + E, self.kmax, self.grid_hash, self.q_hash, self.faces, dict(self.meta))


def _face_coord_len(grid: Grid, k):
    return grid.faces[k].size


def _row_index(grid: Grid, faces, keep):
    """Row indices of the ``keep`` faces inside a matrix whose rows cover ``faces``."""
    lens = {k: _face_coord_len(grid, k) for k in faces}
    idx = []
    block = sum(lens.values())
    for slot in (0, 1):
        start = slot * block
        for k in faces:
            if k in keep:
                idx.extend(range(start, start + lens[k]))
            start += lens[k]
    return np.asarray(idx, dtype=int)


def _cache_key(q: Potential, kmax):
    s = f"{q.grid.hash}|{q.digest()}|{kmax}|{S_IN}|{S_OUT}|v{CACHE_VERSION}"
    return hashlib.sha256(s.encode()).hexdigest()[:20]


class CacheStats:
    hits = 0
    misses = 0


def assemble_dtn(q: Potential, kmax=6, cache_dir=None, method="auto") -> DtNMatrix:
    grid = q.grid
    key = _cache_key(q, kmax)
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        b, j = cache_dir / f"dtn_{key}.bin", cache_dir / f"dtn_{key}.json"
        if b.exists() and j.exists():
            meta = json.loads(j.read_text())
            if meta.get("grid_hash") == grid.hash and meta.get("q_hash") == q.digest():
                M = np.fromfile(b, dtype="<f8").reshape(meta["shape"])
                CacheStats.hits += 1
                return DtNMatrix(M, kmax, grid.hash, q.digest(), tuple(range(6)), meta)
    CacheStats.misses += 1
    basis = BoundaryBasis(grid, kmax)
    solver = SOLVERS.get(grid, q, method)
    cols = []
    for j in range(len(basis)):
        nd = solver.solve(basis.element(j)).neumann()
        cols.append(output_coords(nd, grid))
    M = np.stack(cols, axis=1)
    meta = {
        "shape": list(M.shape),
        "kmax": kmax,
        "grid_hash": grid.hash,
        "q_hash": q.digest(),
        "s_in": list(S_IN),
        "s_out": list(S_OUT),
        "dtype": "<f8",
        "solver": solver.method,
        "rcond": solver.rcond,
    }
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(M, dtype="<f8").tofile(cache_dir / f"dtn_{key}.bin")
        (cache_dir / f"dtn_{key}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return DtNMatrix(M, kmax, grid.hash, q.digest(), tuple(range(6)), meta)


def dtn_operator_norm(A: DtNMatrix, B: DtNMatrix) -> float:
    """||A - B|| from the weighted input norm to the weighted output norm."""
    return (A - B).op_norm()


def reciprocity_matrix(q: Potential, kmax=3):
    """P_ij = int_bd [d_nu(Lap u_i) u_j + d_nu(u_i) Lap u_j] over basis solutions."""
    grid = q.grid
    basis = BoundaryBasis(grid, kmax)
    solver = SOLVERS.get(grid, q)
    w = grid.boundary_weights()
    data = [basis.element(j) for j in range(len(basis))]
    F = np.stack([d.f for d in data])
    G = np.stack([d.g for d in data])
    DU, DW = [], []
    for d in data:
        nd = solver.solve(d).neumann()
        DU.append(nd.du)
        DW.append(nd.dw)
    DU, DW = np.stack(DU), np.stack(DW)
    return (DW * w) @ F.T + (DU * w) @ G.T


def reciprocity_defect(q: Potential, kmax=3):
    P = reciprocity_matrix(q, kmax)
    return float(np.abs(P - P.T).max())
