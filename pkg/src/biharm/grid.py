"""Box domain, node grid, boundary faces, potentials and discrete norms."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

# face order: (axis, side) with side -1 at the lower coordinate, +1 at the upper
FACES = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    center: tuple = (0.0, 0.0, 0.0)
    half_widths: tuple = (0.5, 0.5, 0.5)
    nodes_per_axis: tuple = (17, 17, 17)
    enclosing_radius: Optional[float] = None
    torus_padding: float = 2.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        hw = tuple(float(v) for v in self.half_widths)
        n = self.nodes_per_axis
        if np.isscalar(n):
            n = (int(n),) * 3
        n = tuple(int(v) for v in n)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", hw)
        object.__setattr__(self, "nodes_per_axis", n)
        problems = self.violations()
        if problems:
            raise DomainError("; ".join(problems))
        if self.enclosing_radius is None:
            object.__setattr__(self, "enclosing_radius", self.corner_radius())
        object.__setattr__(self, "enclosing_radius", float(self.enclosing_radius))
        object.__setattr__(self, "torus_padding", float(self.torus_padding))

    def corner_radius(self):
        c = np.asarray(self.center)
        hw = np.asarray(self.half_widths)
        return float(np.linalg.norm(np.abs(c) + hw))

    def violations(self):
        out = []
        if len(self.center) != 3 or len(self.half_widths) != 3 or len(self.nodes_per_axis) != 3:
            return ["center, half_widths and nodes_per_axis need three entries"]
        if any(not np.isfinite(v) for v in self.center):
            out.append("center must be finite")
        if any(not (v > 0) for v in self.half_widths):
            out.append("half_widths must be positive")
        for n in self.nodes_per_axis:
            if n < 9 or n % 2 == 0:
                out.append(f"nodes_per_axis entry {n} must be odd and >= 9")
        if self.enclosing_radius is not None and all(v > 0 for v in self.half_widths):
            if self.enclosing_radius < self.corner_radius() - 1e-12:
                out.append(
                    f"enclosing_radius {self.enclosing_radius} smaller than corner distance "
                    f"{self.corner_radius():.6g}"
                )
        if self.torus_padding < 2:
            out.append("torus_padding must be >= 2")
        return out

    def to_dict(self):
        return {
            "center": list(self.center),
            "half_widths": list(self.half_widths),
            "nodes_per_axis": list(self.nodes_per_axis),
            "enclosing_radius": self.enclosing_radius,
            "torus_padding": self.torus_padding,
        }

    def digest(self):
        s = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(s.encode()).hexdigest()[:16]


def trapezoid_weights(n, dx):
    w = np.full(n, dx)
    w[0] = w[-1] = dx / 2
    return w


class Grid:
    """Uniform node grid on an axis-aligned box, boundary nodes included."""

    def __init__(self, spec: DomainSpec):
        self.spec = spec
        self.shape = spec.nodes_per_axis
        c = np.asarray(spec.center)
        hw = np.asarray(spec.half_widths)
        self.lower = c - hw
        self.upper = c + hw
        self.lengths = 2 * hw
        self.axes = [np.linspace(self.lower[a], self.upper[a], self.shape[a]) for a in range(3)]
        self.step = np.array([self.axes[a][1] - self.axes[a][0] for a in range(3)])
        self.R = spec.enclosing_radius
        self.hash = spec.digest()
        self.faces = [Face(self, a, s) for a, s in FACES]
        offs = np.cumsum([0] + [f.size for f in self.faces])
        self.face_offsets = offs
        self.n_boundary = int(offs[-1])

    @property
    def grid_step(self):
        return float(self.step.max())

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    def mesh(self):
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self):
        return np.stack(self.mesh(), axis=-1)

    def volume_weights(self):
        w = [trapezoid_weights(self.shape[a], self.step[a]) for a in range(3)]
        return w[0][:, None, None] * w[1][None, :, None] * w[2][None, None, :]

    def integrate(self, field):
        return np.sum(field * self.volume_weights())

    def l2_norm(self, field):
        return float(np.sqrt(np.sum(np.abs(field) ** 2 * self.volume_weights())))

    def interior_shape(self):
        return tuple(n - 2 for n in self.shape)

    # boundary vectors are the six face arrays raveled and concatenated
    def face_view(self, vec, k):
        f = self.faces[k]
        return vec[self.face_offsets[k]:self.face_offsets[k + 1]].reshape(f.shape)

    def trace(self, full):
        return np.concatenate([full[f.index].ravel() for f in self.faces])

    def set_boundary(self, full, vec):
        for k, f in enumerate(self.faces):
            full[f.index] = self.face_view(vec, k)
        return full

    def boundary_points(self):
        return np.concatenate([f.points().reshape(-1, 3) for f in self.faces])

    def boundary_normals(self):
        return np.concatenate([np.tile(f.normal, (f.size, 1)) for f in self.faces])

    def boundary_weights(self):
        return np.concatenate([f.weights().ravel() for f in self.faces])

    def boundary_integral(self, vec):
        return np.sum(vec * self.boundary_weights())

    def face_ids(self):
        return np.concatenate([np.full(f.size, k) for k, f in enumerate(self.faces)])

    def contains(self, pts, tol=0.0):
        pts = np.asarray(pts)
        return np.all((pts >= self.lower - tol) & (pts <= self.upper + tol), axis=-1)


class Face:
    def __init__(self, grid: Grid, axis: int, side: int):
        self.axis = axis
        self.side = side
        self.tangential = [a for a in range(3) if a != axis]
        self.shape = tuple(grid.shape[a] for a in self.tangential)
        self.size = int(np.prod(self.shape))
        self.normal = np.zeros(3)
        self.normal[axis] = side
        idx = [slice(None)] * 3
        idx[axis] = 0 if side < 0 else -1
        self.index = tuple(idx)
        self._grid = grid

    @property
    def steps(self):
        return tuple(self._grid.step[a] for a in self.tangential)

    @property
    def lengths(self):
        return tuple(self._grid.lengths[a] for a in self.tangential)

    def weights(self):
        a, b = self.tangential
        g = self._grid
        wa = trapezoid_weights(g.shape[a], g.step[a])
        wb = trapezoid_weights(g.shape[b], g.step[b])
        return wa[:, None] * wb[None, :]

    def points(self):
        g = self._grid
        a, b = self.tangential
        A, B = np.meshgrid(g.axes[a], g.axes[b], indexing="ij")
        pts = np.empty(A.shape + (3,))
        pts[..., a] = A
        pts[..., b] = B
        pts[..., self.axis] = g.lower[self.axis] if self.side < 0 else g.upper[self.axis]
        return pts


class BoundaryPartition:
    """Split of the boundary faces by the sign of alpha . nu against a threshold eps."""

    def __init__(self, grid: Grid, alpha, eps=0.0):
        alpha = np.asarray(alpha, dtype=float)
        nrm = np.linalg.norm(alpha)
        if not np.isclose(nrm, 1.0, atol=1e-10):
            raise ValueError("alpha must be a unit vector")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        self.grid = grid
        self.alpha = alpha
        self.eps = float(eps)
        self.face_dot = np.array([f.normal @ alpha for f in grid.faces])
        self.plus_faces = [k for k in range(6) if self.face_dot[k] > eps]
        self.minus_faces = [k for k in range(6) if self.face_dot[k] <= eps]

    def mask(self, which="minus"):
        faces = self.minus_faces if which == "minus" else self.plus_faces
        ids = self.grid.face_ids()
        return np.isin(ids, faces)

    def node_dot(self):
        return self.face_dot[self.grid.face_ids()]


# ---------------------------------------------------------------- potentials


class Potential:
    """Real potential stored on grid nodes, optionally with an analytic formula.

    The formula, when present, is used for evaluation off the grid (zero outside
    the box); otherwise values are interpolated trilinearly.
    """

    def __init__(self, grid: Grid, values, func: Optional[Callable] = None, label="custom"):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(f"potential shape {values.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("potential has non-finite values")
        self.grid = grid
        self.values = values
        self.func = func
        self.label = label

    @property
    def bound(self):
        return float(np.max(np.abs(self.values)))

    @property
    def is_constant(self):
        return bool(np.all(self.values == self.values.flat[0]))

    def digest(self):
        h = hashlib.sha256()
        h.update(self.grid.hash.encode())
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        inside = self.grid.contains(pts)
        out = np.zeros(pts.shape[:-1])
        if self.func is not None:
            if np.any(inside):
                out[inside] = self.func(pts[inside])
            return out
        interp = RegularGridInterpolator(self.grid.axes, self.values, bounds_error=False, fill_value=0.0)
        out[inside] = interp(pts[inside])
        return out

    def __add__(self, other):
        return _combine(self, other, 1.0)

    def __sub__(self, other):
        return _combine(self, other, -1.0)

    def scaled(self, t):
        f = None if self.func is None else (lambda x, g=self.func: t * g(x))
        return Potential(self.grid, t * self.values, f, f"{t}*{self.label}")


def _combine(a: Potential, b: Potential, sign):
    if a.grid.hash != b.grid.hash:
        raise ValueError("potentials live on different grids")
    f = None
    if a.func is not None and b.func is not None:
        f = lambda x, fa=a.func, fb=b.func: fa(x) + sign * fb(x)  # noqa: E731
    return Potential(a.grid, a.values + sign * b.values, f, f"{a.label}{'+' if sign > 0 else '-'}{b.label}")


def gaussian_bump(grid: Grid, center=(0.0, 0.0, 0.0), sigma=0.1, amplitude=1.0):
    c = np.asarray(center, dtype=float)

    def f(x):
        return amplitude * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * sigma**2))

    return Potential(grid, f(grid.points()), f, "gaussian_bump")


def sine_product(grid: Grid, k=(1, 1, 1), amplitude=1.0):
    """Product of box sine modes; vanishes on the boundary so the zero extension is continuous."""
    k = np.broadcast_to(np.asarray(k, dtype=float), (3,))
    lo, L = grid.lower, grid.lengths

    def f(x):
        return amplitude * np.prod(np.sin(k * np.pi * (x - lo) / L), axis=-1)

    return Potential(grid, f(grid.points()), f, "sine_product")


def constant(grid: Grid, value=0.0):
    def f(x):
        return np.full(x.shape[:-1], float(value))

    return Potential(grid, np.full(grid.shape, float(value)), f, "constant")


POTENTIAL_FAMILIES = {
    "gaussian_bump": gaussian_bump,
    "sine_product": sine_product,
    "constant": constant,
}


def potential_from_config(grid: Grid, cfg: dict):
    cfg = dict(cfg)
    fam = cfg.pop("family")
    if fam not in POTENTIAL_FAMILIES:
        raise ValueError(f"unknown potential family {fam!r}")
    if "sigma" not in cfg and "σ" in cfg:
        cfg["sigma"] = cfg.pop("σ")
    return POTENTIAL_FAMILIES[fam](grid, **cfg)


# ------------------------------------------------------- finite differences


def fd_weights(offsets, m):
    """Weights w with sum_j w_j u(x + o_j dx) ~ dx^m u^(m)(x)."""
    o = np.asarray(offsets, dtype=float)
    p = np.arange(len(o))
    V = o[None, :] ** p[:, None]
    rhs = np.zeros(len(o))
    rhs[m] = float(np.prod(np.arange(1, m + 1)))
    return np.linalg.solve(V, rhs)


@lru_cache(maxsize=256)
def derivative_matrix(n, dx, m, zero_extended=False):
    """Second-order accurate m-th derivative on n nodes as a sparse n x n matrix.

    Centered stencils in the interior.  Near the ends either one-sided stencils
    or, with ``zero_extended``, the centered stencil truncated (values outside
    taken as zero).
    """
    if m == 0:
        return sp.identity(n, format="csr")
    half = 1 if m <= 2 else 2
    centered = np.arange(-half, half + 1)
    wc = fd_weights(centered, m)
    rows, cols, vals = [], [], []
    npts = m + 2
    for i in range(n):
        if zero_extended or (i - half >= 0 and i + half <= n - 1):
            for o, w in zip(centered, wc):
                j = i + o
                if 0 <= j < n:
                    rows.append(i)
                    cols.append(j)
                    vals.append(w)
        else:
            start = 0 if i - half < 0 else n - npts
            offs = np.arange(start, start + npts) - i
            for o, w in zip(offs, fd_weights(offs, m)):
                rows.append(i)
                cols.append(i + o)
                vals.append(w)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return D / dx**m


def apply_along(D, u, axis):
    u = np.moveaxis(u, axis, 0)
    shp = u.shape
    out = D @ u.reshape(shp[0], -1)
    return np.moveaxis(out.reshape(shp), 0, axis)


def multi_indices(order):
    return [(a, b, c) for a in range(order + 1) for b in range(order + 1 - a) for c in range(order + 1 - a - b)]


def derivative_fields(u, grid: Grid, order, zero_extended=False):
    """All mixed partial derivatives of total order <= order, keyed by multi-index."""
    n, dx = grid.shape, grid.step
    out = {}
    for a in range(order + 1):
        ua = apply_along(derivative_matrix(n[0], dx[0], a, zero_extended), u, 0)
        for b in range(order + 1 - a):
            uab = apply_along(derivative_matrix(n[1], dx[1], b, zero_extended), ua, 1)
            for c in range(order + 1 - a - b):
                out[(a, b, c)] = apply_along(derivative_matrix(n[2], dx[2], c, zero_extended), uab, 2)
    return out


def semiclassical_norm(u, h, grid: Grid, order=4, zero_extended=False):
    """sqrt(sum_{|b|<=order} ||(h d)^b u||^2) with finite differences and trapezoid quadrature."""
    W = grid.volume_weights()
    total = 0.0
    for beta, d in derivative_fields(u, grid, order, zero_extended).items():
        total += h ** (2 * sum(beta)) * np.sum(np.abs(d) ** 2 * W)
    return float(np.sqrt(total))


def sobolev_norm(u, k, grid: Grid):
    return semiclassical_norm(u, 1.0, grid, order=k)


def laplacian(u, grid: Grid):
    """Second-order Laplacian on all nodes (one-sided second differences on the boundary)."""
    out = np.zeros_like(u)
    for a in range(3):
        out = out + apply_along(derivative_matrix(grid.shape[a], grid.step[a], 2), u, a)
    return out


def h_minus1_norm(q, grid: Grid, padding=8):
    """H^{-1}(R^3) norm of the zero extension of a grid field, by a padded FFT.

    Uses q_hat(xi) = int q exp(-i x.xi) dx and ||q||^2 = (2 pi)^-3 int |q_hat|^2/(1+|xi|^2).
    """
    q = np.asarray(q)
    W = grid.volume_weights()
    N = [int(round(padding * (n - 1))) for n in grid.shape]
    dx = grid.step
    buf = np.zeros(N, dtype=q.dtype)
    buf[: grid.shape[0], : grid.shape[1], : grid.shape[2]] = q * W
    if np.iscomplexobj(q):
        Q = sfft.fftn(buf)
        ks = [2 * np.pi * sfft.fftfreq(N[a], dx[a]) for a in range(3)]
        mult = np.ones(Q.shape)
    else:
        Q = sfft.rfftn(buf)
        ks = [2 * np.pi * sfft.fftfreq(N[0], dx[0]), 2 * np.pi * sfft.fftfreq(N[1], dx[1]), 2 * np.pi * sfft.rfftfreq(N[2], dx[2])]
        # half spectrum: interior planes count twice
        mult = np.full(Q.shape, 2.0)
        mult[..., 0] = 1.0
        if N[2] % 2 == 0:
            mult[..., -1] = 1.0
    K2 = ks[0][:, None, None] ** 2 + ks[1][None, :, None] ** 2 + ks[2][None, None, :] ** 2
    cell = np.prod([N[a] * dx[a] for a in range(3)])
    return float(np.sqrt(np.sum(mult * np.abs(Q) ** 2 / (1 + K2)) / cell))


# --------------------------------------------------- boundary Sobolev norms


def face_wavenumbers(face: Face):
    (na, nb), (la, lb) = face.shape, face.lengths
    ka = np.pi * np.arange(1, na - 1) / la
    kb = np.pi * np.arange(1, nb - 1) / lb
    return ka[:, None] ** 2 + kb[None, :] ** 2


def face_sobolev_coords(arr, face: Face, s):
    """Coordinates whose Euclidean norm is the discrete H^s norm of one face field.

    Interior face nodes are expanded in the orthonormal sine basis with weights
    (1+|k|^2)^s; perimeter nodes lie outside that basis and keep their plain
    trapezoid weight.
    """
    da, db = face.steps
    c = sfft.dstn(arr[1:-1, 1:-1], type=1, norm="ortho")
    wk = (1 + face_wavenumbers(face)) ** (s / 2)
    inner = (wk * c * np.sqrt(da * db)).ravel()
    w = face.weights()
    per = np.ones(face.shape, dtype=bool)
    per[1:-1, 1:-1] = False
    edge = (np.sqrt(w[per]) * arr[per]).ravel()
    return np.concatenate([inner, edge])


def boundary_sobolev_coords(vec, grid: Grid, s, faces: Optional[Sequence[int]] = None):
    faces = range(6) if faces is None else faces
    return np.concatenate([face_sobolev_coords(grid.face_view(vec, k), grid.faces[k], s) for k in faces])


def boundary_hs_norm(vec, grid: Grid, s, faces=None):
    return float(np.linalg.norm(boundary_sobolev_coords(vec, grid, s, faces)))


def boundary_sobolev_norm(f, g, s_f, s_g, grid: Grid, faces=None):
    """||f||_{H^s_f} + ||g||_{H^s_g} on the boundary, faces summed in quadrature."""
    return boundary_hs_norm(f, grid, s_f, faces) + boundary_hs_norm(g, grid, s_g, faces)
