"""Complex geometric optics solutions u = exp(i x.zeta/h) (1 + h r) of (Lap^2 + q) u = 0.

The remainder solves P_h(h r) = -q (1 + h r) with P_h = (Lap + (2i/h) zeta.grad)^2.
It is computed on a periodic cube (side L >= 2 R padding) whose first axis is
aligned with Im zeta.  Fourier modes are shifted by half a lattice step along
that axis, so the symbol of h^4 P_h never vanishes and is bounded below by
(2 pi h / L)^2.  The fixed-point map is a contraction when M h^2 L^2 / (4 pi^2) < 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .grid import Grid, Potential, semiclassical_norm, sobolev_norm


class ContractionError(ValueError):
    def __init__(self, factor, h_max):
        super().__init__(f"remainder map is not a contraction (factor {factor:.3g}); largest admissible h is {h_max:.6g}")
        self.factor = factor
        self.h_max = h_max


class NonConvergence(RuntimeError):
    pass


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass
class CGODirections:
    alpha: np.ndarray
    beta: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        for name, v in (("alpha", self.alpha), ("beta", self.beta)):
            if abs(np.linalg.norm(v) - 1) > 1e-12:
                raise ValueError(f"{name} must be a unit vector")
        if abs(self.alpha @ self.beta) > 1e-12:
            raise ValueError("alpha and beta must be orthogonal")
        nx = max(1.0, np.linalg.norm(self.xi))
        if abs(self.xi @ self.alpha) > 1e-10 * nx or abs(self.xi @ self.beta) > 1e-10 * nx:
            raise ValueError("xi must be orthogonal to alpha and beta")

    def mirrored(self):
        """Directions whose CGOs are the complex conjugates of these ones, at -xi."""
        return CGODirections(self.alpha, -self.beta, -self.xi)


def directions_for(xi, alpha_hint=None):
    """Pick alpha perpendicular to xi (close to alpha_hint) and beta completing the frame."""
    xi = np.asarray(xi, dtype=float)
    nx = np.linalg.norm(xi)
    hint = np.array([0.0, 0.0, 1.0]) if alpha_hint is None else _unit(alpha_hint)
    if nx == 0:
        alpha = hint
    else:
        e = xi / nx
        a = hint - (hint @ e) * e
        if np.linalg.norm(a) < 1e-8:
            trial = np.eye(3)[np.argmin(np.abs(e))]
            a = trial - (trial @ e) * e
        alpha = _unit(a)
    if nx == 0:
        trial = np.eye(3)[np.argmin(np.abs(alpha))]
        beta = _unit(trial - (trial @ alpha) * alpha)
    else:
        beta = _unit(np.cross(xi, alpha))
    # clean the tiny round-off in orthogonality
    alpha = _unit(alpha - (alpha @ xi) / max(nx * nx, 1e-300) * xi) if nx else alpha
    return CGODirections(alpha, beta, xi)


@dataclass
class WaveVectors:
    zeta_v: np.ndarray  # h xi/2 + s beta + i alpha, used for the adjoint solution v
    zeta_u: np.ndarray  # -h xi/2 + s beta - i alpha, used for u
    h: float
    dirs: CGODirections


def make_wavevectors(dirs: CGODirections, h) -> WaveVectors:
    h = float(h)
    if h <= 0:
        raise ValueError("h must be positive")
    x2 = float(dirs.xi @ dirs.xi)
    if h * h * x2 / 4 >= 1:
        raise ValueError(f"h |xi| = {h * np.sqrt(x2):.4g} must be below 2")
    s = np.sqrt(1 - h * h * x2 / 4)
    zv = h * dirs.xi / 2 + s * dirs.beta + 1j * dirs.alpha
    zu = -h * dirs.xi / 2 + s * dirs.beta - 1j * dirs.alpha
    return WaveVectors(zv, zu, h, dirs)


@dataclass
class TorusSpec:
    side: float
    nodes: int
    center: np.ndarray

    @classmethod
    def for_grid(cls, grid: Grid, nodes=None, padding=None):
        padding = grid.spec.torus_padding if padding is None else padding
        L = 2 * grid.R * padding
        if nodes is None:
            nodes = int(np.ceil(L / grid.grid_step))
            nodes += nodes % 2
        return cls(L, int(nodes), np.asarray(grid.spec.center, dtype=float))

    def coords(self):
        return -self.side / 2 + self.side * np.arange(self.nodes) / self.nodes


def frame_for(zeta):
    """Orthonormal frame (columns) whose first axis is Im zeta."""
    a = _unit(zeta.imag)
    b = zeta.real - (zeta.real @ a) * a
    if np.linalg.norm(b) < 1e-12:
        trial = np.eye(3)[np.argmin(np.abs(a))]
        b = trial - (trial @ a) * a
    b = _unit(b)
    return np.stack([a, b, np.cross(a, b)], axis=1)


@dataclass
class CGOSolution:
    zeta: np.ndarray
    h: float
    torus: Optional[TorusSpec]
    frame: Optional[np.ndarray]
    rho: Optional[np.ndarray] = None  # periodic part of h r on the torus grid
    trho: Optional[np.ndarray] = None  # periodic part of (Lap + (2i/h) zeta.grad)(h r)
    iterations: int = 0
    contraction: float = 0.0
    residual: float = 0.0
    _splines: dict = field(default_factory=dict, repr=False)

    @classmethod
    def plane_wave(cls, zeta, h):
        return cls(np.asarray(zeta), float(h), None, None)

    @property
    def is_plane_wave(self):
        return self.rho is None

    def _spline(self, name, part):
        key = (name, part)
        if key not in self._splines:
            arr = getattr(self, name)
            arr = arr.real if part == 0 else arr.imag
            self._splines[key] = ndimage.spline_filter(arr, order=3, mode="grid-wrap")
        return self._splines[key]

    def _periodic_at(self, name, pts):
        T = self.torus
        y = (pts - T.center) @ self.frame
        idx = (y + T.side / 2) / (T.side / T.nodes)
        c = idx.reshape(-1, 3).T
        re = ndimage.map_coordinates(self._spline(name, 0), c, order=3, mode="grid-wrap", prefilter=False)
        im = ndimage.map_coordinates(self._spline(name, 1), c, order=3, mode="grid-wrap", prefilter=False)
        shift = np.exp(1j * np.pi * y[..., 0] / T.side)
        return (re + 1j * im).reshape(pts.shape[:-1]) * shift

    def remainder_at(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self.is_plane_wave:
            return np.zeros(pts.shape[:-1], dtype=complex)
        return self._periodic_at("rho", pts) / self.h

    def phase_at(self, pts):
        return np.exp(1j * (np.asarray(pts) @ self.zeta) / self.h)

    def fields_at(self, pts):
        """u and Lap u at physical points."""
        pts = np.asarray(pts, dtype=float)
        e = self.phase_at(pts)
        if self.is_plane_wave:
            return e, np.zeros_like(e)
        return e * (1 + self._periodic_at("rho", pts)), e * self._periodic_at("trho", pts)

    def on_grid(self, grid: Grid):
        return self.fields_at(grid.points())

    def boundary_traces(self, grid: Grid):
        return self.fields_at(grid.boundary_points())


def _wavevectors(T: TorusSpec):
    n, L = T.nodes, T.side
    m = sfft.fftfreq(n, 1.0 / n)
    k0 = 2 * np.pi * (m + 0.5) / L
    k = 2 * np.pi * m / L
    return k0[:, None, None], k[None, :, None], k[None, None, :]


def contraction_factor(M, h, L):
    return M * h * h * L * L / (4 * np.pi**2)


def solve_remainder(q: Potential, zeta, h, torus: Optional[TorusSpec] = None, tol=1e-10, max_iter=500) -> CGOSolution:
    """Fixed-point solution of the conjugated equation for the CGO remainder."""
    zeta = np.asarray(zeta, dtype=complex)
    if abs(zeta @ zeta) > 1e-12:
        raise ValueError("zeta . zeta must vanish")
    if abs(np.linalg.norm(zeta.imag) - 1) > 1e-12:
        raise ValueError("|Im zeta| must be 1")
    h = float(h)
    torus = TorusSpec.for_grid(q.grid) if torus is None else torus
    L = torus.side
    M = q.bound
    kappa = contraction_factor(M, h, L)
    if kappa >= 1:
        raise ContractionError(kappa, 2 * np.pi / (L * np.sqrt(M)))
    F = frame_for(zeta)
    zy = F.T @ zeta
    k0, k1, k2 = _wavevectors(torus)
    kz = zy[0] * k0 + zy[1] * k1 + zy[2] * k2
    kk = k0**2 + k1**2 + k2**2
    lin = -(kk + 2 * kz / h)  # symbol of Lap + (2i/h) zeta.grad
    sym = lin**2  # symbol of P_h
    y = torus.coords()
    Y = np.stack(np.meshgrid(y, y, y, indexing="ij"), axis=-1)
    X = torus.center + Y @ F.T
    qt = q(X)
    # periodic parts carry exp(-i pi y0 / L); since q is compactly supported,
    # q itself can be written in that form without wrap-around error
    shift = np.exp(-1j * np.pi * Y[..., 0] / L)
    rho = np.zeros(qt.shape, dtype=complex)  # periodic part of h r
    qs = qt * shift
    it = 0
    vol = (L / torus.nodes) ** 3
    while True:
        it += 1
        rhs = qs + qt * rho
        new = -sfft.ifftn(sfft.fftn(rhs) / sym)
        diff = np.sqrt(np.sum(np.abs(new - rho) ** 2) * vol) / h
        rho = new
        if diff < tol:
            break
        if it >= max_iter:
            raise NonConvergence(f"remainder iteration did not reach {tol:g} after {max_iter} steps (last change {diff:.2e})")
    rho_hat = sfft.fftn(rho)
    trho = sfft.ifftn(lin * rho_hat)
    sol = CGOSolution(zeta, h, torus, F, rho, trho, it, kappa)
    # residual of the unconjugated equation, measured on torus nodes inside the box
    P_rho = sfft.ifftn(sym * rho_hat)
    inside = q.grid.contains(X)
    sol.residual = _residual(P_rho, qs, qt, rho, shift, X, inside, zeta, h)
    return sol


def _residual(P_rho, qs, qt, rho, shift, X, inside, zeta, h):
    # back to physical fields: multiply periodic parts by conj(shift)
    back = np.conj(shift[inside])
    e = np.exp(-(X[inside] @ zeta.imag) / h)
    Bu = e * back * (P_rho[inside] + qs[inside] + qt[inside] * rho[inside])
    u = e * (1 + back * rho[inside])
    return float(np.linalg.norm(Bu) / np.linalg.norm(u))


def build_cgo(q: Potential, zeta, h, mode="oracle", torus=None, tol=1e-10) -> CGOSolution:
    if mode == "free":
        return CGOSolution.plane_wave(zeta, h)
    if mode != "oracle":
        raise ValueError("mode must be 'oracle' or 'free'")
    return solve_remainder(q, zeta, h, torus, tol)


def cgo_field_norms(sol: CGOSolution, grid: Grid, kind="u"):
    """Sobolev norms of the CGO fields on the box and the implied constants.

    kind 'v': ||Lap v||_{H^1} <= (C/h) e^{2R/h};
    kind 'u': ||Lap u||_{H^2} <= (C/h) e^{2R/h}, ||u||_{H^4} <= (C/h^4) e^{2R/h}.
    """
    h, R = sol.h, grid.R
    u, lu = sol.on_grid(grid)
    r = sol.remainder_at(grid.points())
    grow = np.exp(2 * R / h)
    out = {
        "h": h,
        "r_L2": grid.l2_norm(r),
        "r_H4scl": semiclassical_norm(r, h, grid),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "contraction": sol.contraction,
    }
    if kind == "v":
        n = sobolev_norm(lu, 1, grid)
        out.update({"lap_H1": n, "C_lap_H1": n * h / grow})
    else:
        n2 = sobolev_norm(lu, 2, grid)
        n4 = sobolev_norm(u, 4, grid)
        out.update({"lap_H2": n2, "C_lap_H2": n2 * h / grow, "u_H4": n4, "C_u_H4": n4 * h**4 / grow})
    return out
