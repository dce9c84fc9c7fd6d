"""Numerical checks of the interior and boundary Carleman estimates for Lap^2 + q.

Linear weight phi(x) = x . alpha, shifted so that min phi = 0 on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import BoundaryPartition, Grid, Potential, derivative_matrix, multi_indices


@dataclass
class CarlemanReport:
    h: float
    min_ratio: float
    min_ratio_over_h2: float
    fitted_C_boundary: float = float("nan")
    violations: int = 0
    samples: int = 0
    extra: dict = field(default_factory=dict)

    def row(self):
        return [self.h, self.min_ratio, self.min_ratio_over_h2, self.fitted_C_boundary, self.violations]


def _weight(grid: Grid, alpha):
    phi = grid.points() @ np.asarray(alpha, dtype=float)
    return phi - phi.min()


def _kron3(mats):
    return sp.kron(sp.kron(mats[0], mats[1]), mats[2]).tocsr()


def zero_extended_bilaplacian(grid: Grid, q: Potential):
    """Lap_h^2 + q on all grid nodes, values outside the box taken as zero."""
    n, dx = grid.shape, grid.step
    lap = 0
    for a in range(3):
        mats = [sp.identity(n[b]) for b in range(3)]
        mats[a] = derivative_matrix(n[a], dx[a], 2, True)
        lap = lap + _kron3(mats)
    return (lap @ lap + sp.diags(q.values.ravel())).tocsr()


def scl_gram(grid: Grid, h, order=4, zero_extended=True):
    """Gram matrix of the discrete H^order_scl inner product (trapezoid weights)."""
    n, dx = grid.shape, grid.step
    W = sp.diags(grid.volume_weights().ravel())
    G = 0
    for beta in multi_indices(order):
        D = _kron3([derivative_matrix(n[a], dx[a], beta[a], zero_extended) for a in range(3)])
        G = G + h ** (2 * sum(beta)) * (D.T @ W @ D)
    return G.tocsr()


def inner_nodes(grid: Grid, layers=2):
    mask = np.zeros(grid.shape, dtype=bool)
    s = slice(layers, -layers)
    mask[s, s, s] = True
    return np.flatnonzero(mask.ravel())


def interior_carleman_ratio(q: Potential, h, alpha=(0, 0, 1), layers=2):
    """min ||e^{phi/h} h^4 B_q e^{-phi/h} w|| / ||w||_{H^4_scl} over w vanishing on ``layers`` boundary layers."""
    grid = q.grid
    phi = _weight(grid, alpha).ravel()
    A = zero_extended_bilaplacian(grid, q).tocoo()
    # explicit diagonal conjugation, formed entrywise to avoid overflow
    vals = A.data * np.exp((phi[A.row] - phi[A.col]) / h) * h**4
    Ac = sp.csr_matrix((vals, (A.row, A.col)), shape=A.shape)
    cols = inner_nodes(grid, layers)
    Ac = Ac[:, cols]
    W = sp.diags(grid.volume_weights().ravel())
    H = (Ac.T @ W @ Ac).toarray()
    G = scl_gram(grid, h)[cols][:, cols].toarray()
    lam = sla.eigh(H, G, eigvals_only=True, subset_by_index=[0, 0])[0]
    ratio = float(np.sqrt(max(lam, 0.0)))
    return CarlemanReport(h, ratio, ratio / h**2, extra={"unknowns": len(cols)})


# ------------------------------------------------------------- boundary check


class SineSample:
    """Random combination of box sine modes: u = Lap u = 0 on the boundary."""

    def __init__(self, grid: Grid, rng, max_mode=3, n_terms=4):
        self.grid = grid
        self.modes = rng.integers(1, max_mode + 1, size=(n_terms, 3))
        self.coef = rng.standard_normal(n_terms)
        self.kk = np.pi * self.modes / grid.lengths  # wave numbers per term and axis

    def _parts(self, pts):
        z = pts[..., None, :] - self.grid.lower  # (..., terms, 3)
        arg = self.kk * z
        return np.sin(arg), np.cos(arg)

    def value(self, pts):
        s, _ = self._parts(pts)
        return np.sum(self.coef * np.prod(s, axis=-1), axis=-1)

    def lap_factor(self):
        return -np.sum(self.kk**2, axis=-1)

    def lap(self, pts):
        s, _ = self._parts(pts)
        return np.sum(self.coef * self.lap_factor() * np.prod(s, axis=-1), axis=-1)

    def bilap(self, pts):
        s, _ = self._parts(pts)
        return np.sum(self.coef * self.lap_factor() ** 2 * np.prod(s, axis=-1), axis=-1)

    def grad(self, pts, which=None):
        s, c = self._parts(pts)
        out = []
        for a in range(3):
            t = s.copy()
            t[..., a] = c[..., a] * self.kk[:, a]
            coef = self.coef if which is None else self.coef * which
            out.append(np.sum(coef * np.prod(t, axis=-1), axis=-1))
        return np.stack(out, axis=-1)

    def normal_derivs(self, pts, normals):
        du = np.sum(self.grad(pts) * normals, axis=-1)
        dlap = np.sum(self.grad(pts, self.lap_factor()) * normals, axis=-1)
        return du, dlap


def boundary_terms(sample: SineSample, q: Potential, h, alpha):
    """Left side and the un-scaled right side of the boundary Carleman estimate."""
    g = q.grid
    alpha = np.asarray(alpha, dtype=float)
    pts = g.points()
    phi_all = pts @ alpha
    shift = phi_all.min()
    e_in = np.exp(-(phi_all - shift) / h)
    u = sample.value(pts)
    Bu = sample.bilap(pts) + q.values * u
    left_vol = g.l2_norm(e_in * h**4 * Bu)
    eu = e_in * u
    # H^1_scl of e^{-phi/h} u with exact gradients of the product
    grad_eu = e_in[..., None] * (sample.grad(pts) - u[..., None] * alpha / h)
    h1 = np.sqrt(g.l2_norm(eu) ** 2 + h * h * sum(g.l2_norm(grad_eu[..., a]) ** 2 for a in range(3)))
    bp = g.boundary_points()
    nrm = g.boundary_normals()
    dot = nrm @ alpha
    e_b = np.exp(-(bp @ alpha - shift) / h)
    du, dlap = sample.normal_derivs(bp, nrm)
    wts = g.boundary_weights()

    def bnorm(vals, mask, sign):
        return float(np.sqrt(np.sum(wts[mask] * np.abs(sign * dot[mask]) * np.abs(vals[mask]) ** 2)))

    part = BoundaryPartition(g, alpha, 0.0)
    minus = part.mask("minus")
    plus = ~minus
    lhs = left_vol + h**1.5 * bnorm(e_b * (-h * h * dlap), minus, -1) + h**2.5 * bnorm(e_b * du, minus, -1)
    rhs = h * h * h1 + h**1.5 * bnorm(e_b * (-h * h * dlap), plus, 1) + h**2.5 * bnorm(e_b * du, plus, 1)
    return lhs, rhs


def boundary_carleman_check(q: Potential, h, alpha=(0, 0, 1), n_samples=50, seed=0, C=None):
    """Fit C so that C * lhs >= rhs over random admissible samples and count violations.

    With ``C`` given, violations are counted against it instead of the fitted value.
    """
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(n_samples):
        s = SineSample(q.grid, rng)
        lhs, rhs = boundary_terms(s, q, h, alpha)
        ratios.append(rhs / lhs)
    ratios = np.asarray(ratios)
    fitted = float(ratios.max())
    use = fitted if C is None else C
    viol = int(np.sum(ratios > use * (1 + 1e-12)))
    return fitted, viol, ratios


def carleman_report(q: Potential, h, alpha=(0, 0, 1), n_samples=50, seed=0, layers=2):
    rep = interior_carleman_ratio(q, h, alpha, layers)
    fitted, viol, ratios = boundary_carleman_check(q, h, alpha, n_samples, seed)
    rep.fitted_C_boundary = fitted
    rep.violations = viol
    rep.samples = n_samples
    rep.extra["median_ratio"] = float(np.median(ratios))
    return rep
