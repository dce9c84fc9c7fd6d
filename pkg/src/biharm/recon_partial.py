"""Partial-data pipeline: Neumann data kept only on the boundary part where alpha . nu <= eps.

Cone-restricted Fourier samples, a band-limited Tikhonov extension of those samples to
a ball of frequencies, the lnln schedule, and the identifiability diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .cgo import CGODirections, _unit
from .dtn import DtNMap, assemble_dtn
from .grid import BoundaryPartition, Grid, Potential, h_minus1_norm, trapezoid_weights
from .recon_full import (
    CGOPair,
    FourierSample,
    StabilityRecord,
    _skipped,
    boundary_pairing,
    extract_sample,
    fourier_transform,
    frequency_lattice,
    lowpass_sum,
)

# ------------------------------------------------------------------ cone


def _perp_basis(a):
    a = _unit(a)
    t = np.eye(3)[int(np.argmin(np.abs(a)))]
    e1 = _unit(t - (t @ a) * a)
    return e1, np.cross(a, e1)


@dataclass
class ConeSpec:
    """Directions alpha near alpha0; the frequency cone is the union of the planes alpha^perp."""

    alpha0: np.ndarray
    eps: float = 0.1
    half_angle: float = 0.2
    n_dirs: int = 7

    def __post_init__(self):
        self.alpha0 = _unit(np.asarray(self.alpha0, dtype=float))
        if not 0 <= self.half_angle < math.pi / 2:
            raise ValueError("half_angle must lie in [0, pi/2)")
        if self.n_dirs < 1:
            raise ValueError("n_dirs must be positive")

    def directions(self):
        """alpha0 followed by n_dirs - 1 directions tilted by half_angle at equal azimuths."""
        e1, e2 = _perp_basis(self.alpha0)
        out = [self.alpha0]
        m = self.n_dirs - 1
        for j in range(m):
            phi = 2 * math.pi * j / m
            d = math.cos(self.half_angle) * self.alpha0 + math.sin(self.half_angle) * (
                math.cos(phi) * e1 + math.sin(phi) * e2
            )
            out.append(_unit(d))
        return out

    def partition(self, grid: Grid):
        return BoundaryPartition(grid, self.alpha0, self.eps)

    def in_cone(self, xi):
        """Membership of xi in V (continuous family of directions)."""
        xi = np.atleast_2d(xi)
        r = np.linalg.norm(xi, axis=1)
        return np.abs(xi @ self.alpha0) <= math.sin(self.half_angle) * r + 1e-15

    def measure_fraction(self, n=200_000, seed=0):
        """Monte Carlo |E| / |D| with E = V n B(0,1), D = B(0,2)."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, 3))
        x /= np.linalg.norm(x, axis=1)[:, None]
        x *= 2 * rng.random(n)[:, None] ** (1 / 3)
        inside = np.linalg.norm(x, axis=1) < 1
        return float(np.mean(inside & self.in_cone(x)))

    def measure_fraction_exact(self):
        # the band |cos(polar angle)| <= sin(a) covers sin(a) of the unit sphere; |B1| / |B2| = 1/8
        return math.sin(self.half_angle) / 8


def cone_sampling(cone: ConeSpec, rho, density=2):
    """(xi, alpha) pairs: polar grids of radius rho in each plane alpha^perp, plus the origin."""
    if rho <= 0 or density < 1:
        raise ValueError("empty sample set: need rho > 0 and density >= 1")
    out = [(np.zeros(3), cone.alpha0)]
    n_ang = 4 * density
    for a in cone.directions():
        e1, e2 = _perp_basis(a)
        for i in range(1, density + 1):
            r = rho * i / density
            for j in range(n_ang):
                phi = 2 * math.pi * (j + 0.5 * (i % 2)) / n_ang
                xi = r * (math.cos(phi) * e1 + math.sin(phi) * e2)
                xi = xi - (xi @ a) * a
                out.append((xi, a))
    return out


# ------------------------------------------------------------ extraction


def _check_directions(xi, alpha, partition: BoundaryPartition, grid: Grid):
    xi = np.asarray(xi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if abs(xi @ alpha) > 1e-10 * max(1.0, np.linalg.norm(xi)):
        raise ValueError("xi is not orthogonal to alpha")
    for k in partition.plus_faces:
        if grid.faces[k].normal @ alpha <= partition.eps:
            raise ValueError(f"face {k} is dropped but alpha . nu <= eps there: direction/partition mismatch")


def extract_fourier_partial(maps, xi, alpha, h, partition: BoundaryPartition, mode="oracle", beta=None,
                            delta=None, torus=None) -> FourierSample:
    """(q2 - q1)^(xi) from Neumann differences on the measured part of the boundary only.

    The terms on the unmeasured faces are evaluated as well (they need the full maps) and
    stored under extra["dropped"]; extra["full"] is their sum with the returned value.
    """
    m1, m2 = maps
    grid = m1.grid
    _check_directions(xi, alpha, partition, grid)
    xi = np.asarray(xi, dtype=float)
    alpha = _unit(alpha)
    if beta is None:
        if np.linalg.norm(xi) > 1e-12:
            beta = _unit(np.cross(xi, alpha))
        else:
            beta = _perp_basis(alpha)[0]
    dirs = CGODirections(alpha, np.asarray(beta, dtype=float), xi)
    pair = CGOPair(m1.q, m2.q, dirs, h, mode, torus)
    full, nd, (vt, lvt) = extract_sample((m1, m2), pair, grid)
    kept = boundary_pairing(nd, vt, lvt, grid, partition.mask("minus"))
    dropped = boundary_pairing(nd, vt, lvt, grid, partition.mask("plus"))
    extra = {"partial": True, "dropped": dropped, "full": full, "eps": partition.eps}
    if delta is not None:
        big = 9 * grid.R / h
        extra["bound"] = math.sqrt(h) + (0.0 if delta == 0 else (math.inf if big > 700 else math.exp(big) * delta))
    return FourierSample(xi, kept, h, mode, alpha, extra)


def extract_cone(maps, cone: ConeSpec, rho, h, density=2, mode="free", delta=None):
    grid = maps[0].grid
    part = cone.partition(grid)
    return [extract_fourier_partial(maps, xi, a, h, part, mode, delta=delta) for xi, a in cone_sampling(cone, rho, density)]


# ----------------------------------------------------- smallness propagation


class FitGrid:
    """Coarse nodal model p on the box: F p(xi) = sum_j w_j p_j exp(-i x_j . xi)."""

    def __init__(self, grid: Grid, nodes=7):
        if nodes < 2:
            raise ValueError("fit grid needs at least 2 nodes per axis")
        axes = [np.linspace(lo, hi, nodes) for lo, hi in zip(grid.lower, grid.upper)]
        self.shape = (nodes,) * 3
        self.points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        w = [trapezoid_weights(nodes, (hi - lo) / (nodes - 1)) for lo, hi in zip(grid.lower, grid.upper)]
        self.weights = np.einsum("i,j,k->ijk", *w).ravel()

    def forward(self, xi):
        xi = np.atleast_2d(xi)
        return np.exp(-1j * xi @ self.points.T) * self.weights

    def real_system(self, xi):
        F = self.forward(xi)
        return np.vstack([F.real, F.imag])


def _stack(y):
    y = np.asarray(y, dtype=complex)
    return np.concatenate([y.real, y.imag])


@dataclass
class SmallnessFit:
    lam: float
    field: np.ndarray
    ball_xi: np.ndarray
    ball_values: np.ndarray
    residual: float
    flagged: bool = False
    escalations: int = 0
    theta_emp: Optional[float] = None
    gamma1_surrogate: Optional[float] = None
    extra: dict = field(default_factory=dict)


class _TikhonovSVD:
    """min ||A p - y||^2 + lam sum_j w_j p_j^2 via an SVD of A W^{-1/2}."""

    def __init__(self, A, w):
        self.s_w = np.sqrt(w)
        U, s, Vt = np.linalg.svd(A / self.s_w, full_matrices=False)
        self.U, self.s, self.Vt = U, s, Vt

    def cond(self, lam, n_cols):
        smin = self.s[-1] if len(self.s) == n_cols else 0.0
        return (self.s[0] ** 2 + lam) / (smin**2 + lam)

    def solve(self, y, lam):
        c = self.U.T @ y
        z = self.Vt.T @ (self.s / (self.s**2 + lam) * c)
        return z / self.s_w

    def residual(self, y, lam):
        c = self.U.T @ y
        r_in = lam / (self.s**2 + lam) * c
        r_out2 = max(float(y @ y - c @ c), 0.0)
        return math.sqrt(float(r_in @ r_in) + r_out2)

    def discrepancy_lam(self, y, target, lo=1e-30, hi=1e6):
        """Largest lam (bisection in log scale) with residual <= target."""
        if self.residual(y, lo) > target:
            return lo
        a, b = math.log(lo), math.log(hi)
        for _ in range(80):
            m = 0.5 * (a + b)
            if self.residual(y, math.exp(m)) > target:
                b = m
            else:
                a = m
        return math.exp(a)


def vessella_extend(xi, values, rho, grid: Grid, fit_nodes=7, lam=None, cond_max=1e12, R=None,
                    noise_level=None, tau=1.1):
    """Extend cone samples to the lattice of B(0, rho) through a band-limited Tikhonov fit.

    ``lam`` defaults to 1e-8 * (sample count) and is raised tenfold while the normal
    matrix condition exceeds ``cond_max``.  With ``noise_level`` (per real component),
    lam is chosen by the discrepancy principle instead.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    values = np.asarray(values, dtype=complex).ravel()
    if len(xi) == 0:
        raise ValueError("no samples to extend")
    fg = FitGrid(grid, fit_nodes)
    A = fg.real_system(xi)
    y = _stack(values)
    solver = _TikhonovSVD(A, fg.weights)
    escalations = 0
    if noise_level is not None:
        lam_used = solver.discrepancy_lam(y, tau * noise_level * math.sqrt(len(y)))
    else:
        lam_used = 1e-8 * len(values) if lam is None else lam
        while solver.cond(lam_used, A.shape[1]) > cond_max:
            lam_used *= 10
            escalations += 1
    p = solver.solve(y, lam_used)
    ball = frequency_lattice(rho, grid.R if R is None else R)
    ball_vals = fg.forward(ball) @ p
    resid = float(np.linalg.norm(A @ p - y))
    return SmallnessFit(lam_used, p.reshape(fg.shape), ball, ball_vals, resid, escalations > 0, escalations,
                        extra={"fit_grid": fg.shape, "samples": len(values)})


class VessellaExtension(BaseEstimator):
    """Estimator form of :func:`vessella_extend`: fit on (xi, sample) pairs, predict F p at new xi."""

    def __init__(self, domain: Optional[Grid] = None, fit_nodes=7, lam=None, cond_max=1e12, noise_level=None):
        self.domain = domain
        self.fit_nodes = fit_nodes
        self.lam = lam
        self.cond_max = cond_max
        self.noise_level = noise_level

    def fit(self, X, y):
        if self.domain is None:
            raise ValueError("domain grid required")
        X = check_array(X, ensure_min_features=3)
        y = np.asarray(y, dtype=complex).ravel()
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        res = vessella_extend(X, y, 1.0, self.domain, self.fit_nodes, self.lam, self.cond_max,
                              noise_level=self.noise_level)
        self.fit_grid_ = FitGrid(self.domain, self.fit_nodes)
        self.field_ = res.field.ravel()
        self.lam_ = res.lam
        self.flagged_ = res.flagged
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, ensure_min_features=3)
        return self.fit_grid_.forward(X) @ self.field_


def smallness_modulus(fg: FitGrid, xi, ball, eps, M):
    """Worst case of max_ball |F p| over models with RMS cone data <= eps and ||p||_{L2} <= M.

    The two constraints are merged into one ellipsoid, which changes the value by at
    most a factor sqrt(2); this is the error radius of the optimally regularized extension.
    """
    w = fg.weights
    B = fg.real_system(xi) / np.sqrt(len(xi)) / np.sqrt(w)
    lam, V = np.linalg.eigh(B.T @ B)
    d = 1.0 / (np.clip(lam, 0, None) / eps**2 + 1.0 / M**2)
    F = fg.forward(ball) / np.sqrt(w)
    Lr, Li = F.real @ V, F.imag @ V
    return float(np.sqrt(np.max((Lr**2 + Li**2) @ d)))


def theta_probe(q: Potential, cone: ConeSpec, rho, t_levels=(1.0, 1e-2, 1e-4), fit_nodes=7, density=2):
    """Empirical Hoelder exponent of the extension from the cone to the ball.

    The cone samples of q (on the fit grid) are scaled by t; the worst-case extension
    error on the ball at data size t * RMS(samples) and prior ||q||_{L2} is fitted
    against t level by level.
    """
    grid = q.grid
    fg = FitGrid(grid, fit_nodes)
    p = q(fg.points)
    xi = np.array([x for x, _ in cone_sampling(cone, rho, density)])
    samples = fg.forward(xi) @ p
    eps0 = float(np.sqrt(np.mean(np.abs(samples) ** 2)))
    M = float(np.sqrt(np.sum(fg.weights * p * p)))
    ball = frequency_lattice(rho, grid.R)
    t = np.asarray(t_levels, dtype=float)
    errs = np.array([smallness_modulus(fg, xi, ball, ti * eps0, M) for ti in t])
    slopes = np.diff(np.log(errs)) / np.diff(np.log(t))
    theta = float(np.mean(slopes))
    frac = cone.measure_fraction_exact()
    return {
        "t": t,
        "errors": errs,
        "slopes": slopes,
        "theta_emp": theta,
        "gamma1_surrogate": theta / frac if frac > 0 else float("nan"),
        "eps0": eps0,
        "M": M,
    }


# --------------------------------------------------------------- schedule


def schedule_constants(n=3, theta=0.5, R=1.0):
    """K = (2n+2)/theta + 4n(1-theta)/theta + 18R and L = (3n+2-2n theta)/theta."""
    K = (2 * n + 2) / theta + 4 * n * (1 - theta) / theta + 18 * R
    L = (3 * n + 2 - 2 * n * theta) / theta
    return K, L


@dataclass
class PartialSchedule:
    log_delta: float
    theta: float
    n: int
    R: float
    h0: float
    K: float
    L: float
    log_delta0: float
    rho: float
    h: float
    fallback: bool
    claims: dict

    @property
    def delta(self):
        return math.exp(self.log_delta)

    def fallback_log10_bound(self, C=1.0, M=1.0):
        """log10 of (2CM / delta0^{theta/2}) delta^{theta/2} (delta0 is far below the double range)."""
        return (math.log(2 * C * M) + 0.5 * self.theta * (self.log_delta - self.log_delta0)) / math.log(10)


def schedule_partial(delta=None, R=1.0, theta=0.5, h0=0.2, n=3, log_delta=None) -> PartialSchedule:
    """rho = ln|ln delta| / K, h = 1 / (rho^{(n+2)/theta} e^{2 n rho (1-theta)/theta}); fallback when delta >= delta0.

    delta0 = exp(-exp(K / h0^{1/L})) is kept as its logarithm.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if log_delta is None:
        if delta is None or delta <= 0:
            raise ValueError("delta must be positive")
        log_delta = math.log(delta)
    K, L = schedule_constants(n, theta, R)
    log_delta0 = -math.exp(K / h0 ** (1 / L))
    fallback = not log_delta < log_delta0
    rho = h = float("nan")
    claims = {}
    if abs(log_delta) > 1:
        rho = math.log(abs(log_delta)) / K
        log_inv_h = (n + 2) / theta * math.log(rho) + 2 * n * rho * (1 - theta) / theta if rho > 0 else float("nan")
        h = math.exp(-log_inv_h) if np.isfinite(log_inv_h) and log_inv_h < 700 else (0.0 if np.isfinite(log_inv_h) else float("nan"))
        if not fallback:
            claims = {
                "rho_h_below_2": rho * h < 2,
                "h_below_h0": h < h0,
                "h2rho2_over_4_below_1": h * h * rho * rho / 4 < 1,
            }
    return PartialSchedule(log_delta, theta, n, R, h0, K, L, log_delta0, rho, h, fallback, claims)


def modulus_partial(delta, K, theta=0.5, log_delta=None):
    """(delta + (ln|ln delta| / K)^{-2/theta})^{theta/2}; nan where ln|ln delta| <= 0."""
    ld = math.log(delta) if log_delta is None else log_delta
    if abs(ld) <= 1:
        return float("nan")
    rho = math.log(abs(ld)) / K
    return (math.exp(ld) + rho ** (-2 / theta)) ** (theta / 2)


# ------------------------------------------------------------- experiments


def partial_reconstruction(maps, target: Potential, cone: ConeSpec, rho, h, density=2, mode="free", fit_nodes=7):
    """Cone extraction, extension to the ball, low-pass inversion; returns (H^-1 error, field)."""
    grid = target.grid
    samples = extract_cone(maps, cone, rho, h, density, mode)
    xi = np.array([s.xi for s in samples])
    vals = np.array([s.value for s in samples])
    fit = vessella_extend(xi, vals, rho, grid, fit_nodes)
    field_ = lowpass_sum(fit.ball_xi, fit.ball_values, grid.points(), grid.R)
    return h_minus1_norm(field_ - target.values, grid), field_


def stability_experiment_partial(q1: Potential, p: Potential, t_levels, cone: ConeSpec, kmax=4, theta=0.5, h0=0.2,
                                 n=3, cache_dir=None, reconstruct=None):
    """delta = norm of the DtN difference restricted to the measured faces, e = ||t p||_{H^-1}.

    The implied constant is e / modulus_partial.  ``reconstruct=(rho, h)`` adds the H^-1
    error of the partial-data reconstruction under extra["recon_error"].
    """
    from .forward import EigenvalueCollision

    grid = q1.grid
    part = cone.partition(grid)
    A = assemble_dtn(q1, kmax, cache_dir).restrict_partial(part, grid)
    e_unit = h_minus1_norm(p.values, grid)
    out = []
    for t in t_levels:
        e = abs(t) * e_unit
        if t == 0:
            out.append(_skipped(t, 0.0, "delta = 0"))
            continue
        q2 = q1 + p.scaled(t)
        try:
            B = assemble_dtn(q2, kmax, cache_dir).restrict_partial(part, grid)
        except EigenvalueCollision as exc:
            out.append(_skipped(t, e, f"eigenvalue collision: {exc}"))
            continue
        delta = (A - B).op_norm()
        sch = schedule_partial(delta, grid.R, theta, h0, n)
        mod = modulus_partial(delta, sch.K, theta)
        rec = StabilityRecord(t, delta, e, sch.rho, sch.h, mod, e / mod, not sch.fallback)
        rec.extra.update(
            alpha=cone.alpha0, eps=cone.eps, theta=theta, K=sch.K, L=sch.L,
            fallback_log10_bound=sch.fallback_log10_bound(M=max(q1.bound, q2.bound)),
        )
        if reconstruct is not None:
            rho_r, h_r = reconstruct
            rec.extra["recon_error"], _ = partial_reconstruction((DtNMap(q1), DtNMap(q2)), p.scaled(t), cone, rho_r, h_r)
        out.append(rec)
    return sorted(out, key=lambda r: r.delta)


@dataclass
class IdentifiabilityReport:
    h: np.ndarray
    max_partial: np.ndarray
    max_full: np.ndarray
    slope_partial: float
    slope_full: float
    monotone: bool
    extra: dict = field(default_factory=dict)


def _loglog_slope(h, y):
    h, y = np.asarray(h, dtype=float), np.asarray(y, dtype=float)
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(y), 1)[0])


def identifiability_check(q: Potential, cone: ConeSpec, h_list: Sequence[float] = (0.2, 0.1, 0.05), rho=3.0,
                          density=1, mode="oracle", q_other: Optional[Potential] = None):
    """Max |extracted| over cone samples per h with identical partial maps.

    With ``q_other`` the pair (q, q_other) is used instead and the quantities tracked are the
    dropped unmeasured-face terms and the full-data defect |full - qhat_true|, a
    non-degenerate companion of the same diagnostic.
    """
    grid = q.grid
    q2 = q if q_other is None else q_other
    maps = (DtNMap(q), DtNMap(q2))
    part = cone.partition(grid)
    pairs = cone_sampling(cone, rho, density)
    truth = fourier_transform(q2.values - q.values, grid, np.array([x for x, _ in pairs]))
    mp, mf, weighted = [], [], []
    for h in h_list:
        best_p = best_f = 0.0
        wmax = 0.0
        for (xi, a), tv in zip(pairs, truth):
            s = extract_fourier_partial(maps, xi, a, h, part, mode)
            if q_other is None:
                best_p = max(best_p, abs(s.value))
                best_f = max(best_f, abs(s.extra["full"]))
            else:
                best_p = max(best_p, abs(s.extra["dropped"]))
                best_f = max(best_f, abs(s.extra["full"] - tv))
        if q_other is not None:
            wmax = weighted_source_norm(q, q2, cone.alpha0, h, mode)
            weighted.append(wmax)
        mp.append(best_p)
        mf.append(best_f)
    h_arr = np.asarray(h_list, dtype=float)
    order = np.argsort(h_arr)
    mp_s = np.asarray(mp)[order]
    rep = IdentifiabilityReport(
        h_arr, np.asarray(mp), np.asarray(mf), _loglog_slope(h_arr, mp), _loglog_slope(h_arr, mf),
        bool(np.all(np.diff(mp_s) > 0)),
    )
    if weighted:
        rep.extra["weighted_source_norm"] = np.asarray(weighted)
    return rep


def weighted_source_norm(q1: Potential, q2: Potential, alpha, h, mode="oracle", xi=(0.0, 0.0, 0.0)):
    """||e^{-x.alpha/h} (q1 - q2) u2||_{L2}, which the unmeasured-face argument needs bounded in h."""
    grid = q1.grid
    alpha = _unit(alpha)
    xi = np.asarray(xi, dtype=float)
    beta = _perp_basis(alpha)[0] if np.linalg.norm(xi) < 1e-12 else _unit(np.cross(xi, alpha))
    pair = CGOPair(q1, q2, CGODirections(alpha, beta, xi), h, mode)
    pts = grid.points()
    u2, _ = pair.u.fields_at(pts.reshape(-1, 3))
    u2 = u2.reshape(grid.shape)
    return grid.l2_norm(np.exp(-pts @ alpha / h) * (q1.values - q2.values) * u2)
