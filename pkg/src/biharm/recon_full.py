"""Full-data pipeline: Fourier samples of q2 - q1 from the DtN difference, low-pass inversion
and the logarithmic stability schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .cgo import CGODirections, TorusSpec, build_cgo, directions_for, make_wavevectors
from .dtn import DtNDifference, DtNMap, assemble_dtn, dtn_operator_norm
from .forward import NavierData
from .grid import Grid, Potential, h_minus1_norm


@dataclass
class FourierSample:
    xi: np.ndarray
    value: complex
    h: float
    mode: str
    alpha: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def row(self):
        return [*self.xi, self.value.real, self.value.imag, self.h, self.mode]


def fourier_transform(values, grid: Grid, xi):
    """int f(x) exp(-i x.xi) dx by the trapezoid rule; xi has shape (..., 3)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    W = values * grid.volume_weights()
    ex = [np.exp(-1j * np.outer(xi[:, a], grid.axes[a])) for a in range(3)]
    out = np.einsum("ijk,mi,mj,mk->m", W, ex[0], ex[1], ex[2], optimize=True)
    return out


# --------------------------------------------------------------- schedule


@dataclass
class FullSchedule:
    log_delta: float
    R: float
    n: int
    h0: float
    rho: float
    h: float
    log_delta0: float
    valid: bool
    claims: dict

    @property
    def delta(self):
        return math.exp(self.log_delta)

    @property
    def delta0(self):
        return math.exp(self.log_delta0)

    @property
    def fallback(self):
        return not self.valid

    @property
    def modulus(self):
        return modulus_full(self.delta, self.n, self.log_delta)


def _log_delta(delta, log_delta):
    if log_delta is None:
        if delta is None or not (delta > 0 and math.isfinite(delta)):
            raise ValueError("delta must be positive and finite")
        return math.log(delta)
    if not math.isfinite(log_delta):
        raise ValueError("log_delta must be finite")
    return float(log_delta)


def schedule_full(delta=None, R=1.0, n=3, h0=0.2, log_delta=None) -> FullSchedule:
    """rho = (|ln delta| / (20 R))^{2/(n+2)}, h = rho^{-(n+2)/2}; valid when delta < exp(-20 R / h0).

    Pass ``log_delta`` for data errors below the double range.  For delta >= 1 the
    schedule is undefined (rho = h = nan) and only the fallback flag is meaningful.
    """
    ld = _log_delta(delta, log_delta)
    log_delta0 = -20 * R / h0
    valid = ld < log_delta0
    rho = h = float("nan")
    if ld < 0:
        rho = (abs(ld) / (20 * R)) ** (2 / (n + 2))
        h = rho ** (-(n + 2) / 2)
    claims = {}
    if valid:
        claims = {
            "h_below_h0": h < h0,
            "rho_pow_n_above_1": rho**n > 1,
            "h2rho2_over_4_below_1": h * h * rho * rho / 4 < 1,
        }
    return FullSchedule(ld, R, n, h0, rho, h, log_delta0, valid, claims)


def modulus_full(delta, n=3, log_delta=None):
    """delta + |ln delta|^{-4/(n+2)}; nan for delta >= 1."""
    ld = math.log(delta) if log_delta is None else log_delta
    if ld >= 0:
        return float("nan")
    return math.exp(ld) + abs(ld) ** (-4 / (n + 2))


def fallback_bound_full(delta, delta0, C=1.0, M=1.0):
    """e^2 <= (4 C M^2 / delta0) delta, used when delta >= delta0."""
    return 4 * C * M * M / delta0 * delta


# ------------------------------------------------------------- extraction


def _ndiff(maps, data):
    if isinstance(maps, DtNDifference):
        return maps.apply(data)
    m1, m2 = maps
    return m1.apply(data) - m2.apply(data)


def boundary_pairing(nd, v_tr, lap_v_tr, grid: Grid, mask=None):
    """int [d_nu Lap(u1-u2) conj(v) + d_nu(u1-u2) conj(Lap v)] over the boundary (or the masked part)."""
    integrand = nd.dw * np.conj(v_tr) + nd.du * np.conj(lap_v_tr)
    w = grid.boundary_weights()
    if mask is not None:
        w = w * mask
    return complex(np.sum(integrand * w))


class CGOPair:
    """The CGO u (for q2) and the adjoint CGO v (for q1) used at one frequency."""

    def __init__(self, q1: Potential, q2: Potential, dirs: CGODirections, h, mode="oracle", torus=None):
        self.dirs = dirs
        self.h = h
        self.mode = mode
        wv = make_wavevectors(dirs, h)
        self.u = build_cgo(q2, wv.zeta_u, h, mode, torus)
        self.v = build_cgo(q1, wv.zeta_v, h, mode, torus)


def extract_sample(maps, pair: CGOPair, grid: Grid, mask=None):
    f, g = pair.u.boundary_traces(grid)
    nd = _ndiff(maps, NavierData(f, g))
    vt, lvt = pair.v.boundary_traces(grid)
    return boundary_pairing(nd, vt, lvt, grid, mask), nd, (vt, lvt)


def error_bound(h, delta, R, order=1.0):
    """h^order + e^{9R/h} delta with unit constant; inf on overflow."""
    if delta is None:
        return float("nan")
    expo = 9 * R / h
    big = math.inf if expo > 700 else math.exp(expo) * delta
    return h**order + (0.0 if delta == 0 else big)


def extract_fourier_full(maps, xi, h, mode="oracle", alpha_hint=None, torus=None, q1=None, q2=None, delta=None) -> FourierSample:
    """Approximate (q2 - q1)^(xi) from the DtN difference N_{q1} - N_{q2}.

    ``maps`` is a DtNDifference or a pair of DtNMap.  In oracle mode the CGOs are
    built from the potentials of the maps (or q1, q2 when given); free mode uses
    plane waves.  With ``delta`` the unit-constant bound h + e^{9R/h} delta is
    stored under extra["bound"].
    """
    m1, m2 = (maps.map1, maps.map2) if isinstance(maps, DtNDifference) else maps
    q1 = m1.q if q1 is None else q1
    q2 = m2.q if q2 is None else q2
    grid = m1.grid
    dirs = directions_for(xi, alpha_hint)
    pair = CGOPair(q1, q2, dirs, h, mode, torus)
    val, _, _ = extract_sample((m1, m2), pair, grid)
    extra = {"bound": error_bound(h, delta, grid.R)} if delta is not None else {}
    return FourierSample(np.asarray(xi, dtype=float), val, h, mode, dirs.alpha, extra)


def frequency_lattice(rho, R, half=False):
    """Lattice (pi / 2R) Z^3 inside the closed ball of radius rho."""
    d = math.pi / (2 * R)
    m = int(math.floor(rho / d))
    k = np.arange(-m, m + 1)
    K = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3)
    K = K[np.sum(K * K, axis=1) * d * d <= rho * rho + 1e-12]
    if half:
        # one representative of each +-pair, plus the origin
        key = K[:, 0] * 10**6 + K[:, 1] * 10**3 + K[:, 2]
        K = K[key >= 0]
    return K * d


def extract_lattice(maps, rho, R, h, mode="oracle", alpha_hint=None, torus=None, progress=None):
    """Samples on the full lattice, computing one of each +- pair and conjugating for the other."""
    m1, m2 = (maps.map1, maps.map2) if isinstance(maps, DtNDifference) else maps
    out = []
    for xi in frequency_lattice(rho, R, half=True):
        s = extract_fourier_full((m1, m2), xi, h, mode, alpha_hint, torus)
        out.append(s)
        if np.any(xi != 0):
            out.append(FourierSample(-xi, np.conj(s.value), h, mode, s.alpha, {"mirrored": True}))
        if progress:
            progress(len(out))
    return out


# ---------------------------------------------------------- low-pass inversion


def lowpass_sum(xi, values, pts, R):
    """(4R)^-3 sum over samples of value * exp(i x.xi), real part."""
    xi = np.asarray(xi, dtype=float)
    values = np.asarray(values)
    flat = np.asarray(pts).reshape(-1, 3)
    out = np.zeros(len(flat))
    for i0 in range(0, len(xi), 256):
        ph = np.exp(1j * flat @ xi[i0:i0 + 256].T)
        out += (ph @ values[i0:i0 + 256]).real
    return (out / (4 * R) ** 3).reshape(np.asarray(pts).shape[:-1])


def reconstruct_lowpass(samples: Iterable[FourierSample], rho, grid: Grid, R=None):
    R = grid.R if R is None else R
    samples = [s for s in samples if np.linalg.norm(s.xi) <= rho + 1e-12]
    xi = np.array([s.xi for s in samples])
    vals = np.array([s.value for s in samples])
    return lowpass_sum(xi, vals, grid.points(), R)


class LowPassInversion(BaseEstimator):
    """Fourier-series inversion of band-limited samples on the lattice (pi / 2R) Z^3."""

    def __init__(self, rho=5.0, R=1.0):
        self.rho = rho
        self.R = R

    def fit(self, X, y):
        X = check_array(X, ensure_min_features=3)
        y = np.asarray(y, dtype=complex).ravel()
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        keep = np.linalg.norm(X, axis=1) <= self.rho + 1e-12
        self.xi_ = X[keep]
        self.values_ = y[keep]
        return self

    def predict(self, X):
        check_is_fitted(self, "xi_")
        X = check_array(X, ensure_min_features=3)
        return lowpass_sum(self.xi_, self.values_, X, self.R)


# -------------------------------------------------------------- stability


@dataclass
class StabilityRecord:
    t: float
    delta: float
    e: float
    rho: float
    h: float
    modulus: float
    implied_C: float
    valid: bool = False
    extra: dict = field(default_factory=dict)

    def row(self):
        return [self.t, self.delta, self.e, self.rho, self.h, self.modulus, self.implied_C]


def _skipped(t, e, reason):
    return StabilityRecord(t, 0.0, e, float("nan"), float("nan"), float("nan"), float("nan"), False, {"excluded": reason})


def reconstruction_error(maps, target, rho, h, mode="free"):
    """H^-1 norm of (low-pass reconstruction - target) from lattice samples at fixed (rho, h)."""
    grid = target.grid
    samples = extract_lattice(maps, rho, grid.R, h, mode)
    field_ = reconstruct_lowpass(samples, rho, grid)
    return h_minus1_norm(field_ - target.values, grid), field_


def stability_experiment_full(q1: Potential, p: Potential, t_levels, kmax=4, h0=0.2, n=3, cache_dir=None,
                              reconstruct=None):
    """delta = ||N_{q1} - N_{q1 + t p}||, e = ||t p||_{H^-1}; implied constant e^2 / modulus.

    ``reconstruct=(rho, h)`` additionally runs the free-mode low-pass reconstruction and
    stores its H^-1 error under extra["recon_error"].  Records are sorted by delta.
    """
    from .forward import EigenvalueCollision

    grid = q1.grid
    R = grid.R
    A = assemble_dtn(q1, kmax, cache_dir)
    e_unit = h_minus1_norm(p.values, grid)
    out = []
    for t in t_levels:
        e = abs(t) * e_unit
        if t == 0:
            out.append(_skipped(t, 0.0, "delta = 0"))
            continue
        q2 = q1 + p.scaled(t)
        try:
            B = assemble_dtn(q2, kmax, cache_dir)
        except EigenvalueCollision as exc:
            out.append(_skipped(t, e, f"eigenvalue collision: {exc}"))
            continue
        delta = dtn_operator_norm(A, B)
        sch = schedule_full(delta, R, n, h0)
        mod = modulus_full(delta, n)
        rec = StabilityRecord(t, delta, e, sch.rho, sch.h, mod, e * e / mod, sch.valid)
        if not sch.valid:
            rec.extra["fallback_bound"] = fallback_bound_full(delta, sch.delta0, M=max(q1.bound, q2.bound))
        if reconstruct is not None:
            rho_r, h_r = reconstruct
            target = p.scaled(t)
            rec.extra["recon_error"], _ = reconstruction_error((DtNMap(q1), DtNMap(q2)), target, rho_r, h_r)
        out.append(rec)
    return sorted(out, key=lambda r: r.delta)


def implied_constant_spread(records):
    vals = [r.implied_C for r in records if np.isfinite(r.implied_C) and r.implied_C > 0]
    return max(vals) / min(vals) if vals else float("nan")
