import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from biharm.dtn import DtNMap
from biharm.grid import DomainSpec, Grid, constant, gaussian_bump
from biharm.recon_full import fourier_transform
from biharm.recon_partial import (
    ConeSpec,
    FitGrid,
    VessellaExtension,
    cone_sampling,
    extract_cone,
    extract_fourier_partial,
    identifiability_check,
    modulus_partial,
    schedule_constants,
    schedule_partial,
    smallness_modulus,
    stability_experiment_partial,
    vessella_extend,
)


@pytest.fixture(scope="module")
def grid9():
    return Grid(DomainSpec(nodes_per_axis=(9, 9, 9)))


@pytest.fixture(scope="module")
def cone():
    return ConeSpec([0.0, 0.0, 1.0], eps=0.1, half_angle=0.2, n_dirs=7)


def test_schedule_constants_reference():
    assert schedule_constants(3, 0.5, 1.0) == (46.0, 16.0)


def test_schedule_partial_fallback_for_moderate_delta():
    s = schedule_partial(0.5)
    assert s.fallback and s.claims == {}
    assert s.log_delta0 == pytest.approx(-math.exp(46 / 0.2 ** (1 / 16)), rel=1e-14)


def test_schedule_partial_claims_below_threshold():
    s = schedule_partial(log_delta=-1e30)
    assert not s.fallback
    assert s.rho == pytest.approx(math.log(1e30) / 46, rel=1e-14)
    assert s.claims and all(s.claims.values())


def test_schedule_partial_rejects_theta():
    with pytest.raises(ValueError):
        schedule_partial(0.1, theta=1.0)


def test_fallback_log10_bound():
    s = schedule_partial(1e-3)
    expect = (math.log(2.0) + 0.25 * (math.log(1e-3) - s.log_delta0)) / math.log(10)
    assert s.fallback_log10_bound() == pytest.approx(expect, rel=1e-14)


def test_modulus_partial_formula():
    d = 1e-8
    rho = math.log(abs(math.log(d))) / 46
    assert modulus_partial(d, 46.0) == pytest.approx((d + rho**-4) ** 0.25, rel=1e-14)
    assert math.isnan(modulus_partial(0.5, 46.0))


def test_cone_directions(cone):
    dirs = cone.directions()
    assert len(dirs) == 7
    assert np.array_equal(dirs[0], cone.alpha0)
    for d in dirs[1:]:
        assert np.linalg.norm(d) == pytest.approx(1.0)
        assert math.acos(d @ cone.alpha0) == pytest.approx(0.2, abs=1e-12)


def test_zero_angle_cone_is_a_plane():
    c = ConeSpec([0.0, 0.0, 1.0], half_angle=0.0)
    assert c.in_cone(np.array([[1.0, 2.0, 0.0]]))[0]
    assert not c.in_cone(np.array([[0.0, 0.1, 1.0]]))[0]
    assert c.measure_fraction_exact() == 0.0


def test_cone_sampling_geometry(cone):
    pairs = cone_sampling(cone, 3.0, density=2)
    assert len(pairs) == 1 + 7 * 2 * 8
    for xi, a in pairs:
        assert abs(xi @ a) < 1e-12
        assert np.linalg.norm(xi) <= 3.0 + 1e-12
    with pytest.raises(ValueError):
        cone_sampling(cone, 0.0)


def test_cone_measure_fraction(cone):
    exact = cone.measure_fraction_exact()
    n = 200_000
    sd = math.sqrt(exact * (1 - exact) / n)
    for seed in (0, 1):
        mc = cone.measure_fraction(n, seed=seed)
        assert abs(mc - exact) < 4 * sd and abs(mc / exact - 1) < 0.05


def test_zero_angle_samples_lie_in_plane():
    c = ConeSpec([0.0, 0.6, 0.8], half_angle=0.0, n_dirs=5)
    for xi, _ in cone_sampling(c, 3.0, 2):
        assert abs(xi @ c.alpha0) <= 1e-10 * max(1.0, np.linalg.norm(xi))


def test_partial_split_is_additive(grid13, cone):
    m1, m2 = DtNMap(constant(grid13, 0.0)), DtNMap(gaussian_bump(grid13, sigma=0.15))
    part = cone.partition(grid13)
    s = extract_fourier_partial((m1, m2), [2.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.1, part, "free")
    assert s.value + s.extra["dropped"] == pytest.approx(s.extra["full"], rel=1e-12)
    assert abs(s.extra["dropped"]) > 0


def test_partial_identical_maps_zero(grid13, cone):
    m = DtNMap(gaussian_bump(grid13, sigma=0.15))
    ss = extract_cone((m, m), cone, 3.0, 0.1, density=1)
    assert all(s.value == 0 and s.extra["dropped"] == 0 for s in ss)


def test_direction_partition_mismatch(grid13, cone):
    m = DtNMap(constant(grid13, 0.0))
    with pytest.raises(ValueError, match="mismatch"):
        extract_fourier_partial((m, m), [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], 0.1, cone.partition(grid13))
    with pytest.raises(ValueError, match="orthogonal"):
        extract_fourier_partial((m, m), [0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 0.1, cone.partition(grid13))


def test_partial_bound_recorded(grid13, cone):
    m1, m2 = DtNMap(constant(grid13, 0.0)), DtNMap(gaussian_bump(grid13, sigma=0.15))
    s = extract_fourier_partial((m1, m2), [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.2, cone.partition(grid13), "free",
                                delta=1e-12)
    assert s.extra["bound"] == pytest.approx(math.sqrt(0.2) + math.exp(9 * grid13.R / 0.2) * 1e-12)


def test_extension_exact_for_model_fields(grid13, cone):
    xi = np.array([x for x, _ in cone_sampling(cone, 3.0, 2)])
    fg = FitGrid(grid13, 3)
    p = np.random.default_rng(0).standard_normal(27)
    fit = vessella_extend(xi, fg.forward(xi) @ p, 3.0, grid13, 3, lam=1e-12)
    ref = fg.forward(fit.ball_xi) @ p
    assert np.abs(fit.ball_values - ref).max() < 1e-8 * np.abs(ref).max()
    assert not fit.flagged


def test_extension_of_gaussian_transform(grid13, cone):
    q = gaussian_bump(grid13, sigma=0.15)
    xi = np.array([x for x, _ in cone_sampling(cone, 3.0, 2)])
    rng = np.random.default_rng(5)
    y = fourier_transform(q.values, grid13, xi) + 1e-6 * (rng.standard_normal(len(xi)) + 1j * rng.standard_normal(len(xi)))
    fit = vessella_extend(xi, y, 3.0, grid13, 7)
    ref = fourier_transform(q.values, grid13, fit.ball_xi)
    assert np.abs(fit.ball_values - ref).max() <= 0.1 * np.abs(ref).max()


def test_condition_escalation(grid13, cone):
    xi = np.array([x for x, _ in cone_sampling(cone, 3.0, 1)])
    y = fourier_transform(gaussian_bump(grid13, sigma=0.15).values, grid13, xi)
    fit = vessella_extend(xi, y, 3.0, grid13, 7, lam=1e-30, cond_max=1e6)
    assert fit.flagged and fit.escalations > 0 and fit.lam > 1e-30


def test_discrepancy_principle(grid13, cone):
    xi = np.array([x for x, _ in cone_sampling(cone, 3.0, 2)])
    y = fourier_transform(gaussian_bump(grid13, sigma=0.15).values, grid13, xi)
    rng = np.random.default_rng(1)
    noise = 1e-4
    yn = y + noise * (rng.standard_normal(len(y)) + 1j * rng.standard_normal(len(y)))
    fit = vessella_extend(xi, yn, 3.0, grid13, 7, noise_level=noise)
    assert fit.residual <= 1.1 * noise * math.sqrt(2 * len(y)) * (1 + 1e-9)
    assert fit.lam > 1e-8


def test_estimator_api(grid13, cone):
    xi = np.array([x for x, _ in cone_sampling(cone, 3.0, 2)])
    y = fourier_transform(gaussian_bump(grid13, sigma=0.15).values, grid13, xi)
    est = VessellaExtension(domain=grid13, fit_nodes=5).fit(xi, y)
    fit = vessella_extend(xi, y, 1.0, grid13, 5)
    X = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 2.0]])
    assert np.allclose(est.predict(X), FitGrid(grid13, 5).forward(X) @ fit.field.ravel())
    assert clone(est).get_params()["fit_nodes"] == 5
    with pytest.raises(ValueError):
        VessellaExtension().fit(xi, y)


@settings(max_examples=10, deadline=None)
@given(e1=st.floats(1e-6, 1.0), e2=st.floats(1e-6, 1.0))
def test_smallness_modulus_monotone(e1, e2):
    g = Grid(DomainSpec(nodes_per_axis=(9, 9, 9)))
    fg = FitGrid(g, 3)
    c = ConeSpec([0.0, 0.0, 1.0])
    xi = np.array([x for x, _ in cone_sampling(c, 2.0, 1)])
    ball = np.array([[0.0, 0.0, 1.5], [1.0, 0.0, 1.0]])
    lo, hi = sorted((e1, e2))
    assert smallness_modulus(fg, xi, ball, lo, 1.0) <= smallness_modulus(fg, xi, ball, hi, 1.0) * (1 + 1e-12)


def test_partial_stability_records(grid9, tmp_path):
    c = ConeSpec([0.0, 0.0, 1.0])
    recs = stability_experiment_partial(constant(grid9, 0.0), gaussian_bump(grid9, sigma=0.2), [1e-1, 1e-2], c,
                                        kmax=2, cache_dir=tmp_path)
    assert len(recs) == 2 and recs[0].delta < recs[1].delta
    K, L = schedule_constants(3, 0.5, grid9.R)
    for r in recs:
        assert (r.extra["K"], r.extra["L"]) == (K, L)
        assert r.implied_C == pytest.approx(r.e / modulus_partial(r.delta, K))
        assert np.isfinite(r.extra["fallback_log10_bound"])


def test_identifiability_identical_maps_degenerate(grid9):
    c = ConeSpec([0.0, 0.0, 1.0], n_dirs=3)
    rep = identifiability_check(gaussian_bump(grid9, sigma=0.2), c, (0.2, 0.1), rho=2.0, mode="free")
    assert np.all(rep.max_partial == 0) and np.all(rep.max_full == 0)
    assert math.isnan(rep.slope_partial) and not rep.monotone


def test_identifiability_distinct_pair(grid13):
    c = ConeSpec([0.0, 0.0, 1.0], n_dirs=3)
    q1, q2 = constant(grid13, 0.0), gaussian_bump(grid13, sigma=0.15)
    rep = identifiability_check(q1, c, (0.2, 0.1, 0.05), rho=2.0, mode="free", q_other=q2)
    assert rep.monotone
    assert rep.slope_partial > 0
    assert len(rep.extra["weighted_source_norm"]) == 3


def test_extraction_orthogonality_bookkeeping(grid13, cone):
    m1, m2 = DtNMap(constant(grid13, 0.0)), DtNMap(gaussian_bump(grid13, sigma=0.15))
    for s in extract_cone((m1, m2), cone, 3.0, 0.2, density=1):
        assert abs(s.xi @ s.alpha) <= 1e-10 * max(1.0, np.linalg.norm(s.xi))


def test_zero_level_record(grid9, tmp_path):
    c = ConeSpec([0.0, 0.0, 1.0])
    recs = stability_experiment_partial(constant(grid9, 0.0), gaussian_bump(grid9, sigma=0.2), [0.0, 1e-2], c,
                                        kmax=2, cache_dir=tmp_path)
    assert recs[0].t == 0.0 and recs[0].e == 0.0 and "excluded" in recs[0].extra


def test_partial_error_not_below_full(grid13):
    from biharm.recon_full import reconstruction_error
    from biharm.recon_partial import partial_reconstruction

    q1, p = constant(grid13, 0.0), gaussian_bump(grid13, sigma=0.15)
    c = ConeSpec([0.0, 0.0, 1.0])
    for t in (1e-1, 1e-2):
        maps = (DtNMap(q1), DtNMap(q1 + p.scaled(t)))
        full, _ = reconstruction_error(maps, p.scaled(t), 3.0, 0.2)
        part, _ = partial_reconstruction(maps, p.scaled(t), c, 3.0, 0.2)
        assert part >= full
