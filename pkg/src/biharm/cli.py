"""Command line entry point: ``biharm <pipeline> --config cfg.json [--out dir] [--kmax N] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import carleman, cgo, dtn, forward, recon_full, recon_partial
from .config import PIPELINES, ConfigError, ExperimentConfig, load_config
from .grid import BoundaryPartition, h_minus1_norm
from .io import RunManifest, StageTimer, write_csv, write_series

log = logging.getLogger("biharm")

NUMERICAL_ERRORS = (
    forward.EigenvalueCollision,
    forward.SolverDivergence,
    cgo.ContractionError,
    cgo.NonConvergence,
)

SAMPLE_HEADER = ["xi_x", "xi_y", "xi_z", "re", "im", "h", "mode"]
RECORD_HEADER = ["t", "delta", "e", "rho", "h", "modulus", "implied_C"]
PARTIAL_EXTRA = ["alpha_x", "alpha_y", "alpha_z", "eps", "theta", "K", "L"]


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path, kmax=None):
        self.cfg = cfg
        self.out = out
        self.kmax = cfg.sweeps["kmax"] if kmax is None else kmax
        self.grid = cfg.grid()
        self.cache = Path(cfg.cache_dir)
        self._pots = {}

    def pot(self, name):
        if name not in self._pots:
            if name == "q2" and "q2" not in self.cfg.potentials:
                self._pots[name] = self.pot("q1") + self.pot("p")
            else:
                self._pots[name] = self.cfg.potential(name, self.grid)
        return self._pots[name]

    def maps(self):
        return dtn.DtNMap(self.pot("q1")), dtn.DtNMap(self.pot("q2"))

    def cone(self):
        c = self.cfg.cone
        return recon_partial.ConeSpec(self.cfg.domain["alpha"], self.cfg.sweeps["eps"], c["half_angle"], c["n_dirs"])

    def path(self, name):
        return self.out / name


def _samples_rows(samples):
    return [s.row() for s in samples]


def stage_forward(ctx: Context):
    rows = forward.manufactured_study(ctx.cfg.sweeps["grids"], ctx.cfg.domain["half_widths"][0])
    return [write_csv(ctx.path("forward.csv"), ["nodes", "grid_step", "max_error", "rate"], rows)]


def stage_dtn(ctx: Context):
    q1, q2 = ctx.pot("q1"), ctx.pot("q2")
    A = dtn.assemble_dtn(q1, ctx.kmax, ctx.cache)
    B = dtn.assemble_dtn(q2, ctx.kmax, ctx.cache)
    part = BoundaryPartition(ctx.grid, ctx.cfg.domain["alpha"], ctx.cfg.domain["epsilon"])
    rows = [
        ["op_norm_q1", A.op_norm(), ctx.kmax],
        ["op_norm_q2", B.op_norm(), ctx.kmax],
        ["delta_full", dtn.dtn_operator_norm(A, B), ctx.kmax],
        ["delta_partial", (A.restrict_partial(part, ctx.grid) - B.restrict_partial(part, ctx.grid)).op_norm(), ctx.kmax],
        ["reciprocity_defect_q1", dtn.reciprocity_defect(q1, min(ctx.kmax, 3)), min(ctx.kmax, 3)],
        ["reciprocity_tolerance", 5 * float(ctx.grid.grid_step) ** 2, min(ctx.kmax, 3)],
    ]
    return [write_csv(ctx.path("dtn.csv"), ["name", "value", "kmax"], rows)]


def stage_cgo_check(ctx: Context):
    rng = np.random.default_rng(ctx.cfg.seeds.get("noise", 0))
    ident = []
    for i in range(100):
        xi = rng.standard_normal(3) * 3
        dirs = cgo.directions_for(xi)
        h = 0.05 + 0.15 * rng.random()
        wv = cgo.make_wavevectors(dirs, h)
        zu, zv = wv.zeta_u, wv.zeta_v
        ident.append([
            i, h, abs(zu @ zu), abs(zv @ zv), float(np.max(np.abs(zu - np.conj(zv) + h * dirs.xi))),
            abs(np.linalg.norm(zu.real) - 1), abs(np.linalg.norm(zu.imag) - 1),
        ])
    out = [write_csv(ctx.path("cgo_identities.csv"),
                     ["trial", "h", "zeta_u_sq", "zeta_v_sq", "phase_defect", "re_norm_defect", "im_norm_defect"], ident)]
    rows = []
    xi = np.asarray(ctx.cfg.sweeps["xi"][0], dtype=float)
    dirs = cgo.directions_for(xi, ctx.cfg.domain["alpha"] if abs(xi @ ctx.cfg.domain["alpha"]) < 1e-12 else None)
    for name in sorted(ctx.cfg.potentials):
        q = ctx.pot(name)
        if q.is_constant and q.values.flat[0] == 0:
            continue
        for h in ctx.cfg.sweeps["h"]:
            wv = cgo.make_wavevectors(dirs, h)
            sol = cgo.build_cgo(q, wv.zeta_u, h, "oracle")
            d = cgo.cgo_field_norms(sol, ctx.grid, "u")
            rows.append([name, h, d["r_L2"], d["r_L2"] / h**2, d["r_H4scl"], d["residual"], d["iterations"], d["contraction"]])
    out.append(write_csv(ctx.path("cgo.csv"),
                         ["potential", "h", "r_L2", "r_L2_over_h2", "r_H4scl", "residual", "iterations", "contraction"], rows))
    return out


def stage_carleman(ctx: Context):
    q = ctx.pot("q2")
    rows = []
    for h in ctx.cfg.sweeps["h"]:
        rep = carleman.carleman_report(q, h, ctx.cfg.domain["alpha"], seed=ctx.cfg.seeds.get("carleman", 0))
        rows.append(rep.row())
    return [write_csv(ctx.path("carleman.csv"),
                      ["h", "min_ratio", "min_ratio_over_h2", "fitted_C_boundary", "violations"], rows)]


def stage_extract(ctx: Context):
    maps = ctx.maps()
    samples, series = [], {}
    alpha = np.asarray(ctx.cfg.domain["alpha"], dtype=float)
    for xi in ctx.cfg.sweeps["xi"]:
        xi = np.asarray(xi, dtype=float)
        hint = alpha if abs(xi @ alpha) < 1e-12 else None
        truth = recon_full.fourier_transform(maps[1].q.values - maps[0].q.values, ctx.grid, xi)[0]
        errs = []
        for h in ctx.cfg.sweeps["h"]:
            s = recon_full.extract_fourier_full(maps, xi, h, ctx.cfg.mode, hint)
            samples.append(s)
            errs.append(abs(s.value - truth))
        series[f"xi={xi.tolist()}"] = {"x": ctx.cfg.sweeps["h"], "y": errs, "log": True}
    return [write_csv(ctx.path("extract.csv"), SAMPLE_HEADER, _samples_rows(samples)),
            write_series(ctx.path("extract_plot.json"), series)]


def stage_extract_partial(ctx: Context):
    maps = ctx.maps()
    cone = ctx.cone()
    theta = ctx.cfg.sweeps["theta"]
    samples, series = [], {}
    for h in ctx.cfg.sweeps["h"]:
        ss = recon_partial.extract_cone(maps, cone, ctx.cfg.rho, h, ctx.cfg.cone["density"], ctx.cfg.mode)
        samples += ss
        series[f"h={h}"] = {"dropped_max": max(abs(s.extra["dropped"]) for s in ss)}
    K, L = recon_partial.schedule_constants(3, theta, ctx.grid.R)
    rows = [[*s.row(), *s.alpha, s.extra["eps"], theta, K, L] for s in samples]
    return [write_csv(ctx.path("extract_partial.csv"), SAMPLE_HEADER + PARTIAL_EXTRA, rows),
            write_series(ctx.path("extract_partial_plot.json"), series)]


def stage_reconstruct(ctx: Context):
    maps = ctx.maps()
    target = ctx.pot("q2") - ctx.pot("q1")
    rows, samples = [], []
    for h in ctx.cfg.sweeps["h"]:
        ss = recon_full.extract_lattice(maps, ctx.cfg.rho, ctx.grid.R, h, ctx.cfg.mode)
        samples += ss
        fld = recon_full.reconstruct_lowpass(ss, ctx.cfg.rho, ctx.grid)
        rows.append([ctx.cfg.rho, h, len(ss), h_minus1_norm(fld - target.values, ctx.grid),
                     ctx.grid.l2_norm(fld - target.values)])
    return [write_csv(ctx.path("reconstruct.csv"), ["rho", "h", "samples", "hminus1_error", "l2_error"], rows),
            write_csv(ctx.path("reconstruct_samples.csv"), SAMPLE_HEADER, _samples_rows(samples))]


def stage_vessella(ctx: Context):
    maps = ctx.maps()
    cone = ctx.cone()
    c = ctx.cfg.cone
    h = ctx.cfg.sweeps["h"][0]
    ss = recon_partial.extract_cone(maps, cone, ctx.cfg.rho, h, c["density"], ctx.cfg.mode)
    xi = np.array([s.xi for s in ss])
    fit = recon_partial.vessella_extend(xi, [s.value for s in ss], ctx.cfg.rho, ctx.grid, c["fit_nodes"])
    truth = recon_full.fourier_transform(maps[1].q.values - maps[0].q.values, ctx.grid, fit.ball_xi)
    rows = [[*x, v.real, v.imag, t.real, t.imag, h] for x, v, t in zip(fit.ball_xi, fit.ball_values, truth)]
    out = [write_csv(ctx.path("vessella.csv"), ["xi_x", "xi_y", "xi_z", "re", "im", "true_re", "true_im", "h"], rows)]
    trows = []
    for name in ("p", "q2"):
        q = ctx.pot(name)
        pr = recon_partial.theta_probe(q, cone, ctx.cfg.rho, fit_nodes=c["fit_nodes"], density=c["density"])
        for i, t in enumerate(pr["t"]):
            slope = pr["slopes"][i - 1] if i > 0 else float("nan")
            trows.append([name, t, pr["errors"][i], slope, pr["theta_emp"], fit.lam, int(fit.flagged)])
    out.append(write_csv(ctx.path("vessella_theta.csv"),
                         ["potential", "t", "error", "slope", "theta_emp", "lam", "flagged"], trows))
    return out


def stage_stability_full(ctx: Context):
    q1, p = ctx.pot("q1"), ctx.pot("p")
    recs = recon_full.stability_experiment_full(q1, p, ctx.cfg.sweeps["t"], ctx.kmax, ctx.cfg.h0, cache_dir=ctx.cache)
    rows = []
    for h in ctx.cfg.sweeps["h"]:
        for r in recs:
            err = float("nan")
            if r.delta > 0:
                q2 = q1 + p.scaled(r.t)
                err, _ = recon_full.reconstruction_error((dtn.DtNMap(q1), dtn.DtNMap(q2)), p.scaled(r.t), ctx.cfg.rho, h,
                                                         ctx.cfg.mode)
            rows.append([*r.row(), h, err])
    return [write_csv(ctx.path("stability_full.csv"), RECORD_HEADER + ["h_recon", "recon_error"], rows)]


def stage_stability_partial(ctx: Context):
    q1, p = ctx.pot("q1"), ctx.pot("p")
    cone = ctx.cone()
    theta = ctx.cfg.sweeps["theta"]
    recs = recon_partial.stability_experiment_partial(q1, p, ctx.cfg.sweeps["t"], cone, ctx.kmax, theta, ctx.cfg.h0,
                                                      cache_dir=ctx.cache)
    K, L = recon_partial.schedule_constants(3, theta, ctx.grid.R)
    rows = []
    for h in ctx.cfg.sweeps["h"]:
        for r in recs:
            err = float("nan")
            if r.delta > 0:
                q2 = q1 + p.scaled(r.t)
                err, _ = recon_partial.partial_reconstruction((dtn.DtNMap(q1), dtn.DtNMap(q2)), p.scaled(r.t), cone,
                                                              ctx.cfg.rho, h, ctx.cfg.cone["density"], ctx.cfg.mode,
                                                              ctx.cfg.cone["fit_nodes"])
            rows.append([*r.row(), *cone.alpha0, cone.eps, theta, K, L, h, err])
    return [write_csv(ctx.path("stability_partial.csv"), RECORD_HEADER + PARTIAL_EXTRA + ["h_recon", "recon_error"], rows)]


def stage_identifiability(ctx: Context):
    cone = ctx.cone()
    hs = ctx.cfg.sweeps["h"]
    same = recon_partial.identifiability_check(ctx.pot("q2"), cone, hs, ctx.cfg.rho, 1, ctx.cfg.mode)
    pair = recon_partial.identifiability_check(ctx.pot("q1"), cone, hs, ctx.cfg.rho, 1, ctx.cfg.mode, q_other=ctx.pot("q2"))
    rows = [["identical_maps", h, a, b] for h, a, b in zip(same.h, same.max_partial, same.max_full)]
    rows += [["distinct_pair", h, a, b] for h, a, b in zip(pair.h, pair.max_partial, pair.max_full)]
    return [write_csv(ctx.path("identifiability.csv"), ["kind", "h", "max_partial", "max_full"], rows),
            write_series(ctx.path("identifiability_plot.json"), {
                "identical_maps": {"slope_partial": same.slope_partial, "slope_full": same.slope_full,
                                   "monotone": same.monotone},
                "distinct_pair": {"slope_dropped": pair.slope_partial, "slope_full_defect": pair.slope_full,
                                  "monotone": pair.monotone},
            })]


STAGES = {
    "forward": stage_forward,
    "dtn": stage_dtn,
    "cgo-check": stage_cgo_check,
    "carleman": stage_carleman,
    "extract": stage_extract,
    "extract-partial": stage_extract_partial,
    "reconstruct": stage_reconstruct,
    "vessella": stage_vessella,
    "stability-full": stage_stability_full,
    "stability-partial": stage_stability_partial,
    "identifiability": stage_identifiability,
}


def run(cfg: ExperimentConfig, pipelines=None, out=None, kmax=None, threads=None) -> RunManifest:
    """Execute the requested pipelines; a failing stage is recorded and the others still run."""
    out = Path(cfg.output_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, kmax)
    man = RunManifest(cfg.digest())
    hits0, miss0 = dtn.CacheStats.hits, dtn.CacheStats.misses
    workers = threads or forward.thread_count()
    with sfft.set_workers(workers):
        for name in pipelines or cfg.pipelines:
            log.info("stage %s", name)
            with StageTimer() as tm:
                try:
                    files = STAGES[name](ctx)
                    err = None
                except NUMERICAL_ERRORS as exc:
                    files, err = [], ("numerical", f"{type(exc).__name__}: {exc}")
                except Exception as exc:  # recorded, the run goes on
                    files, err = [], ("error", f"{type(exc).__name__}: {exc}")
                    log.debug(traceback.format_exc())
            for f in files:
                man.add_output(f)
            if err:
                man.record_stage(name, tm.seconds, err[0], err[1])
            else:
                man.record_stage(name, tm.seconds)
    man.cache = {"hits": dtn.CacheStats.hits - hits0, "misses": dtn.CacheStats.misses - miss0}
    man.write(out)
    return man


def build_parser():
    ap = argparse.ArgumentParser(prog="biharm", description="Inverse boundary value experiments for Lap^2 + q.")
    ap.add_argument("pipeline", choices=list(PIPELINES) + ["run"], help="pipeline to execute; 'run' uses the config list")
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--out", default=None, help="output directory (overrides the config)")
    ap.add_argument("--kmax", type=int, default=None, help="boundary modes per direction for DtN matrices")
    ap.add_argument("--threads", type=int, default=None, help="FFT workers (default BIHARM_THREADS or all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        os.environ["BIHARM_THREADS"] = str(args.threads)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.kmax is not None and args.kmax < 1:
        print("config error: --kmax must be positive", file=sys.stderr)
        return 2
    pipelines = None if args.pipeline == "run" else [args.pipeline]
    man = run(cfg, pipelines, args.out, args.kmax, args.threads)
    for name, st in man.stages.items():
        line = f"{name}: {st['status']} ({st['seconds']:.2f} s)"
        print(line if st["status"] == "ok" else f"{line} {st.get('error', '')}")
    statuses = {st["status"] for st in man.stages.values()}
    if "numerical" in statuses:
        return 3
    if "error" in statuses:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
