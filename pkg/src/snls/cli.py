"""Command-line entry point: ``snls <subcommand> --config run.yaml --out-dir out``.

Exit codes: 0 success, 1 usage or configuration error, 2 an experiment's
acceptance check failed. Every run writes ``manifest.json`` and ``report.json``
plus the experiment's CSV tables into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import SUBCOMMANDS, ConfigError, RunConfig, load_config
from .coupling import (CouplingConfig, check_ell_structure, couple_ensemble, ell_all,
                       fit_slope_constant, pair_en_series, pathwise_certificate,
                       coupling_statistics, _block_indices)
from .estimators import (EnsembleConfig, dispersive_decay_check, gamma_moment_check,
                         irreducibility_probe, mixing_rate, moment_check_h, moment_check_phi,
                         plateau_scaling, reference_fields, run_ensemble, sample_initial_pairs,
                         strichartz_integral, wraparound_time)
from .integrator import StepConfig, evolve
from .model import ModelParams, choose_kappa, default_trial_ensemble, random_smooth_fields, sigma_d
from .noise import CovarianceSpec, hs_norm
from .oracles import elementary_ineq_constant, power_difference_bruteforce, linear_exact_solution
from .spectral import Field, Grid, forward, make_grid

log = logging.getLogger("snls")

REPORT_SCHEMA = "snls.report/1"
MANIFEST_SCHEMA = "snls.manifest/1"
CSV_VERSION = 1


class ExperimentFailed(RuntimeError):
    pass


# -- serialization --------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def write_json(path: Path, obj: dict):
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, name: str, header: list[str], rows) -> None:
    """CSV with a leading ``# schema: snls.<name>/<version>`` line."""
    with path.open("w", newline="") as fh:
        fh.write(f"# schema: snls.{name}/{CSV_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# -- building objects from a config ----------------------------------------------------------


def build(cfg: RunConfig):
    g = make_grid(cfg.grid["dim"], cfg.grid["n_per_dim"], cfg.grid["box_length"])
    m = cfg.model
    kappa = None
    if m["alpha"] == 1:
        kappa = (choose_kappa(m["sigma"], g.dim, default_trial_ensemble(g, 64, cfg.seed))
                 if m["kappa"] == "auto" or m["kappa"] is None else float(m["kappa"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = ModelParams(float(m["lambda"]), int(m["alpha"]), float(m["sigma"]), g.dim, kappa,
                             cfg.strict)
    n = cfg.noise
    Q = CovarianceSpec(float(n["amplitude"]), float(n["decay"]), n["cutoff"], n["noise_kind"])
    it = cfg.integrator
    step = StepConfig(float(it["dt"]), float(it["padding_factor"]), int(it["stride"]),
                      float(it["blowup_ceiling"]))
    return g, params, Q, step


def initial_batch(cfg: RunConfig, g: Grid, m: int, rng: np.random.Generator) -> Field:
    kind = cfg.experiment["initial"]
    amp = cfg.experiment["initial_amplitude"]
    if kind == "zero":
        return Field.zeros(g, (m,))
    if kind == "bump":
        _, phi = reference_fields(g)
        return Field(g, np.broadcast_to(amp * phi, (m,) + g.shape).copy())
    return random_smooth_fields(g, m, rng)


def _bump_for_dispersion(g: Grid) -> Field:
    c = g.box_length / 2
    return Field.from_function(g, lambda *xs: np.exp(-sum((x - c) ** 2 for x in xs) / 2))


def manifest(cfg: RunConfig, params: ModelParams, Q: CovarianceSpec, g: Grid, wall: float,
             outputs: list[str], extra: dict) -> dict:
    try:
        sd = sigma_d(params.sigma, g.dim)
    except ValueError:
        sd = None
    t_wrap, k_max = wraparound_time(_bump_for_dispersion(g))
    return {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "config": cfg.to_dict(),
        "derived": {
            "sigma_d": sd,
            "kappa": params.kappa,
            "hs_norms": {f"s={s}": hs_norm(Q, s, g) for s in (0, 1, 2, 3)},
            "t_wrap_unit_gaussian": t_wrap,
            "regime_warnings": cfg.warnings,
        },
        "wall_clock_seconds": wall,
        "outputs": outputs,
        **extra,
    }


# -- subcommands --------------------------------------------------------------------------------
# Each returns (report dict, list of written files, list of failed checks).


def cmd_simulate(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m = int(ex["n_paths"])
    u0 = initial_batch(cfg, g, m, np.random.default_rng(cfg.seed))
    rec = run_ensemble(u0, params, Q, EnsembleConfig(m, cfg.seed, ex["horizon"]), step,
                       track_gamma=True)
    rows = []
    f = rec.functionals
    for j in range(m):
        for i, t in enumerate(rec.times):
            rows.append([j, t, f.phi[j, i], f.grad_sq[j, i], f.lp_pot[j, i], f.mass[j, i],
                         rec.sup_norm[j, i], rec.gamma_norm[j, i], rec.gamma_lap_norm[j, i]])
    write_csv(out / "trajectories.csv", "trajectories",
              ["path", "t", "phi", "grad_sq", "lp_pot", "mass", "sup_norm", "gamma_norm",
               "gamma_lap_norm"], rows)
    blown = int(rec.blown_up.sum())
    report = {"n_paths": m, "blown_up": blown, "final_mean_phi": float(np.mean(f.phi[:, -1])),
              "final_mean_mass": float(np.mean(f.mass[:, -1]))}
    return report, ["trajectories.csv"], [], {"blown_up_paths": blown}


def cmd_couple(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m = int(ex["n_paths"])
    rng = np.random.default_rng(cfg.seed)
    a = initial_batch(cfg, g, m, rng)
    b = random_smooth_fields(g, m, rng)
    c_hat = elementary_ineq_constant(params.sigma, int(ex["n_samples"]),
                                     np.random.default_rng(cfg.seed)).max_ratio
    ccfg = CouplingConfig(ex["theta"], ex["beta"], ex["block_length"], int(ex["moment_index"]),
                          ex["c1n"], ex["slope_constant"])
    recs = couple_ensemble(a, b, params, Q, ex["horizon"], step, cfg.seed, coupling_cfg=ccfg)
    fitted = ccfg.slope_constant is None
    if fitted:
        en = [e for r in recs for e in (r.en_series_1, r.en_series_2)]
        ccfg = ccfg.with_slope(fit_slope_constant(en, recs[0].times))
    certs, structure = [], []
    rows, ell_rows = [], []
    for j, r in enumerate(recs):
        r.ell_outcomes = ell_all(r, ccfg)
        c = pathwise_certificate(r, params, c_hat)
        certs.append(c)
        bidx = _block_indices(r.times, ccfg.block_length, len(r.ell_outcomes) - 1)
        structure += [f"pair {j}: {v}" for v in
                      check_ell_structure(r.ell_outcomes, r.phi_pair_series[bidx], ccfg.beta)]
        margins = np.concatenate([[np.nan], c.margins])
        for i, t in enumerate(r.times):
            rows.append([j, t, r.w_norm_series[i], r.d1_series[i], r.phi_pair_series[i],
                         r.en_series_1[i], r.en_series_2[i], margins[i]])
        ell_rows += [[j, k, "inf" if np.isinf(l) else int(l)] for k, l in enumerate(r.ell_outcomes)]
    write_csv(out / "coupling.csv", "coupling",
              ["pair", "t", "w_norm", "d1", "phi_pair", "en_1", "en_2", "certificate_margin"], rows)
    write_csv(out / "ell.csv", "ell", ["pair", "k", "ell"], ell_rows)
    n_checked = sum(c.n_checked for c in certs)
    n_viol = sum(int(c.violations.sum()) for c in certs)
    frac = n_viol / n_checked if n_checked else 0.0
    stats = coupling_statistics(recs, ccfg, radius=ex["R"])
    report = {
        "n_pairs": m, "c_hat": c_hat, "slope_constant": ccfg.slope_constant,
        "slope_constant_fitted": fitted,
        "certificate": {"checked_steps": n_checked, "violations": n_viol,
                        "violation_fraction": frac},
        "ell_structure_violations": structure,
        "final_w_norm": {"median": float(np.median([r.w_norm_series[-1] for r in recs])),
                         "max": float(np.max([r.w_norm_series[-1] for r in recs]))},
        "statistics": {k: v.as_dict() for k, v in stats.items()},
    }
    failed = []
    if frac > 0.01:
        failed.append(f"certificate violated on {frac:.3%} of steps")
    if structure:
        failed.append(f"{len(structure)} coupling-index structure violations")
    return report, ["coupling.csv", "ell.csv"], failed, {}


def cmd_mix(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m = int(ex["n_paths"])
    if m < 30:
        raise ConfigError([f"experiment.n_paths: interval reporting needs M >= 30, got {m}"])
    _, phi = reference_fields(g)
    u1, u2 = Field.zeros(g), Field(g, ex["initial_amplitude"] * phi)
    fits = mixing_rate(u1, u2, params, Q, EnsembleConfig(m, cfg.seed, ex["horizon"],
                                                         tuple(ex["observables"])),
                       step, burn_in=ex["burn_in"])
    rows = [[k, t, gp, fl] for k, f in fits.items()
            for t, gp, fl in zip(f.times, f.gap, f.noise_floor)]
    write_csv(out / "gap.csv", "gap", ["observable", "t", "gap", "noise_floor"], rows)
    failed = []
    for k, f in fits.items():
        if not f.hits_floor:
            failed.append(f"{k}: gap never fell below the noise floor")
        if not (f.trend_pvalue < 0.01):
            failed.append(f"{k}: no significant decreasing trend (p={f.trend_pvalue:.3g})")
    return {"fits": {k: f.as_dict() for k, f in fits.items()}}, ["gap.csv"], failed, {}


def cmd_moments(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m, n = int(ex["n_paths"]), int(ex["moment_index"])
    u0 = initial_batch(cfg, g, m, np.random.default_rng(cfg.seed))
    reps, rows = {}, []
    for lam in (params.lam, 2 * params.lam):
        p = params.with_lam(lam)
        rec = run_ensemble(u0, p, Q, EnsembleConfig(m, cfg.seed, ex["horizon"]), step)
        rh, rp = moment_check_h(rec, n, Q), moment_check_phi(rec, n, Q)
        reps[lam] = (rh, rp)
        rows += [[lam, t, a, b] for t, a, b in zip(rec.times, rh.curve, rp.curve)]
    write_csv(out / "moments.csv", "moments", ["lambda", "t", "mean_mass_pow_n", "mean_phi_pow_n"],
              rows)
    (h1, p1), (h2, p2) = reps[params.lam], reps[2 * params.lam]
    sh = plateau_scaling(h1, h2, [n])
    sp = plateau_scaling(p1, p2, p1.extras["lambda_powers"])
    failed = []
    if h1.failed or h2.failed:
        failed.append("more than 1% of paths blew up")
    lo, hi = 0.8 * 2**n, 1.2 * 2**n
    if not lo <= sh["ratio"] <= hi:
        failed.append(f"mass plateau ratio {sh['ratio']:.3f} outside [{lo:g}, {hi:g}]")
    report = {"h": {str(k): v[0].as_dict() for k, v in reps.items()},
              "phi": {str(k): v[1].as_dict() for k, v in reps.items()},
              "h_scaling": sh, "phi_scaling": sp}
    return report, ["moments.csv"], failed, {}


def cmd_gamma(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m, n = int(ex["n_paths"]), int(ex["moment_index"])
    rec = run_ensemble(Field.zeros(g), params, Q, EnsembleConfig(m, cfg.seed, ex["horizon"]), step,
                       track_gamma=True)
    rep = gamma_moment_check(rec, n, Q)
    write_csv(out / "gamma.csv", "gamma", ["t", "mean_integral"],
              zip(rep.times, rep.mean_integral))
    failed = [] if rep.stability <= 0.10 else [f"fitted c changes by {rep.stability:.1%} under t-doubling"]
    return rep.as_dict(), ["gamma.csv"], failed, {}


def cmd_irreducibility(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m = int(ex["n_paths"])
    a, b = sample_initial_pairs(g, params, ex["R"], m, np.random.default_rng(cfg.seed))
    rep = irreducibility_probe(ex["R"], ex["r"], ex["horizon"], a, b, params, Q, step, cfg.seed,
                               ex["test_times"])
    write_csv(out / "irreducibility.csv", "irreducibility",
              ["t", "successes", "trials", "estimate", "ci_low", "ci_high"],
              [[t, p.successes, p.trials, p.estimate, p.ci_low, p.ci_high]
               for t, p in zip(rep.times, rep.proportions)])
    final = rep.at(ex["horizon"])
    failed = [] if (final.ci_low or 0) > 0 else ["Wilson interval at the horizon includes 0"]
    return rep.as_dict(), ["irreducibility.csv"], failed, {}


def cmd_strichartz(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    m = int(ex["n_paths"])
    u0 = initial_batch(cfg, g, m, np.random.default_rng(cfg.seed))
    rec = run_ensemble(u0, params, Q, EnsembleConfig(m, cfg.seed, ex["horizon"]), step,
                       track_gamma=True)
    rep = strichartz_integral(rec, ex["n_sigma"], ex["c1n"])
    write_csv(out / "strichartz.csv", "strichartz", ["path", "t", "lhs", "rhs_unit"],
              [[j, t, rep.lhs[j, i], rep.rhs_unit[j, i]] for j in range(m)
               for i, t in enumerate(rep.times)])
    failed = [] if math.isfinite(rep.fitted_c) else ["fitted constant is not finite"]
    return rep.as_dict(), ["strichartz.csv"], failed, {}


def cmd_dispersive(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    p = math.inf if ex["p"] == "inf" else float(ex["p"])
    u0 = _bump_for_dispersion(g)
    times = np.linspace(ex["t_max"] / ex["n_times"], ex["t_max"], int(ex["n_times"]))
    rep = dispersive_decay_check(u0, times, p, float(ex["s"]))
    write_csv(out / "dispersive.csv", "dispersive", ["t", "ratio", "valid"],
              [[t, r, int(v)] for t, r, v in zip(rep.times, rep.ratio, rep.valid)])
    failed = []
    if not rep.bound_holds:
        failed.append("dispersive bound exceeded inside the valid window")
    if math.isinf(p) and ex["s"] == 0:
        tol = 0.05 * g.dim
        if not abs(rep.slope - rep.expected_slope) <= tol:
            failed.append(f"sup-norm slope {rep.slope:.3f} differs from {rep.expected_slope} by more than {tol}")
    return rep.as_dict(), ["dispersive.csv"], failed, {}


def cmd_oracle(cfg, g, params, Q, step, out: Path):
    ex = cfg.experiment
    n = int(ex["n_samples"])
    rows, report, failed = [], {"elementary": [], "power_difference": []}, []
    for s in ex["sigmas"]:
        for name, fn in (("elementary", elementary_ineq_constant), ("power_difference", power_difference_bruteforce)):
            r = fn(float(s), n, np.random.default_rng([cfg.seed, int(s * 1000)]))
            report[name].append(r.as_dict())
            rows.append([name, s, r.max_ratio, r.doubled_max_ratio, r.stability_delta, r.violations])
            if r.violations or r.stability_delta >= 0.05:
                failed.append(f"{name} sigma={s}: delta={r.stability_delta:.3g}, violations={r.violations}")
    write_csv(out / "oracle.csv", "oracle",
              ["inequality", "sigma", "max_ratio", "doubled_max_ratio", "stability_delta",
               "violations"], rows)
    return report, ["oracle.csv"], failed, {}


def cmd_verify(cfg, g, params, Q, step, out: Path):
    """Fast property suite on small instances; independent of the experiment block."""
    checks: dict[str, dict] = {}

    def record(name, ok, value):
        checks[name] = {"pass": bool(ok), "value": value}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g1 = make_grid(1, 128, 20.0)
        u0 = Field.from_function(g1, lambda x: np.exp(-(x - 10) ** 2) * (1 + 0.3j)
                                 + 0.2 * np.exp(2j * np.pi * x / 20))
        p0 = ModelParams(1.0, -1, 0.0, 1)
        _, v, _ = evolve(u0.values, g1, p0, CovarianceSpec.zero(), 200,
                         StepConfig(1e-2, diagnostics_stride=200), 0, [0])
        ex = linear_exact_solution(u0, 1.0, 2.0, alpha=-1).values
        err = float(np.max(np.abs(forward(v, g1) - ex)))
        record("linear_exactness", err <= 1e-12, err)

        drift = 0.0
        for a in (1, -1):
            p = ModelParams(0.0, a, 1.0, 1, kappa=1.0)
            rec, _, _ = evolve(u0.values, g1, p, CovarianceSpec.zero(), 200,
                               StepConfig(1e-2, diagnostics_stride=200), 0, [0])
            drift = max(drift, abs(math.sqrt(rec.mass[-1] / rec.mass[0]) - 1))
        record("mass_conservation", drift <= 1e-10, drift)

        ph = ModelParams(0.0, -1, 1.0, 1)
        d = []
        for dt in (4e-3, 2e-3):
            rec, _, _ = evolve(u0.values, g1, ph, CovarianceSpec.zero(), round(0.2 / dt),
                               StepConfig(dt, diagnostics_stride=round(0.2 / dt)), 0, [0])
            h = rec.functionals.grad_sq + rec.functionals.lp_pot / 2
            d.append(abs(h[-1] - h[0]))
        record("splitting_order", 3.2 <= d[0] / d[1] <= 4.8, d[0] / d[1])

        rng = np.random.default_rng(0)
        a, b = random_smooth_fields(g1, 8, rng), random_smooth_fields(g1, 8, rng)
        recs = couple_ensemble(a, b, p0, CovarianceSpec(1.0, 4.0), 1.0, StepConfig(1e-2), 1)
        err = max(float(np.max(np.abs(r.w_norm_series - np.exp(-r.times) * r.w_norm_series[0])))
                  for r in recs)
        record("linear_coupling_decay", err <= 1e-12, err)

        c = elementary_ineq_constant(1.0, 20000, np.random.default_rng(1))
        record("elementary_constant", abs(c.max_ratio - 1.5) < 1e-3 and c.violations == 0,
               c.max_ratio)

        gd = make_grid(1, 1024, 100.0)
        rep = dispersive_decay_check(_bump_for_dispersion(gd), np.linspace(0.2, 8, 40))
        record("dispersive_slope", abs(rep.slope + 0.5) <= 0.05 and rep.bound_holds, rep.slope)

    failed = [k for k, v in checks.items() if not v["pass"]]
    write_csv(out / "verify.csv", "verify", ["check", "pass", "value"],
              [[k, int(v["pass"]), v["value"]] for k, v in checks.items()])
    return {"checks": checks}, ["verify.csv"], failed, {}


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate, "couple": cmd_couple, "mix": cmd_mix, "moments": cmd_moments,
    "gamma": cmd_gamma, "irreducibility": cmd_irreducibility, "strichartz": cmd_strichartz,
    "dispersive": cmd_dispersive, "verify": cmd_verify, "oracle": cmd_oracle,
}


def run(subcommand: str, cfg: RunConfig, out_dir: str | Path, threads: int = 1) -> int:
    """Execute one experiment and write its artifacts. Returns the process exit code."""
    if subcommand not in COMMANDS:
        log.error("unknown subcommand %r", subcommand)
        return 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        g, params, Q, step = build(cfg)
        report, files, failed, extra = COMMANDS[subcommand](cfg, g, params, Q, step, out)
    except (ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    wall = time.perf_counter() - start
    report = {"schema": REPORT_SCHEMA, "subcommand": subcommand, "passed": not failed,
              "failures": failed, **report}
    write_json(out / "report.json", report)
    write_json(out / "manifest.json",
               manifest(cfg, params, Q, g, wall, files + ["report.json"],
                        {"threads": threads, "subcommand": subcommand, **extra}))
    for f in failed:
        log.error("check failed: %s", f)
    return 2 if failed else 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="snls", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="recorded in the manifest; ensembles are vectorized in-process")
    ap.add_argument("--out-dir", default="snls-out", help="output directory")
    ap.add_argument("--strict", action="store_true",
                    help="turn regime warnings into configuration errors")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return 1
    try:
        cfg = load_config(args.config, args.strict)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    if args.seed is not None:
        if args.seed < 0:
            log.error("--seed must be non-negative")
            return 1
        cfg = replace(cfg, seed=args.seed)
    return run(args.subcommand, cfg, args.out_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
