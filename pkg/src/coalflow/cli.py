"""Command line front end: ``coalflow <command> --config cfg.json [--seed N] [--h X] [--jobs N] [--out DIR]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from .circle_maps import d_map
from .coalescing_sde import simulate_batch, write_ensemble_csv
from .coeff_dsl import ExpressionSyntaxError, FieldValidationError, UnknownIdentifier, make_field
from .disturbance import (
    ExplicitDisturbanceParams,
    ParamsOutOfRegime,
    build_disturbance_flow,
    estimate_moments,
    estimate_reversed_moments,
    flow_seed,
    limit_statistics,
    sample_explicit_map,
    write_moment_reports,
)
from .flow_core import DiscreteFlow, extract_path, flow_distance_c, flow_distance_d_upper, flow_map
from .verify import reversal_drift_experiment, single_path_convergence_test

log = logging.getLogger("coalflow")

COMMANDS = (
    "validate-coeffs",
    "sample-map",
    "moments",
    "simulate-sde",
    "simulate-disturbance",
    "path-convergence",
    "reverse-check",
    "metric",
)

EXIT_OK, EXIT_CONFIG, EXIT_STAT = 0, 1, 2


class ConfigError(ValueError):
    pass


class ExperimentConfig:
    """Parsed and checked ``config.json``."""

    def __init__(self, raw, seed=None, h=None):
        self.raw = dict(raw)
        self.a = self._str("a", "1")
        self.b = self._str("b", "0")
        self.window = self._pair("window", [0.0, 1.0])
        if not self.window[1] > self.window[0]:
            raise ConfigError("window: t_end must exceed t_start")
        hv = raw.get("h", 1e-3) if h is None else h
        self.h = [self._positive("h", v) for v in np.atleast_1d(hv)]
        self.seed = int(raw.get("seed", 0) if seed is None else seed)
        self.seeds = int(self._positive("seeds", raw.get("seeds", 100)))
        self.dt = self._positive("dt", raw.get("dt", 1e-3))
        starts = raw.get("starts", [[self.window[0], 0.0]])
        try:
            self.starts = [(float(s), float(x)) for s, x in starts]
        except (TypeError, ValueError):
            raise ConfigError("starts: expected a list of [s, x] pairs") from None
        bins = raw.get("bins", [2, 4])
        if len(bins) != 2 or min(bins) < 1:
            raise ConfigError("bins: expected [n_t, n_x] with positive entries")
        self.bins = (int(bins[0]), int(bins[1]))
        self.collapse_only = bool(raw.get("collapse_only", False))
        try:
            self.field = make_field(self.a, self.b, self.window, int(raw.get("grid_n", 64)))
        except (ExpressionSyntaxError, UnknownIdentifier, FieldValidationError, ZeroDivisionError) as exc:
            raise ConfigError(f"coefficients: {type(exc).__name__}: {exc}") from exc

    def _str(self, key, default):
        v = self.raw.get(key, default)
        if not isinstance(v, str):
            raise ConfigError(f"{key}: expected an expression string")
        return v

    def _pair(self, key, default):
        v = self.raw.get(key, default)
        try:
            a, b = (float(u) for u in v)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected two numbers") from None
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ConfigError(f"{key}: values must be finite")
        return (a, b)

    @staticmethod
    def _positive(key, v):
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number") from None
        if not (math.isfinite(v) and v > 0):
            raise ConfigError(f"{key}: must be finite and positive")
        return v

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def h0(self):
        return self.h[0]


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _versions():
    import scipy

    return {
        "coalflow": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


# -- commands -------------------------------------------------------------------------


def cmd_validate(cfg, out, jobs):
    f = cfg.field
    p = os.path.join(out, "coefficients.json")
    _write_json(p, f.to_json())
    log.info("coefficients valid: a_star=%g a_upper=%g b_upper=%g", f.a_star, f.a_upper, f.b_upper)
    return EXIT_OK, [p]


def cmd_sample_map(cfg, out, jobs):
    rng = np.random.default_rng(cfg.seed)
    t = float(cfg.get("t", cfg.window[0]))
    theta = float(cfg.get("theta", rng.random()))
    p = ExplicitDisturbanceParams(cfg.field, cfg.h0, t, theta, cfg.collapse_only)
    m = sample_explicit_map(p)
    mp = os.path.join(out, "map.json")
    _write_json(mp, {"h": cfg.h0, "t": t, "theta": theta, "w": p.w, "r": p.r, "map": m.to_json()})
    gp = os.path.join(out, "map_graph.dat")
    gx, gy = m.graph()
    with open(gp, "w") as fh:
        fh.write("# x F(x), completed graph over one period\n")
        for x, y in zip(gx, gy):
            fh.write(f"{x!r} {y!r}\n")
    return EXIT_OK, [mp, gp]


def cmd_moments(cfg, out, jobs):
    t = float(cfg.get("t", cfg.window[0]))
    x = float(cfg.get("x", 0.0))
    n = int(cfg.get("n_samples", 100_000))
    fwd, rev = [], []
    for i, h in enumerate(cfg.h):
        sf = limit_statistics(cfg.field, h, collapse_only=cfg.collapse_only)
        sr = limit_statistics(cfg.field, h, reverse=True, collapse_only=cfg.collapse_only)
        seed = np.random.SeedSequence([cfg.seed, 3, i])
        fwd.append(estimate_moments(cfg.field, h, t, x, n, seed, cfg.collapse_only, sf))
        rev.append(estimate_reversed_moments(cfg.field, h, t, x, n, seed, cfg.collapse_only, sr))
    p1 = os.path.join(out, "moments.csv")
    p2 = os.path.join(out, "moments_reversed.csv")
    write_moment_reports(p1, fwd)
    write_moment_reports(p2, rev)
    return EXIT_OK, [p1, p2]


def cmd_simulate_sde(cfg, out, jobs):
    t_end = cfg.window[1]
    batch = simulate_batch(cfg.field, cfg.starts, cfg.dt, t_end, cfg.seeds, cfg.seed,
                           record_every=int(cfg.get("record_every", 1)))
    p = os.path.join(out, "ensemble.csv")
    write_ensemble_csv(p, [(i, batch.ensemble(i)) for i in range(len(batch))])
    return EXIT_OK, [p]


def cmd_simulate_disturbance(cfg, out, jobs):
    files = []
    for i in range(cfg.seeds):
        flow = build_disturbance_flow(cfg.field, cfg.h0, cfg.window, flow_seed(cfg.seed, i), cfg.collapse_only)
        fp = os.path.join(out, f"flow_{i}.json")
        flow.dump(fp)
        files.append(fp)
        for k, e in enumerate(cfg.starts):
            pp = os.path.join(out, f"path_{i}_{k}.csv")
            extract_path(flow, e).to_csv(pp)
            files.append(pp)
    return EXIT_OK, files


def cmd_path_convergence(cfg, out, jobs):
    e = cfg.starts[0]
    t = float(cfg.get("t", cfg.window[1]))
    rep = single_path_convergence_test(cfg.field, cfg.h, e, t, cfg.seeds, cfg.seed, dt=cfg.dt, jobs=jobs)
    p = os.path.join(out, "convergence.csv")
    with open(p, "w") as fh:
        fh.write("h,ks,pvalue\n")
        for h, k, pv in rep.as_rows():
            fh.write(f"{h!r},{k!r},{pv!r}\n")
    ks_max = cfg.get("ks_max")
    status = EXIT_OK
    if len(rep.hs) > 1 and not rep.decreasing:
        log.error("KS distance is not decreasing along the h ladder: %s", rep.as_rows())
        status = EXIT_STAT
    if ks_max is not None and rep.ks[int(np.argmin(rep.hs))] >= float(ks_max):
        log.error("KS distance %g at the smallest h exceeds ks_max=%g", min(rep.ks), float(ks_max))
        status = EXIT_STAT
    return status, [p]


def cmd_reverse_check(cfg, out, jobs):
    table = reversal_drift_experiment(
        cfg.field,
        cfg.h0,
        cfg.window,
        cfg.seeds,
        bins=cfg.bins,
        seed=cfg.seed,
        delta=cfg.get("delta"),
        drift_floor=float(cfg.get("drift_floor", 0.05)),
        var_rel_floor=float(cfg.get("var_rel_floor", 0.05)),
        n_sigma=float(cfg.get("n_sigma", 3.0)),
        collapse_only=cfg.collapse_only,
        jobs=jobs,
    )
    p = os.path.join(out, "drift_table.csv")
    table.to_csv(p)
    if not table.passed:
        for b in table.failing():
            log.error(
                "bin t=%g x=%g fails: drift %.4f vs %.4f (tol %.4f), var %.4f vs %.4f (tol %.4f)",
                b.t_center, b.x_center, b.drift_rate, b.drift_target, b.drift_tol,
                b.var_rate, b.var_target, b.var_tol,
            )
        return EXIT_STAT, [p]
    return EXIT_OK, [p]


def cmd_metric(cfg, out, jobs):
    paths = cfg.get("flows")
    if not paths or len(paths) != 2:
        raise ConfigError("flows: expected two flow JSON paths")
    base = cfg.get("_config_dir", ".")
    try:
        A, B = (DiscreteFlow.load(os.path.join(base, q)) for q in paths)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"flows: cannot load ({exc})") from exc
    n = int(cfg.get("n", 1))
    res = {
        "d_map_window": d_map(flow_map(A, A.window), flow_map(B, B.window)),
        "flow_distance_c": flow_distance_c(A, B, n, int(cfg.get("grid", 64))),
    }
    lo = max(A.window[0], B.window[0])
    hi = min(A.window[1], B.window[1])
    if lo <= -(n + 1) and hi >= n + 1:
        res["flow_distance_d_upper"] = flow_distance_d_upper(A, B, n)
    p = os.path.join(out, "metric.json")
    _write_json(p, res)
    return EXIT_OK, [p]


HANDLERS = {
    "validate-coeffs": cmd_validate,
    "sample-map": cmd_sample_map,
    "moments": cmd_moments,
    "simulate-sde": cmd_simulate_sde,
    "simulate-disturbance": cmd_simulate_disturbance,
    "path-convergence": cmd_path_convergence,
    "reverse-check": cmd_reverse_check,
    "metric": cmd_metric,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="coalflow", description=__doc__)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--h", type=float, default=None, help="override h with a single value")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command, config_path, seed=None, h=None, jobs=1, out="out"):
    """Run one command; returns the exit status."""
    try:
        with open(config_path, "rb") as fh:
            blob = fh.read()
        raw = json.loads(blob)
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        raw["_config_dir"] = os.path.dirname(os.path.abspath(config_path))
        cfg = ExperimentConfig(raw, seed=seed, h=h)
    except OSError as exc:
        log.error("config: cannot read %s: %s", config_path, exc)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        log.error("config: invalid JSON: %s", exc)
        return EXIT_CONFIG
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    os.makedirs(out, exist_ok=True)
    try:
        status, files = HANDLERS[command](cfg, out, jobs)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ParamsOutOfRegime as exc:
        log.error("h: %s", exc)
        return EXIT_CONFIG
    manifest = {
        "command": command,
        "config": os.path.basename(config_path),
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.seed,
        "h": cfg.h,
        "jobs": jobs,
        "status": status,
        "versions": _versions(),
        "files": {os.path.relpath(f, out): _sha256(f) for f in files},
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args.command, args.config, args.seed, args.h, args.jobs, args.out)


if __name__ == "__main__":
    sys.exit(main())
