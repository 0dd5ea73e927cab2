"""Command-line pipelines: generate-data, identify, control, report, sweep-r.

All commands share one experiment configuration (``--config``, layered over
packaged defaults) and a working directory (``--out``).  Every run artifact
records the seed it was produced with; rerunning a command with the same
configuration and seed reproduces its CSV outputs bit for bit (wall-clock
timing columns excepted).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import pipeline, report
from .config import load_experiment
from .mpc import CONTROLLER_KINDS, ControllerError


def _add_common(p):
    p.add_argument("--config", default=None, help="experiment YAML (layered over defaults)")
    p.add_argument("--out", default="runs", help="working directory for artifacts")
    p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p.add_argument("--print-effective-config", action="store_true",
                   help="print the merged configuration and exit")


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="rokmpc",
        description="Reduced-order lifted linear modeling and robust MPC "
                    "for the reactor-separator benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="open-loop excitation data generation")
    _add_common(p)

    p = sub.add_parser("identify", help="library scoring, lifting selection, model fits")
    _add_common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="selection threshold override")
    p.add_argument("--library-families", default=None,
                   help="comma-separated family list override")
    p.add_argument("--kalman-q", type=float, default=None, help="process-noise scale")
    p.add_argument("--kalman-r", type=float, default=None, help="measurement-noise scale")
    p.add_argument("--kalman-p0", type=float, default=None, help="initial covariance scale")
    p.add_argument("--r", type=int, default=None, help="reduced model order override")

    p = sub.add_parser("control", help="closed-loop runs for one scenario")
    _add_common(p)
    p.add_argument("--scenario", default="single",
                   help="'single', 'change', or a scenario YAML path")
    p.add_argument("--controllers", default="all",
                   help="comma-separated subset of " + ",".join(CONTROLLER_KINDS))
    p.add_argument("--seeds", type=int, default=1, help="number of disturbance seeds")
    p.add_argument("--seed-offset", type=int, default=0)
    p.add_argument("--zero-gain", action="store_true",
                   help="force K_r = 0 in the robust controller")

    p = sub.add_parser("report", help="aggregate runs into tables and figures")
    _add_common(p)
    p.add_argument("--no-figures", action="store_true", help="tables only")

    p = sub.add_parser("sweep-r", help="reduced-order sweep with validation RMSE")
    _add_common(p)
    p.add_argument("--r-min", type=int, default=2)
    p.add_argument("--r-max", type=int, default=None,
                   help="default: lifted dimension")
    return ap


def _overrides_from_args(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    kalman = {}
    for attr, key in (("lam", "lambda"), ("kalman_q", "q_proc"),
                      ("kalman_r", "r_meas"), ("kalman_p0", "p0")):
        v = getattr(args, attr, None)
        if v is not None:
            kalman[key] = v
    if kalman:
        ov["kalman"] = kalman
    fam = getattr(args, "library_families", None)
    if fam:
        ov["library"] = {"families": [f.strip() for f in fam.split(",")]}
    if getattr(args, "r", None) is not None:
        ov["reduction"] = {"r": args.r}
    return ov


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_experiment(args.config, overrides=_overrides_from_args(args))
    except Exception as err:
        print(f"error: failed to load configuration: {err}", file=sys.stderr)
        return 2
    if args.print_effective_config:
        print(cfg.effective_yaml())
        return 0

    try:
        if args.command == "generate-data":
            ds = pipeline.generate_data(cfg, args.out)
            print(f"wrote {ds.n_samples} samples to {pipeline.dataset_path(args.out)} "
                  f"(seed {cfg.seed}, dt {ds.dt} h)")

        elif args.command == "identify":
            out = pipeline.identify(cfg, args.out)
            rep = out["report"]
            print(f"library size N_L = {rep['library_size']}")
            print(f"selected {rep['n_selected']} lifting functions "
                  f"(lambda = {rep['lambda']}):")
            for name in rep["selected_names"]:
                print(f"  {name}")
            print(f"lifted dimension N = {rep['lifted_dim']}, reduced order r = {rep['r']}")
            print(f"validation RMSE: full {rep['validation_rmse_full']:.4f}, "
                  f"reduced {rep['validation_rmse_reduced']:.4f}")

        elif args.command == "control":
            controllers = (CONTROLLER_KINDS if args.controllers == "all"
                           else tuple(c.strip() for c in args.controllers.split(",")))
            for c in controllers:
                if c not in CONTROLLER_KINDS:
                    print(f"error: unknown controller {c!r}", file=sys.stderr)
                    return 2
            results = pipeline.run_control(cfg, args.out, args.scenario,
                                           controllers=controllers,
                                           n_seeds=args.seeds,
                                           seed_offset=args.seed_offset,
                                           robust_gain_zero=args.zero_gain)
            for res in results:
                cases = ", ".join(f"{k}={v:.4f}" for k, v in
                                  sorted(res.rmse_summary.items()))
                print(f"{res.controller} seed {res.seed}: {cases} "
                      f"(mean step {np.mean(res.solve_times) * 1e3:.2f} ms, "
                      f"saturated steps {res.saturation_count})")

        elif args.command == "report":
            agg = report.write_report(args.out)
            print(f"aggregated {agg['n_runs']} runs into {args.out}/report")
            if not args.no_figures:
                written = report.render_figures(args.out)
                for path in written:
                    print(f"  figure: {path}")

        elif args.command == "sweep-r":
            import os
            r_max = args.r_max
            if r_max is None:
                ident_json = os.path.join(pipeline.ident_dir(args.out),
                                          "identification.json")
                if os.path.exists(ident_json):
                    with open(ident_json) as f:
                        r_max = json.load(f)["lifted_dim"]
                else:
                    r_max = 16
            rows = pipeline.sweep_orders(cfg, args.out,
                                         range(args.r_min, r_max + 1))
            for row in rows:
                print(f"r={row['r']:3d}: validation RMSE {row['validation_rmse']:.4f} "
                      f"reconstruction MSE {row['reconstruction_mse']:.3e}")

    except ControllerError as err:
        print(f"controller error: {err}", file=sys.stderr)
        if err.partial_result is not None:
            print("partial log preserved in the result object", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
