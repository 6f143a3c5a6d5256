"""Command-line interface.

Subcommands: ``estimate`` (data -> APE report), ``simulate`` (Monte Carlo
harness), ``cv`` (basis selection table), ``check-identification``
(invertibility sweep).  Every command is a pure function of its config, input
files and seed; reruns produce byte-identical outputs.  Exit codes: 2 for
config errors, 3 for data errors, 4 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ape import EstimationError, plug_in_variance, run_estimate
from .config import ConfigError, EstimationConfig, build_basis_for, parse_config
from .controls import ControlsError
from .correction import SingularCorrectionError, fit_g, invertibility_sweep
from .panel import PanelData, PanelDataError, first_difference, load_panel
from .simlab import DgpSpec, run_replications, true_mu, write_mc_outputs
from .sieve import loo_cv_score

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    return str(o)


def _write_report(out_dir: Path, report: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _load_config(args) -> EstimationConfig:
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        cfg = EstimationConfig()
    if getattr(args, "inference", None):
        cfg.inference = args.inference
    if getattr(args, "B", None):
        cfg.bootstrap_B = args.B
    if getattr(args, "seed", None) is not None and cfg.inference == "bootstrap":
        cfg.bootstrap_seed = args.seed
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    return cfg


def _report_skeleton(command: str, cfg: EstimationConfig | None) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else {},
        "timings": {},
        "results": {},
        "warnings": [],
        "n_warnings": 0,
    }


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    report = _report_skeleton("estimate", cfg)
    t0 = time.perf_counter()
    p = load_panel(args.data)
    report["timings"]["load_s"] = round(time.perf_counter() - t0, 4)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t1 = time.perf_counter()
        est, internals = run_estimate(p, cfg, return_internals=True)
        report["timings"]["estimate_s"] = round(time.perf_counter() - t1, 4)
    report["warnings"] = [str(w.message) for w in caught]
    report["n_warnings"] = len(report["warnings"])

    report["results"] = {
        "mu_hat": est.mu_hat,
        "alpha_hat": est.alpha_hat,
        "phi_hat": est.phi_hat,
        "se": est.se,
        "cov": est.cov,
        "diagnostics": {
            k: v for k, v in est.diagnostics.items() if k != "subsets_dropped"
        },
        "n": p.n,
        "T": p.T,
    }
    paths = {"report": _write_report(out_dir, report)}
    if args.per_unit and est.mu_tilde is not None:
        import pandas as pd

        per_unit = out_dir / "per_unit_mu.csv"
        df = pd.DataFrame(
            est.mu_tilde, columns=[f"mu_tilde_{j + 1}" for j in range(est.mu_tilde.shape[1])]
        )
        df.insert(0, "unit", np.asarray(p.unit_ids)[est.used])
        df.to_csv(per_unit, index=False)
        paths["per_unit"] = per_unit
    if not args.no_figures and est.mu_tilde is not None:
        from .figures import mu_tilde_figure

        paths["figure"] = mu_tilde_figure(est.mu_tilde, est.mu_hat, out_dir / "mu_tilde.png")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    estimators = [e.strip() for e in args.estimators.split(",") if e.strip()]
    if not estimators:
        raise _CliError(EXIT_CONFIG, "no estimators requested")
    spec = DgpSpec(name=args.spec, n=args.n, T=args.T, seed=args.seed)
    report = _report_skeleton("simulate", cfg)
    t0 = time.perf_counter()
    mc = run_replications(spec, args.R, estimators, cfg, threads=cfg.threads)
    report["timings"]["simulate_s"] = round(time.perf_counter() - t0, 4)
    paths = write_mc_outputs(mc, out_dir)
    report["results"] = mc.to_summary_dict()
    paths["report"] = _write_report(out_dir, report)
    if not args.no_figures:
        from .figures import g_band_figure, mu_hist_figure
        from .simlab import g_band_table

        truth = true_mu(spec)
        for j in range(truth.size):
            paths[f"hist_{j + 1}"] = mu_hist_figure(
                mc.draws, truth, j, out_dir / f"mu{j + 1}_hist.png"
            )
        if mc.g_draws is not None:
            paths["g_band_fig"] = g_band_figure(g_band_table(mc), out_dir / "g_band.png")
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


def cmd_cv(args) -> int:
    cfg = _load_config(args)
    if not cfg.cv_candidates:
        raise _CliError(EXIT_CONFIG, "config must list cv.candidates for the cv command")
    out_dir = Path(args.out_dir)
    p = load_panel(args.data)
    report = _report_skeleton("cv", cfg)

    from .ape import _controls_for

    cv = _controls_for(p, cfg)
    units = first_difference(p, cfg.delta0)
    target = np.stack([u.M.reshape(-1) for u in units])
    rows = []
    for spec in cfg.cv_candidates:
        basis = build_basis_for(spec, cv.Vhat, box=cv.extended_box)
        score = loo_cv_score(cv.Vhat, target, basis)
        rows.append((spec.describe(), basis.dim_out, score))
    best = min(range(len(rows)), key=lambda i: (rows[i][2], rows[i][1]))

    import pandas as pd

    df = pd.DataFrame(rows, columns=["basis", "dim_out", "cv_score"])
    df["winner"] = [i == best for i in range(len(rows))]
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "cv_table.csv"
    df.to_csv(table_path, index=False)
    report["results"] = {
        "table": df.to_dict(orient="records"),
        "winner": rows[best][0],
    }
    paths = {"table": table_path, "report": _write_report(out_dir, report)}
    if not args.no_figures:
        from .figures import cv_figure

        paths["figure"] = cv_figure(
            [r[0] for r in rows], [r[2] for r in rows], best, out_dir / "cv_scores.png"
        )
    print(df.to_csv(index=False), end="")
    for name, path in paths.items():
        print(f"{name}: {path}", file=sys.stderr)
    return 0


def cmd_check_identification(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    p = load_panel(args.data)
    report = _report_skeleton("check-identification", cfg)

    from .ape import _controls_for

    cv = _controls_for(p, cfg)
    units = first_difference(p, cfg.delta0)
    basisK = build_basis_for(cfg.second_stage, cv.Vhat, box=cv.extended_box)
    ge = fit_g(units, cv, basisK, eig_floor=cfg.eig_floor)

    box = cv.extended_box
    center = box.mean(axis=1)
    pts = []
    for d in range(box.shape[0]):
        sweep = np.tile(center, (args.grid_points, 1))
        sweep[:, d] = np.linspace(box[d, 0], box[d, 1], args.grid_points)
        pts.append(sweep)
    grid = np.vstack(pts)
    result = invertibility_sweep(ge, grid)

    import pandas as pd

    cols = {f"v{d + 1}": grid[:, d] for d in range(grid.shape[1])}
    cols["lambda_min"] = result.lambda_min
    df = pd.DataFrame(cols)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "sweep.csv"
    df.to_csv(table_path, index=False)
    report["results"] = {
        "grid_min": result.grid_min,
        "sample_min": result.sample_min,
        "flagged": result.flagged,
        "eig_floor": cfg.eig_floor,
    }
    if result.flagged:
        report["warnings"].append(
            f"minimum eigenvalue {min(result.grid_min, result.sample_min):.3e} "
            "is small; identification may fail"
        )
        report["n_warnings"] = 1
    paths = {"table": table_path, "report": _write_report(out_dir, report)}
    if not args.no_figures:
        from .figures import sweep_figure

        paths["figure"] = sweep_figure(
            grid, result.lambda_min, cfg.eig_floor, out_dir / "sweep.png"
        )
    print(df.to_csv(index=False), end="")
    for name, path in paths.items():
        print(f"{name}: {path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crcpanel",
        description="Average partial effects in random-coefficient panels "
        "with time-varying endogeneity.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="long-format CSV panel")
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--out-dir", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    sp = sub.add_parser("estimate", help="estimate the trimmed average partial effect")
    common(sp)
    sp.add_argument("--inference", choices=["plugin", "bootstrap", "none"], default=None)
    sp.add_argument("--B", type=int, default=None, help="bootstrap replicates")
    sp.add_argument("--seed", type=int, default=None, help="bootstrap seed")
    sp.add_argument("--per-unit", action="store_true", help="write per-unit coefficients")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="run the Monte Carlo harness")
    common(sp, data=False)
    sp.add_argument("--spec", default="crc-baseline")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--T", type=int, default=4)
    sp.add_argument("--R", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--estimators", default="ape,fdiv,crc")
    sp.add_argument("--inference", choices=["plugin", "bootstrap", "none"], default=None)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("cv", help="score candidate bases by leave-one-out CV")
    common(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("check-identification", help="minimum-eigenvalue sweep")
    common(sp)
    sp.add_argument("--grid-points", type=int, default=25, help="points per coordinate axis")
    sp.set_defaults(func=cmd_check_identification)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanelDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (
        SingularCorrectionError,
        EstimationError,
        ControlsError,
        np.linalg.LinAlgError,
        ValueError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
