"""Command-line interface: ``gmrf-fusion {simulate,fit,predict,cv,report}``.

Exit status is 0 on success, 1 for invalid input or configuration and 2
when the numerical core fails (non-positive-definite system, failed fit).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_priors, load_config
from .dataio import ValidationError, read_observations, read_targets, write_rows
from .geometry import MeshError, OutOfMeshError, project, read_mesh, write_mesh
from .inference import FitError, bma_fit, calibrate_grid, restore_ensemble
from .lgocv import build_plan, radius_to_units, run_lgocv
from .linalg import NotPositiveDefiniteError
from .metrics import SCORE_COLUMNS, ScoreReport, scaled_ds
from .models import DataError, Targets, make_model
from .priors import HyperPriorSet
from .simulation import run_study, simulate_replicate, station_layouts, write_layouts

log = logging.getLogger("gmrf_fusion")

FIT_SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


# --- shared helpers -------------------------------------------------------


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: RunConfig, command: str, seed) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "run.json", {"command": command, "version": __version__, "seed": seed})
    return out


def _echo_config(out: Path, cfg: RunConfig, **changes):
    d = cfg.to_dict()
    d.pop("out")
    d.update(changes)
    _dump_json(out / "config.json", d)


def _need(path, what):
    if path is None:
        raise ValidationError(f"no {what} file given (use the config 'data' section or --{what})")
    if not Path(path).exists():
        raise ValidationError(f"{what} file {path} not found")
    return path


def _load_data(cfg: RunConfig, stations, grid):
    st = _need(stations or cfg.data.stations, "stations")
    gr = grid or cfg.data.grid
    if gr is not None:
        _need(gr, "grid")
    data = read_observations(st, gr, cfg.covariates, unit=cfg.domain.unit, intercept=cfg.intercept)
    return data, st, gr


def _mesh_for(cfg: RunConfig, data, priors):
    pts = np.vstack([data.station_xy, data.grid_xy])
    domain = cfg.domain.build(pts)
    return domain, cfg.mesh.build(domain, priors)


def _fit_opts(cfg: RunConfig, seed):
    o = cfg.optimizer
    return dict(
        max_iter=o.max_iter, ftol=o.ftol, restarts=o.restarts, seed=seed, pilot=o.pilot, theta_grid=o.theta_grid
    )


def _fit(cfg, data, mesh, priors, seed):
    return bma_fit(data, mesh, priors, family=cfg.model, threads=cfg.threads, **_fit_opts(cfg, seed))


def _data_rows(data, which):
    if which == "stations":
        ids, xy, t, v, z = data.station_id, data.station_xy, data.station_t, data.station_value, data.station_z
    else:
        ids, xy, t, v, z = data.grid_id, data.grid_xy, data.grid_t, data.grid_value, data.grid_z
    return [[i, xy[k, 0], xy[k, 1], int(t[k]), v[k], *z[k]] for k, i in enumerate(ids)]


# --- simulate -------------------------------------------------------------


def _write_replicate(directory: Path, rep):
    directory.mkdir(parents=True, exist_ok=True)
    d = rep.data
    names = list(d.covariate_names)
    write_rows(directory / "stations.csv", ["station_id", "x", "y", "t", "value", *names], _data_rows(d, "stations"))
    write_rows(directory / "grid.csv", ["cell_id", "x", "y", "t", "value", *names], _data_rows(d, "grid"))
    is_cell = np.zeros(len(rep.grid_xy), bool)
    is_cell[rep.forecast_index] = True
    write_rows(
        directory / "truth.csv",
        ["point", "x", "y", "x_true", "z", "alpha0", "forecast_cell"],
        [
            [k, rep.grid_xy[k, 0], rep.grid_xy[k, 1], rep.x[k], rep.z[k], rep.alpha0[k], int(is_cell[k])]
            for k in range(len(rep.grid_xy))
        ],
    )


def summarize_scores(report: ScoreReport) -> list:
    """Mean, SD and count of finite values per (model, scenario, radius, score)."""
    groups = defaultdict(list)
    for r in report:
        groups[(r.model, r.scenario, "" if r.radius is None else r.radius, r.score_name)].append(r.value)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        v = np.array(groups[key], float)
        v = v[np.isfinite(v)]
        n = len(v)
        rows.append(
            [*key, n, float(v.mean()) if n else math.nan, float(v.std(ddof=1)) if n > 1 else math.nan]
        )
    return rows


SUMMARY_COLUMNS = ("model", "scenario", "radius", "score_name", "n", "mean", "sd")


def cmd_simulate(cfg: RunConfig) -> int:
    sim = cfg.simulation
    base = sim.base_seed if cfg.seed is None else int(cfg.seed)
    sim = sim.__class__.from_dict({**sim.to_dict(), "base_seed": base})
    cfg = cfg.with_overrides(simulation=sim, seed=base)
    out = _prepare_out(cfg, "simulate", base)
    _echo_config(out, cfg)
    write_layouts(out / "layouts", {s: station_layouts(s) for s in ("n10", "n25", "n40")})

    st = cfg.study
    n = sim.replicates if st.replicates is None else st.replicates
    scenarios = st.scenarios if st.run else (sim.scenario,)
    if st.write_data or not st.run:
        for s in scenarios:
            c = sim.__class__.from_dict({**sim.to_dict(), "scenario": s})
            for r in range(n):
                rep = simulate_replicate(c, base + r)
                _write_replicate(out / "replicates" / s / f"r{base + r}", rep)
    if st.run:
        total = ScoreReport()
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for rep_scores in run_study(sim, st.families, n, st.scenarios, st.prior_scenarios, threads=cfg.threads):
                for r in rep_scores:
                    w.writerow(r.row())
                fh.flush()
                total.extend(rep_scores)
        failed = int(np.nansum(total.values("failed")))
        if failed:
            log.warning("%d fits failed; see rows with score_name=failed", failed)
        write_rows(out / "summary.csv", SUMMARY_COLUMNS, summarize_scores(total))
    return EXIT_OK


# --- fit ------------------------------------------------------------------


def _weight_rows(ens):
    return [
        ["" if m.alpha1 is None else m.alpha1, m.log_ml, m.log_prior, m.weight] for m in ens.members
    ]


def cmd_fit(cfg: RunConfig, stations=None, grid=None) -> int:
    seed = 0 if cfg.seed is None else int(cfg.seed)
    data, st_path, gr_path = _load_data(cfg, stations, grid)
    priors = build_priors(cfg)
    domain, mesh = _mesh_for(cfg, data, priors)
    ens = _fit(cfg, data, mesh, priors, seed)

    out = _prepare_out(cfg, "fit", seed)
    shutil.copyfile(st_path, out / "stations.csv")
    if gr_path is not None:
        shutil.copyfile(gr_path, out / "grid.csv")
    write_mesh(mesh, out / "mesh.txt")
    _echo_config(
        out,
        cfg,
        seed=seed,
        priors=priors.to_dict(),
        alpha1_grid=None,
        data={"stations": "stations.csv", "grid": None if gr_path is None else "grid.csv", "targets": None},
        # the resolved boundary keeps a data-derived domain reproducible
        domain={"bbox": None, "boundary": domain.boundary.tolist(), "unit": domain.unit, "padding": 0.0},
    )

    artifact = {
        "schema_version": FIT_SCHEMA_VERSION,
        "software_version": __version__,
        "seed": seed,
        "unit": data.unit,
        "covariates": [c.name for c in cfg.covariates],
        "beta_names": list(data.beta_names),
        "mesh": {"file": "mesh.txt", "n_vertices": mesh.n_vertices},
        "data": {"stations": "stations.csv", "grid": None if gr_path is None else "grid.csv"},
        "priors": priors.to_dict(),
        "alpha1_hat": ens.alpha1_hat if cfg.model == "fusion" else None,
        "ensemble": ens.to_dict(),
    }
    _dump_json(out / "fit.json", artifact)
    write_rows(out / "weights.csv", ["alpha1", "log_ml", "log_prior", "weight"], _weight_rows(ens))
    bm, bv = ens.block_moments("beta")
    names = list(data.beta_names) if cfg.model != "regcalib" else ["b0", "b1"]
    write_rows(
        out / "fixed_effects.csv", ["name", "mean", "sd"], [[n, m, math.sqrt(v)] for n, m, v in zip(names, bm, bv)]
    )
    write_rows(
        out / "hyperparameters.csv",
        ["alpha1", "name", "value"],
        [["" if m.alpha1 is None else m.alpha1, k, v] for m in ens.members for k, v in m.fit.theta.items()],
    )
    return EXIT_OK


# --- predict --------------------------------------------------------------


def load_fit(fit_dir):
    """Model and ensemble stored in a ``fit`` output directory."""
    fit_dir = Path(fit_dir)
    try:
        art = json.loads((fit_dir / "fit.json").read_text())
    except FileNotFoundError:
        raise ValidationError(f"{fit_dir} holds no fit.json") from None
    if art.get("schema_version") != FIT_SCHEMA_VERSION:
        raise ValidationError(f"unsupported fit artifact schema {art.get('schema_version')!r}")
    cfg = load_config(fit_dir / "config.json" if (fit_dir / "config.json").exists() else None)
    grid = art["data"]["grid"]
    data = read_observations(
        fit_dir / art["data"]["stations"],
        None if grid is None else fit_dir / grid,
        cfg.covariates,
        unit=art["unit"],
        intercept=cfg.intercept,
    )
    mesh = read_mesh(fit_dir / art["mesh"]["file"])
    priors = HyperPriorSet.from_dict(art["priors"])
    model = make_model(art["ensemble"]["family"], data, mesh, priors)
    return cfg, model, restore_ensemble(art["ensemble"], model)


def cmd_predict(cfg: RunConfig, fit_dir, targets=None, calibrate=None) -> int:
    fcfg, model, ens = load_fit(fit_dir)
    tpath = targets or cfg.data.targets
    calibrate = cfg.predict.calibrate if calibrate is None else calibrate
    out = _prepare_out(cfg, "predict", fcfg.seed)
    _echo_config(out, fcfg, predict={"calibrate": bool(calibrate)})
    if tpath is not None:
        ids, xy, t, z, lines = read_targets(_need(tpath, "targets"), fcfg.covariates)
        ok = np.ones(len(ids), bool)
        status = ["ok"] * len(ids)
        for i in range(len(ids)):
            try:
                project(model.mesh, xy[i : i + 1])
            except OutOfMeshError:
                ok[i] = False
                status[i] = f"error: line {lines[i]} outside mesh"
        if np.any(t[ok] > model.data.T):
            bad = sorted(set(t[ok][t[ok] > model.data.T].tolist()))
            raise ValidationError(f"targets ask for time indices {bad} beyond the fitted T={model.data.T}")
        mean = np.full(len(ids), np.nan)
        sd = np.full(len(ids), np.nan)
        if np.any(ok):
            R = model.predictor(Targets(xy[ok], t[ok], z[ok]))
            m, v = ens.linear(lambda _m: R)
            mean[ok], sd[ok] = m, np.sqrt(v)
        write_rows(
            out / "predictions.csv",
            ["id", "x", "y", "t", "mean", "sd", "status"],
            [[ids[i], xy[i, 0], xy[i, 1], int(t[i]), mean[i], sd[i], status[i]] for i in range(len(ids))],
        )
        if not np.all(ok):
            log.warning("%d of %d targets lie outside the mesh", int(np.sum(~ok)), len(ids))
    if calibrate:
        d = model.data
        if len(d.grid_value) == 0:
            raise ValidationError("grid calibration needs gridded data in the fit")
        cal = calibrate_grid(ens, Targets(d.grid_xy, d.grid_t, d.grid_z), d.grid_value)
        write_rows(
            out / "calibrated_grid.csv",
            ["cell_id", "x", "y", "t", "value", "calibrated"],
            [[d.grid_id[k], *d.grid_xy[k], int(d.grid_t[k]), d.grid_value[k], cal[k]] for k in range(len(cal))],
        )
    if tpath is None and not calibrate:
        raise ValidationError("nothing to predict: give --targets or --calibrate")
    return EXIT_OK


# --- cv -------------------------------------------------------------------


def cmd_cv(cfg: RunConfig, stations=None, grid=None) -> int:
    seed = 0 if cfg.seed is None else int(cfg.seed)
    data, _, _ = _load_data(cfg, stations, grid)
    priors = build_priors(cfg)
    _, mesh = _mesh_for(cfg, data, priors)
    ens = _fit(cfg, data, mesh, priors, seed)
    ids, xy = data.stations()
    plans = [
        build_plan(xy, radius_to_units(r, data.unit), ids, label=r) for r in cfg.lgocv.radii_km
    ]
    res = run_lgocv(cfg.model, data, mesh, priors, plans, ensemble=ens)
    out = _prepare_out(cfg, "cv", seed)
    _echo_config(out, cfg, seed=seed)
    res.write_csv(out / "lgocv.csv")
    res.scores().write_csv(out / "scores.csv")
    if res.flagged:
        log.warning("%d leave-out sets removed every station observation", len(res.flagged))
    return EXIT_OK


# --- report ---------------------------------------------------------------

FIGURE_FAMILIES = {
    "fig_field_scores": lambda r: r.score_name in ("avg_squared_error", "avg_posterior_sd", "avg_ds_score"),
    "fig_parameters": lambda r: r.score_name.startswith(("rel_error_", "post_sd_")),
    "fig_bma_weights": lambda r: r.score_name.startswith("bma_weight[") or r.score_name == "alpha1_hat",
    "fig_lgocv": lambda r: r.radius not in (None, ""),
}
REPORT_COLUMNS = SCORE_COLUMNS + ("source", "plot_value")


def _family_of(rec):
    for name, pred in FIGURE_FAMILIES.items():
        if pred(rec):
            return name
    return "status"


def cmd_report(cfg: RunConfig, in_dir) -> int:
    """Split every score table of ``in_dir`` into one tidy CSV per figure family.

    Every input row lands in exactly one output file; ``plot_value`` holds
    the log average squared error, the scaled DS score or the raw value.
    """
    in_dir = Path(in_dir)
    sources = sorted(p for p in in_dir.glob("*scores.csv") if p.is_file())
    if not sources:
        raise ValidationError(f"no *scores.csv files in {in_dir}")
    rows = []
    for p in sources:
        try:
            rep = ScoreReport.read_csv(p)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        rows.extend((p.name, r) for r in rep)
    ds = np.array([r.value for _, r in rows if r.score_name == "avg_ds_score" and np.isfinite(r.value)])
    ds_scaled = dict(zip(ds.tolist(), scaled_ds(ds).tolist())) if len(ds) else {}

    def plot_value(r):
        if r.score_name == "avg_squared_error" and r.value > 0:
            return math.log(r.value)
        if r.score_name == "avg_ds_score" and r.value in ds_scaled:
            return ds_scaled[r.value]
        return r.value

    out = Path(cfg.out) if cfg.out != "out" else in_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "run.json", {"command": "report", "version": __version__, "seed": None})
    buckets = defaultdict(list)
    for src, r in rows:
        buckets[_family_of(r)].append(r.row() + [src, plot_value(r)])
    for name in list(FIGURE_FAMILIES) + ["status"]:
        write_rows(out / f"{name}.csv", REPORT_COLUMNS, buckets.get(name, []))
    total = ScoreReport()
    for _, r in rows:
        total.records.append(r)
    write_rows(out / "summary.csv", SUMMARY_COLUMNS, summarize_scores(total))
    return EXIT_OK


# --- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmrf-fusion", description="Spatial data fusion with SPDE GMRF models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="worker processes (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate data sets and optionally run the study")
    for name, text in (("fit", "fit a model to station and grid data"), ("cv", "leave-group-out cross-validation")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--stations", help="station CSV (overrides the config)")
        s.add_argument("--grid", help="grid CSV (overrides the config)")
        s.add_argument("--model", choices=("fusion", "stations_only", "regcalib"))
    s = sub.add_parser("predict", parents=[common], help="predict at targets from a fit directory")
    s.add_argument("--fit", required=True, help="directory written by 'fit'")
    s.add_argument("--targets", help="target CSV with id,x,y,t and covariate columns")
    s.add_argument("--calibrate", action="store_true", default=None, help="write the bias-corrected grid")
    s = sub.add_parser("report", parents=[common], help="plot-ready tables from score files")
    s.add_argument("input", help="directory holding scores.csv files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(seed=args.seed, out=args.out, threads=args.threads, model=getattr(args, "model", None))
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, args.stations, args.grid)
        if args.command == "cv":
            return cmd_cv(cfg, args.stations, args.grid)
        if args.command == "predict":
            return cmd_predict(cfg, args.fit, args.targets, args.calibrate)
        return cmd_report(cfg, args.input)
    except (ValidationError, DataError, MeshError, OutOfMeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NotPositiveDefiniteError, FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
