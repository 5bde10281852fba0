"""Command-line front end over the full pipeline.

Every subcommand reads explicit inputs (grid file, seeds, budgets) and
writes its results plus a ``run_manifest.json`` capturing the resolved
configuration and the SHA-256 of each artifact. There is no hidden
randomness: rerunning a subcommand with the same flags reproduces the
same decision artifacts byte for byte. Timing columns in benchmark
outputs are measurements of the host and are the one exception.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from . import dataforge as df
from . import plotting
from . import reduction as red
from . import scheduler as sch
from . import surrogate as sg
from .grid import (CCRC, GridTopology, OperatingPoint, enumerate_all_ccrcs,
                   feasible_ccrcs, load_grid_file)
from .powerflow import PowerFlowError, solve_power_flow
from .smallsignal import (IndicatorUndefinedError, assemble_state_space,
                          assess_stability, indicators)

log = logging.getLogger("ccrc_sched.cli")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("CCRC_SCHED_LOG", "warn").lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        print(f"warning: unknown CCRC_SCHED_LOG value {name!r}; using warn",
              file=sys.stderr)
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


@dataclass(frozen=True)
class RunConfig:
    """Resolved inputs of one run, exactly as written to the manifest."""

    command: str
    grid: str
    out_dir: Path
    seeds: dict
    params: dict
    jobs: int = 1


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, artifacts: Iterable[Path]) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": __version__,
        "command": cfg.command,
        "grid": cfg.grid,
        "seeds": cfg.seeds,
        "params": cfg.params,
        "jobs": cfg.jobs,
        "artifacts": {str(p.relative_to(cfg.out_dir)): _sha256(p)
                      for p in sorted(set(artifacts))},
    }
    path = cfg.out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out

def _load_grid(args) -> GridTopology:
    if args.grid != "default" and not Path(args.grid).is_file():
        raise FileNotFoundError(f"grid file not found: {args.grid}")
    return load_grid_file(args.grid)


def _load_op(path: str) -> OperatingPoint:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"operating point file not found: {path}")
    return OperatingPoint.from_dict(json.loads(p.read_text()))


def _single_ccrc(topology: GridTopology, cid: int) -> CCRC:
    # single-case commands may inspect infeasible configurations too
    return CCRC.from_id(cid, topology.n_ipcs)


def _select_ccrcs(topology: GridTopology, spec: str) -> list[CCRC]:
    feasible = feasible_ccrcs(topology)
    if spec == "all":
        return feasible
    by_id = {c.id: c for c in feasible}
    ccrcs = []
    for token in spec.split(","):
        cid = int(token)
        if cid not in by_id:
            raise ValueError(f"CCRC {cid} is not feasible on this grid")
        ccrcs.append(by_id[cid])
    return ccrcs


def _parse_weights(text: str) -> tuple[float, float, float, float]:
    parts = tuple(float(t) for t in text.split(","))
    if len(parts) != 4:
        raise ValueError("weights must be four comma-separated numbers")
    return parts


def _parse_pair(text: str) -> tuple[int, int]:
    parts = tuple(int(t) for t in text.split(","))
    if len(parts) != 2:
        raise ValueError("fallback pair must be two comma-separated ids")
    return parts


def _float_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format="%.12g")
    return path


def _table_worker(grid: str, n_ops: int, ops_seed: int,
                  ccrc_ids: Sequence[int]) -> pd.DataFrame:
    # each worker re-derives the identical operating points from the seed
    topology = load_grid_file(grid)
    by_id = {c.id: c for c in feasible_ccrcs(topology)}
    ops = df.lhs_sample(topology.operating_ranges, n_ops, seed=ops_seed)
    return red.evaluate_indicator_table(
        topology, [by_id[i] for i in ccrc_ids], ops)


def _indicator_table(args, ccrcs: Sequence[CCRC]) -> pd.DataFrame:
    ids = [c.id for c in ccrcs]
    jobs = max(1, min(args.jobs, len(ids)))
    worker = partial(_table_worker, args.grid, args.n_ops, args.ops_seed)
    if jobs == 1:
        parts = [worker(ids)]
    else:
        chunks = [ids[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(worker, chunks))
    table = pd.concat(parts, ignore_index=True)
    return table.sort_values(["ccrc_id", "op_index"]).reset_index(drop=True)


def _records_frame(records: Sequence[sch.ScheduleRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {
            "slot": r.slot, "ccrc_id": r.ccrc_id, "mode": r.mode,
            "gamma": r.gamma, "gamma_star_used": r.gamma_star_used,
            "relaxations": r.relaxations,
            "n_alternatives": r.n_alternatives,
            "n_verifications": r.n_verifications,
            "verified": int(r.verified), "plan_failed": int(r.plan_failed),
            "planned_ccrc_id": r.planned_ccrc_id,
        }
        for col in sch.INDICATOR_COLS:
            row[col] = r.indicators[col] if r.indicators else np.nan
        row["error"] = r.error or ""
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_enumerate(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    every = enumerate_all_ccrcs(topology)
    feasible = feasible_ccrcs(topology)
    print(f"{len(every)} total / {len(feasible)} feasible")
    rows = []
    for c in feasible:
        row = {"ccrc_id": c.id, "label": c.label()}
        row.update({f"role_{ipc.name}": int(r)
                    for ipc, r in zip(topology.ipcs, c.roles)})
        rows.append(row)
    csv_path = _float_csv(pd.DataFrame(rows), out / "ccrcs.csv")
    cfg = RunConfig("enumerate", args.grid, out, {}, {})
    write_manifest(cfg, [csv_path])
    return 0


def _cmd_powerflow(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    op = _load_op(args.op)
    ccrc = _single_ccrc(topology, args.ccrc)
    pf = solve_power_flow(topology, op, ccrc)
    print(f"converged in {pf.iterations} iterations, "
          f"max residual {pf.max_residual:.3e}")
    rows = []
    for bus in sorted(pf.ac_voltage):
        mag, ang = pf.voltage_polar(bus)
        rows.append({"quantity": "v_mag_pu", "element": bus, "value": mag})
        rows.append({"quantity": "v_angle_rad", "element": bus, "value": ang})
    for bus, v in sorted(pf.dc_voltage.items()):
        rows.append({"quantity": "v_dc_pu", "element": bus, "value": v})
    for label, pq in (("gen", pf.gen_pq), ("load", pf.load_pq),
                      ("thevenin", pf.thevenin_pq), ("ipc_ac", pf.ipc_ac_pq)):
        for el, (p, q) in sorted(pq.items()):
            rows.append({"quantity": f"p_{label}_pu", "element": el, "value": p})
            rows.append({"quantity": f"q_{label}_pu", "element": el, "value": q})
    for el, p in sorted(pf.ipc_dc_p.items()):
        rows.append({"quantity": "p_ipc_dc_pu", "element": el, "value": p})
        rows.append({"quantity": "ipc_loss_pu", "element": el,
                     "value": pf.ipc_loss(el)})
    csv_path = _float_csv(pd.DataFrame(rows), out / "powerflow.csv")
    cfg = RunConfig("powerflow", args.grid, out, {},
                    {"op": args.op, "ccrc": ccrc.id})
    write_manifest(cfg, [csv_path])
    return 0


def _cmd_assess(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    op = _load_op(args.op)
    ccrc = _single_ccrc(topology, args.ccrc)
    try:
        pf = solve_power_flow(topology, op, ccrc)
    except PowerFlowError as exc:
        print(f"upsilon=0 diverged=1 ({exc})")
        cfg = RunConfig("assess", args.grid, out, {},
                        {"op": args.op, "ccrc": ccrc.id})
        write_manifest(cfg, [])
        return 0
    ss = assemble_state_space(topology, ccrc, pf)
    label = assess_stability(ss)
    ind = indicators(ss)
    parts = [f"upsilon={ind.upsilon}", f"abscissa={label.abscissa:.6g}"]
    for name, value in zip(ind.NAMES, ind.values()):
        parts.append(f"{name}={'undefined' if value is None else f'{value:.6g}'}")
    print(" ".join(parts))
    cfg = RunConfig("assess", args.grid, out, {},
                    {"op": args.op, "ccrc": ccrc.id})
    write_manifest(cfg, [])
    return 0


def _cmd_indicators(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    ccrcs = _select_ccrcs(topology, args.ccrcs)
    table = _indicator_table(args, ccrcs)
    csv_path = _float_csv(table, out / "indicator_table.csv")
    stable = float((table["upsilon"] == 1.0).mean())
    print(f"{len(table)} cases over {len(ccrcs)} configurations; "
          f"{stable:.1%} stable")
    cfg = RunConfig("indicators", args.grid, out,
                    {"ops_seed": args.ops_seed},
                    {"ccrcs": args.ccrcs, "n_ops": args.n_ops},
                    jobs=args.jobs)
    write_manifest(cfg, [csv_path])
    return 0


def _datagen_worker(grid: str, budget: int, task) -> tuple:
    cid, pool_seed, ind_seed = task
    topology = load_grid_file(grid)
    by_id = {c.id: c for c in feasible_ccrcs(topology)}
    ccrc = by_id[cid]
    pool = df.build_stability_dataset(topology, [ccrc], budget, pool_seed)
    try:
        per_col = df.build_indicator_datasets(topology, ccrc, budget,
                                              ind_seed)
    except df.InsufficientDataError as exc:
        return cid, pool, None, str(exc)
    return cid, pool, per_col, None


def _cmd_datagen(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    ccrcs = _select_ccrcs(topology, args.ccrcs)
    root = np.random.SeedSequence(args.seed)
    s_pool, s_ind = root.spawn(2)
    tasks = [(c.id, ps, is_) for c, ps, is_ in
             zip(ccrcs, s_pool.spawn(len(ccrcs)), s_ind.spawn(len(ccrcs)))]
    jobs = max(1, min(args.jobs, len(tasks)))
    worker = partial(_datagen_worker, args.grid, args.budget)
    if jobs == 1:
        results = [worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(worker, tasks))

    artifacts: list[Path] = []
    frames = [r[1].frame for r in results]
    first = results[0][1]
    merged = pd.concat(frames, ignore_index=True)
    labeled = merged[merged["diverged"] == 0]
    balance = float((labeled["upsilon"] == 1.0).mean()) if len(labeled) else 0.0
    pool_ds = df.Dataset(frame=merged, feature_cols=first.feature_cols,
                         target_cols=first.target_cols, role=first.role,
                         ccrc_id=None,
                         meta={**first.meta, "class_balance": balance})
    artifacts += df.save_dataset(pool_ds, out / "pool")

    skipped = []
    for cid, _, per_col, err in results:
        if per_col is None:
            skipped.append(cid)
            log.warning("no indicator datasets for CCRC %d: %s", cid, err)
            continue
        for col, ds in per_col.items():
            artifacts += df.save_dataset(ds, out / f"ind_{cid}_{col}")
    print(f"pool rows={len(merged)} class_balance={balance:.3f} "
          f"indicator_sets={sum(1 for r in results if r[2])} "
          f"skipped={skipped or 'none'}")
    cfg = RunConfig("datagen", args.grid, out, {"seed": args.seed},
                    {"ccrcs": args.ccrcs, "budget": args.budget,
                     "skipped": skipped}, jobs=args.jobs)
    write_manifest(cfg, artifacts)
    return 0


def _cmd_train(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    data = Path(args.data)
    if not (data / "pool.schema.json").is_file():
        raise FileNotFoundError(f"no pool dataset under {data}")
    pool = df.load_dataset(data / "pool")
    per: dict[tuple[int, str], df.Dataset] = {}
    for schema in sorted(data.glob("ind_*.schema.json")):
        stem = schema.name.removesuffix(".schema.json")
        _, cid, col = stem.split("_", 2)
        per[(int(cid), col)] = df.load_dataset(data / stem)
    bundle = sch.fit_surrogate_bundle(topology, pool, per, args.seed)
    bundle_dir = bundle.save(out / "bundle")
    artifacts = [p for p in bundle_dir.rglob("*") if p.is_file()]
    print(f"classifier columns={len(bundle.classifier.columns)} "
          f"regressors={len(bundle.regressors)}")
    cfg = RunConfig("train", args.grid, out, {"seed": args.seed},
                    {"data": str(data)})
    write_manifest(cfg, artifacts)
    return 0


def _cmd_reduce(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    ccrcs = _select_ccrcs(topology, args.ccrcs)
    ops = df.lhs_sample(topology.operating_ranges, args.n_ops,
                        seed=args.ops_seed)
    table = _indicator_table(args, ccrcs)
    result, maps, _ = red.reduce_ccrc_set(topology, ccrcs, ops,
                                          n_regions=args.n_regions,
                                          seed=args.seed, table=table)
    artifacts = [_float_csv(table, out / "indicator_table.csv")]
    artifacts += red.render_outputs(maps, result, out, table=table)
    doc = {
        "reduced": list(result.reduced),
        "indicators": list(result.indicators),
        "groups": [{"attributes": list(attrs), "ccrc_ids": list(ids)}
                   for attrs, ids in sorted(result.groups.items())],
        "per_indicator_selected": {ind: list(sel) for ind, sel in
                                   zip(result.indicators,
                                       result.per_indicator_selected)},
    }
    json_path = out / "reduced_set.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    artifacts.append(json_path)
    print(f"{len(ccrcs)} -> {len(result.reduced)} configurations: "
          f"{list(result.reduced)}")
    cfg = RunConfig("reduce", args.grid, out,
                    {"ops_seed": args.ops_seed, "seed": args.seed},
                    {"ccrcs": args.ccrcs, "n_ops": args.n_ops,
                     "n_regions": args.n_regions}, jobs=args.jobs)
    write_manifest(cfg, artifacts)
    return 0


def _load_bundle_arg(topology: GridTopology, path: str | None):
    if path is None:
        return None
    p = Path(path)
    if not (p / "bundle.json").is_file():
        raise FileNotFoundError(f"no surrogate bundle under {path}")
    return sch.load_bundle(topology, p)


def _cmd_schedule(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    reduced = _select_ccrcs(topology, args.reduced)
    bundle = _load_bundle_arg(topology, args.bundle)
    forecast, actual = sch.day_ahead_scenario(topology, args.scenario_seed,
                                              args.slots)
    fallback = _parse_pair(args.fallback_pair) if args.fallback_pair else None
    if fallback is None and args.mode == "no-mcdm":
        if bundle is None:
            raise ValueError("no-mcdm needs --fallback-pair or --bundle")
        fallback = sch.pick_fallback_pair(bundle, reduced, actual)
    records = sch.run_schedule(
        topology, actual, args.mode, reduced, surrogate=bundle,
        forecast_sequence=forecast if args.mode == "day-ahead" else None,
        gamma_star=args.gamma_star, weights=_parse_weights(args.weights),
        fallback_pair=fallback)
    csv_path = _float_csv(_records_frame(records), out / "schedule.csv")
    switches = sum(r.gamma > 0 for r in records)
    flagged = sum(r.plan_failed for r in records)
    print(f"{args.mode}: {len(records)} slots, {switches} switches, "
          f"{flagged} flagged")
    cfg = RunConfig("schedule", args.grid, out,
                    {"scenario_seed": args.scenario_seed},
                    {"mode": args.mode, "reduced": args.reduced,
                     "slots": args.slots, "gamma_star": args.gamma_star,
                     "weights": args.weights,
                     "fallback_pair": list(fallback) if fallback else None,
                     "bundle": args.bundle})
    write_manifest(cfg, [csv_path])
    return 0


def _cmd_benchmark(args) -> int:
    topology = _load_grid(args)
    out = _out_dir(args)
    reduced = _select_ccrcs(topology, args.reduced)
    modes = tuple(args.modes.split(","))
    unknown = [m for m in modes if m not in sch.MODES]
    if unknown:
        raise ValueError(f"unknown modes: {unknown}")
    bundle = _load_bundle_arg(topology, args.bundle)
    if "data-driven" in modes and bundle is None:
        raise FileNotFoundError("data-driven mode needs --bundle")
    fallback = _parse_pair(args.fallback_pair) if args.fallback_pair else None
    records, report = sch.benchmark_day(
        topology, reduced, bundle, args.scenario_seed, slots=args.slots,
        gamma_star=args.gamma_star, weights=_parse_weights(args.weights),
        fallback_pair=fallback, modes=modes)
    artifacts = []
    for mode, recs in records.items():
        artifacts.append(_float_csv(_records_frame(recs),
                                    out / f"schedule_{mode}.csv"))
    artifacts += sch.render_benchmark(report, out)
    for mode in modes:
        s = report.summaries[mode]
        line = (f"{mode}: agreement={s.agreement:.3f} "
                f"instability={s.instability_rate:.3f} "
                f"t_solve={s.mean_t_solve * 1e3:.2f}ms "
                f"t_verify={s.mean_t_verify * 1e3:.2f}ms")
        if mode in report.speedup:
            line += f" speedup={report.speedup[mode]:.3f}"
        print(line)
    cfg = RunConfig("benchmark", args.grid, out,
                    {"scenario_seed": args.scenario_seed},
                    {"reduced": args.reduced, "slots": args.slots,
                     "modes": args.modes, "gamma_star": args.gamma_star,
                     "weights": args.weights,
                     "fallback_pair": list(fallback) if fallback else None,
                     "bundle": args.bundle})
    write_manifest(cfg, artifacts)
    return 0


def _cmd_plot(args) -> int:
    src = Path(args.csv)
    if not src.is_file():
        raise FileNotFoundError(f"csv not found: {args.csv}")
    out = _out_dir(args)
    frame = pd.read_csv(src)
    ycols = args.y.split(",")
    missing = [c for c in [args.x, *ycols] if c not in frame.columns]
    if missing:
        raise ValueError(f"columns not in csv: {missing}")
    title = args.title or src.stem
    if args.kind == "series":
        fig = plotting.series_plot(frame[args.x].to_numpy(),
                                   {c: frame[c].to_numpy() for c in ycols},
                                   args.x, ycols[0] if len(ycols) == 1
                                   else "value", title)
    elif args.kind == "scatter":
        if args.group and args.group in frame.columns:
            groups = {str(g): (sub[args.x].to_numpy(dtype=float),
                               sub[ycols[0]].to_numpy(dtype=float))
                      for g, sub in frame.groupby(args.group)}
        else:
            groups = {ycols[0]: (frame[args.x].to_numpy(dtype=float),
                                 frame[ycols[0]].to_numpy(dtype=float))}
        fig = plotting.scatter_groups(groups, args.x, ycols[0], title)
    else:  # bars
        fig = plotting.bar_groups([str(v) for v in frame[args.x]],
                                  {c: frame[c].tolist() for c in ycols},
                                  ycols[0] if len(ycols) == 1 else "value",
                                  title)
    svg = plotting.save_svg(fig, out / f"{args.name}.svg")
    print(f"wrote {svg}")
    cfg = RunConfig("plot", "-", out, {},
                    {"csv": str(src), "kind": args.kind, "x": args.x,
                     "y": args.y, "group": args.group, "name": args.name})
    write_manifest(cfg, [svg])
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _add_common(p, *, jobs=False):
    p.add_argument("--grid", default="default",
                   help="grid file path or 'default' for the bundled system")
    p.add_argument("--out", default=".", help="output directory")
    if jobs:
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="worker process cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccrc-sched",
        description="Converter control-role scheduling pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="count and list feasible CCRCs")
    _add_common(p)
    p.set_defaults(func=_cmd_enumerate)

    p = sub.add_parser("powerflow", help="solve one coupled power flow")
    _add_common(p)
    p.add_argument("--op", required=True, help="operating point JSON file")
    p.add_argument("--ccrc", required=True, type=int, help="CCRC id")
    p.set_defaults(func=_cmd_powerflow)

    p = sub.add_parser("assess", help="stability label and indicators "
                                      "for one case")
    _add_common(p)
    p.add_argument("--op", required=True)
    p.add_argument("--ccrc", required=True, type=int)
    p.set_defaults(func=_cmd_assess)

    p = sub.add_parser("indicators", help="exact indicator table over "
                                          "sampled operating points")
    _add_common(p, jobs=True)
    p.add_argument("--ccrcs", default="all",
                   help="'all' or comma-separated feasible ids")
    p.add_argument("--n-ops", required=True, type=int)
    p.add_argument("--ops-seed", required=True, type=int)
    p.set_defaults(func=_cmd_indicators)

    p = sub.add_parser("datagen", help="generate labeled training datasets")
    _add_common(p, jobs=True)
    p.add_argument("--ccrcs", required=True)
    p.add_argument("--budget", required=True, type=int,
                   help="cases per configuration")
    p.add_argument("--seed", required=True, type=int)
    p.set_defaults(func=_cmd_datagen)

    p = sub.add_parser("train", help="fit the surrogate bundle from "
                                     "saved datasets")
    _add_common(p)
    p.add_argument("--data", required=True, help="datagen output directory")
    p.add_argument("--seed", required=True, type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reduce", help="reduce the CCRC catalogue")
    _add_common(p, jobs=True)
    p.add_argument("--ccrcs", default="all")
    p.add_argument("--n-ops", required=True, type=int)
    p.add_argument("--ops-seed", required=True, type=int)
    p.add_argument("--n-regions", type=int, default=20)
    p.add_argument("--seed", required=True, type=int)
    p.set_defaults(func=_cmd_reduce)

    p = sub.add_parser("schedule", help="run one scheduling mode over a "
                                        "seeded day")
    _add_common(p)
    p.add_argument("--reduced", required=True,
                   help="comma-separated reduced-set ids")
    p.add_argument("--mode", required=True, choices=sch.MODES)
    p.add_argument("--slots", type=int, default=96)
    p.add_argument("--scenario-seed", required=True, type=int)
    p.add_argument("--gamma-star", type=int, default=1)
    p.add_argument("--weights", default="0.25,0.25,0.25,0.25")
    p.add_argument("--bundle", help="surrogate bundle directory")
    p.add_argument("--fallback-pair", help="two ids for no-mcdm")
    p.set_defaults(func=_cmd_schedule)

    p = sub.add_parser("benchmark", help="compare scheduling modes over "
                                         "one day")
    _add_common(p)
    p.add_argument("--reduced", required=True)
    p.add_argument("--slots", type=int, default=96)
    p.add_argument("--scenario-seed", required=True, type=int)
    p.add_argument("--gamma-star", type=int, default=1)
    p.add_argument("--weights", default="0.25,0.25,0.25,0.25")
    p.add_argument("--bundle")
    p.add_argument("--fallback-pair")
    p.add_argument("--modes", default=",".join(sch.MODES))
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("plot", help="render an SVG from a delimited table")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", choices=("series", "scatter", "bars"),
                   default="series")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True, help="comma-separated value columns")
    p.add_argument("--group", help="optional grouping column for scatter")
    p.add_argument("--title", default="")
    p.add_argument("--name", default="plot")
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_plot)

    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parse and run; returns the process exit status."""
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (PowerFlowError, sch.NoStableAlternativeError,
            IndicatorUndefinedError, df.InsufficientDataError,
            red.IncompleteMapError, red.UncoverableRegionError,
            sg.ManifestError, sg.UndefinedMetricError,
            np.linalg.LinAlgError, FileNotFoundError, KeyError,
            RuntimeError, ValueError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
