"""Command-line front end.

    whittle-assoc index CONFIG [--method M] [--stride N] [--states N] [--check]
    whittle-assoc simulate CONFIG [--seeds N] [--crn | --no-crn] [--trace]
    whittle-assoc paper --suite cost|delay [--seeds N] [--check]
    whittle-assoc diagnose CONFIG | --suite cost|delay
    whittle-assoc plot CSV OUT.svg

Outputs go to ``--out-dir``, else $WHITTLE_ASSOC_OUT, else ./out.  Exit
status: 0 success, 1 a check failed, 2 bad usage or configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainParams, NetworkParams, ParameterError
from .index import METHODS, IndexConfig, NumericalError, build_table, write_tables_csv
from .scenarios import SUITES, ConfigError, dump_scenarios, load_scenarios, with_overrides
from .sim import (
    SUMMARY_HEADER,
    run,
    run_replicates,
    summary_rows,
    whittle_tables,
    write_departures_csv,
    write_trace_csv,
)

log = logging.getLogger("whittle_assoc")

OUT_ENV = "WHITTLE_ASSOC_OUT"
MAX_SERIES_POINTS = 2000
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV) or "out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_resolved(d: Path, name: str, scenarios, extra: dict) -> None:
    text = dump_scenarios(scenarios)
    head = "".join(f"; {k} = {v}\n" for k, v in extra.items())
    (d / f"{name}.resolved.ini").write_text(f"; whittle-assoc {__version__}\n" + head + text)


def _load(path):
    try:
        return load_scenarios(path)
    except FileNotFoundError:
        raise UsageError(f"no such config file: {path}") from None


def _chains(sc):
    """Decoupled chains of a scenario, in the order the file lists the mBSs."""
    p = sc.arrival.mean_p
    return [ChainParams(p, r, c) for r, c in zip(sc.rates, sc.costs)]


# ---------------------------------------------------------------------------

def cmd_index(args) -> int:
    scenarios = _load(args.config)
    d = out_dir(args)
    cfg = IndexConfig(method=args.method)
    status = EXIT_OK
    for sc in scenarios:
        n = args.states or (sc.buffer + 2 if sc.buffer is not None else 200)
        tables = []
        for i, ch in enumerate(_chains(sc)):
            try:
                tab = build_table(ch, n, args.stride, cfg, mbs_id=i + 1, allow_nonmonotone=True)
            except NumericalError as exc:
                log.error("%s mBS %d: %s", sc.name, i + 1, exc)
                return EXIT_CHECK
            if tab.violations:
                log.error("%s mBS %d: index decreases at %s", sc.name, i + 1,
                          [v[0] for v in tab.violations[:5]])
                status = EXIT_CHECK
            if args.check:
                worst = float(np.nanmax(tab.residuals))
                if not worst <= 1e-6:
                    log.error("%s mBS %d: residual %.3g exceeds 1e-6", sc.name, i + 1, worst)
                    status = EXIT_CHECK
            tables.append(tab)
        path = Path(args.out) if args.out and len(scenarios) == 1 else d / f"index_{sc.name}.csv"
        write_tables_csv(tables, path)
        log.info("wrote %s", path)
    _write_resolved(d, "index", scenarios, {"method": args.method, "stride": args.stride})
    return status


def downsample(series, limit: int = MAX_SERIES_POINTS):
    """(positions, values) with at most ``limit`` evenly spaced points, last point kept."""
    series = np.asarray(series)
    if len(series) <= limit:
        return np.arange(len(series)), series
    idx = np.unique(np.linspace(0, len(series) - 1, limit).round().astype(int))
    return idx, series[idx]


def _run_scenarios(scenarios, d: Path, stem: str, trace: bool, crn_override=None):
    """Run every scenario, write summary and running-average CSVs.  Returns summaries."""
    summaries = {}
    with open(d / f"{stem}_summary.csv", "w", newline="") as fs, \
            open(d / f"{stem}_running_avg.csv", "w", newline="") as fr:
        ws, wr = csv.writer(fs), csv.writer(fr)
        ws.writerow(SUMMARY_HEADER)
        wr.writerow(["scenario", "policy", "slot", "running_avg_cost"])
        for sc in scenarios:
            crn = sc.crn if crn_override is None else crn_override
            cfg = sc.sim_config()
            summ = run_replicates(cfg, sc.n_seeds, sc.policy_objects(), crn=crn)
            summaries[sc.name] = summ
            ws.writerows(summary_rows(sc.name, summ))
            w0 = cfg.window[0]
            for key, runs in summ.results.items():
                mean_series = np.mean([res.running_avg for res in runs], axis=0)
                pos, vals = downsample(mean_series)
                wr.writerows([sc.name, key, int(w0 + k), repr(float(v))] for k, v in zip(pos, vals))
            if trace:
                _write_traces(sc, d, crn)
            log.info("%s: %s", sc.name, ", ".join(
                f"{k}={summ.mean(k):.4g}" for k in summ.results))
    return summaries


def _write_traces(sc, d, crn):
    tables = None
    for pol in sc.policy_objects():
        cfg = with_overrides(sc).sim_config(pol)
        if tables is None and pol.name == "whittle":
            tables = whittle_tables(cfg)
        res = run(cfg, tables=tables if pol.name == "whittle" else None, trace=True, crn=crn)
        write_trace_csv(d / f"trace_{sc.name}_{pol.name}_seed{cfg.seed}.csv", cfg, res)
        write_departures_csv(d / f"departures_{sc.name}_{pol.name}_seed{cfg.seed}.csv", res)


def cmd_simulate(args) -> int:
    scenarios = [with_overrides(sc, n_seeds=args.seeds) for sc in _load(args.config)]
    d = out_dir(args)
    _write_resolved(d, "simulate", scenarios, {"crn_override": args.crn})
    _run_scenarios(scenarios, d, "simulate", args.trace, args.crn)
    return EXIT_OK


def ranking_report(summaries, metrics) -> list:
    """Rows (scenario, metric, ranking, whittle_first) with policies sorted by mean."""
    rows = []
    for name, summ in summaries.items():
        for m in metrics:
            means = {k: summ.mean(k, m) for k in summ.results}
            order = sorted(means, key=lambda k: (means[k], k))
            best = means[order[0]]
            first = "whittle" in means and means["whittle"] <= best
            rows.append((name, m, [(k, means[k]) for k in order], first))
    return rows


def cmd_paper(args) -> int:
    scenarios = SUITES[args.suite](n_seeds=args.seeds, seed=args.seed)
    d = out_dir(args)
    _write_resolved(d, f"paper_{args.suite}", scenarios, {"suite": args.suite})
    summaries = _run_scenarios(scenarios, d, f"paper_{args.suite}", args.trace)
    metrics = ("avg_cost",) if args.suite == "cost" else ("avg_delay", "blocking_prob")
    rows = ranking_report(summaries, metrics)
    with open(d / f"paper_{args.suite}_ranking.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "metric", "rank", "policy", "mean"])
        for name, m, order, _ in rows:
            w.writerows([name, m, k + 1, pol, repr(v)] for k, (pol, v) in enumerate(order))
    failed = [(name, m) for name, m, _, first in rows if not first]
    for name, m, order, first in rows:
        print(f"{'PASS' if first else 'FAIL'} {name} {m}: "
              + " < ".join(f"{k}={v:.4g}" for k, v in order))
    return EXIT_CHECK if (args.check and failed) else EXIT_OK


def cmd_diagnose(args) -> int:
    from .diagnostics import DEFAULT_T_MAX, diagnose_chain, report_dict

    if args.suite:
        scenarios = SUITES[args.suite](n_seeds=1)
    elif args.config:
        scenarios = _load(args.config)
    else:
        raise UsageError("diagnose needs a CONFIG file or --suite")
    reports, seen = [], set()
    for sc in scenarios:
        net = NetworkParams.from_chains(_chains(sc), warn_unstable=False)
        for ch, lab in zip(net.chains, net.labels):
            if ch in seen:
                continue
            seen.add(ch)
            checks = diagnose_chain(ch, t_max=args.t_max or DEFAULT_T_MAX, tamper=args.tamper)
            reports.append(report_dict(f"{sc.name}/mbs{lab + 1}", ch, checks))
            for c in checks:
                line = f"{c.status.upper():>20} {reports[-1]['chain']} {c.name}: {c.detail}"
                if c.failed:
                    line += f" witness={c.witness[:3]}"
                print(line)
    d = out_dir(args)
    (d / "diagnose_report.json").write_text(json.dumps(reports, indent=1, default=float))
    return EXIT_OK if all(r["passed"] for r in reports) else EXIT_CHECK


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return rows


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    rows = _read_csv(args.csv)
    cols = set(rows[0])
    try:
        if {"scenario", "policy", "slot", "running_avg_cost"} <= cols:
            fig = _plot_running(plt, rows)
        elif set(SUMMARY_HEADER) <= cols:
            fig = _plot_bars(plt, rows)
        else:
            raise UsageError(f"{args.csv}: unrecognised columns {sorted(cols)}")
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{args.csv}: malformed row ({exc})") from None
    plt.rcParams["svg.fonttype"] = "none"
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _group(rows, key):
    out: dict = {}
    for row in rows:
        out.setdefault(row[key], []).append(row)
    return out


def _plot_running(plt, rows):
    by_sc = _group(rows, "scenario")
    n = len(by_sc)
    ncol = min(n, 3)
    nrow = -(-n // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(5 * ncol, 3.6 * nrow), squeeze=False)
    for ax, (name, srows) in zip(axes.flat, by_sc.items()):
        for pol, prow in _group(srows, "policy").items():
            ax.plot([int(r["slot"]) for r in prow], [float(r["running_avg_cost"]) for r in prow],
                    label=pol, lw=1.2)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("slot")
        ax.set_ylabel("running average cost")
        ax.set_yscale("log")
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    return fig


def _plot_bars(plt, rows):
    by_sc = _group(rows, "scenario")
    policies = list(dict.fromkeys(r["policy"] for r in rows))
    metrics = [m for m in ("avg_delay", "blocking_prob", "avg_cost")
               if any(r[m] not in ("", "nan") for r in rows)]
    fig, axes = plt.subplots(1, len(metrics), figsize=(6 * len(metrics), 4), squeeze=False)
    width = 0.8 / max(len(policies), 1)
    xs = np.arange(len(by_sc))
    for ax, m in zip(axes.flat, metrics):
        for j, pol in enumerate(policies):
            means = []
            for srows in by_sc.values():
                vals = [float(r[m]) for r in srows if r["policy"] == pol]
                means.append(np.nanmean(vals) if vals else np.nan)
            ax.bar(xs + (j - (len(policies) - 1) / 2) * width, means, width, label=pol)
        ax.set_xticks(xs, list(by_sc), rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(m.replace("_", " "))
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    return fig


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="whittle-assoc", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./out)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="build index tables for each mBS")
    p.add_argument("config")
    p.add_argument("--out", help="CSV path (single-scenario configs only)")
    p.add_argument("--method", choices=METHODS, default="direct")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--states", type=int, help="table length (default buffer+2, or 200)")
    p.add_argument("--check", action="store_true", help="fail if any residual exceeds 1e-6")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("simulate", parents=[common], help="run scenarios from a config file")
    p.add_argument("config")
    p.add_argument("--seeds", type=int)
    p.add_argument("--crn", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--trace", action="store_true", help="write per-slot traces for the first seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("paper", parents=[common], help="run a built-in experiment suite")
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--check", action="store_true", help="exit 1 unless whittle ranks first")
    p.set_defaults(func=cmd_paper)

    p = sub.add_parser("diagnose", parents=[common], help="structural checks on each chain")
    p.add_argument("config", nargs="?")
    p.add_argument("--suite", choices=sorted(SUITES))
    p.add_argument("--t-max", type=int)
    p.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plot", help="SVG chart from a summary or running-average CSV")
    p.add_argument("csv")
    p.add_argument("out")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    for attr in ("seeds", "stride", "states", "t_max"):
        v = getattr(args, attr, None)
        if v is not None and v < 1:
            print(f"error: --{attr.replace('_', '-')} must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
