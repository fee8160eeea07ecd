"""Command-line entry point: ``ceql <command> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import expr as ex
from .bench import (Dataset, RunMetrics, aggregate, division_pathology_demo, get_benchmark, registry,
                    run_benchmark, sample_dataset)
from .config import RunConfig, load_config
from .errors import CeqlError, DegenerateModel, ImaginaryResidue, InvalidConfig, SamplingStarved
from .graph import Network, build_network
from .train import run_training

log = logging.getLogger("ceql")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

AGGREGATE_COLUMNS = ["expression_id", "interp_mse_mean", "interp_mse_std", "extrap_mse_mean",
                     "extrap_mse_std", "nc_mean", "nc_std", "failed_runs"]


class UsageError(Exception):
    pass


# --- helpers ----------------------------------------------------------------------

def atomic_write(path, text: str):
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _atomic_via(path, writer):
    """Run ``writer(tmp_path)`` then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def parse_ids(spec: str) -> list[str]:
    """``E-1..E-10`` or ``E-1,E-7`` (ranges and lists may mix)."""
    known = [b.id for b in registry()]
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            try:
                i, j = known.index(lo.strip()), known.index(hi.strip())
            except ValueError:
                raise UsageError(f"unknown benchmark range {part!r}") from None
            out += known[i:j + 1]
        elif part in known:
            out.append(part)
        else:
            raise UsageError(f"unknown benchmark id {part!r}")
    return out


def parse_seeds(spec: str | None, base: int) -> list[int] | None:
    """A count (``5`` -> base..base+4) or an explicit list (``0,3,7``)."""
    if spec is None:
        return None
    try:
        if "," in spec:
            seeds = [int(s) for s in spec.split(",") if s.strip()]
        else:
            seeds = list(range(base, base + int(spec)))
    except ValueError:
        raise UsageError(f"bad --seeds value {spec!r}") from None
    if not seeds:
        raise UsageError("--seeds selects no runs")
    return seeds


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "scale", None) is not None:
        cfg.scale = args.scale
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


# --- bench --------------------------------------------------------------------------

def _one_run(job):
    bench_id, seed, cfg_dict, out_dir = job
    cfg = RunConfig.from_dict(cfg_dict)
    b = get_benchmark(bench_id)
    try:
        rec = run_benchmark(b, seed, cfg.schedule, cfg.scale, cfg.library, cfg.n_train, cfg.n_test,
                            cfg.engine, cfg.init)
    except SamplingStarved as exc:
        return {"benchmark": bench_id, "seed": seed, "status": "failed", "metrics": None,
                "expression": "", "message": f"SamplingStarved: {exc}"}
    out = Path(out_dir)
    stem = f"{bench_id}_seed{seed}"
    result = rec.to_dict()
    result.pop("seconds")  # keep run files reproducible byte for byte
    atomic_write(out / "runs" / f"{stem}.json", json.dumps(result, indent=1))
    if rec.network is not None:
        atomic_write(out / "networks" / f"{stem}.json", json.dumps(rec.network.to_dict(), indent=1))
    if rec.history is not None:
        _atomic_via(out / "history" / f"{stem}.csv", rec.history.to_csv)
    log.info("%s seed %d: %s (%.1fs) %s", bench_id, seed, rec.status, rec.seconds, rec.expression)
    return result


def _metrics_of(result):
    m = result.get("metrics")
    return RunMetrics(**m) if m else None


def _finite(m) -> bool:
    return math.isfinite(m.interp_mse) and math.isfinite(m.extrap_mse)


def aggregate_rows(results: list[dict], ids: list[str]) -> list[dict]:
    """One row per benchmark; runs without finite test metrics count as failed."""
    rows = []
    for bid in ids:
        mine = [r for r in results if r["benchmark"] == bid]
        ok = [m for m in map(_metrics_of, mine) if m is not None and _finite(m)]
        failed = len(mine) - len(ok)
        if ok:
            agg = aggregate(ok)
            vals = [agg["interp_mse_mean"], agg["interp_mse_std"], agg["extrap_mse_mean"],
                    agg["extrap_mse_std"], agg["node_count_mean"], agg["node_count_std"]]
        else:
            vals = [math.nan] * 6
        rows.append(dict(zip(AGGREGATE_COLUMNS, [bid, *vals, failed])))
    return rows


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.ids:
        cfg.benchmarks = parse_ids(args.ids)
    seeds = parse_seeds(args.seeds, args.seed or 0)
    if seeds is not None:
        cfg.seeds = seeds
    for bid in cfg.benchmarks:
        get_benchmark(bid)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    jobs = [(bid, s, cfg.to_dict(), str(out)) for bid in cfg.benchmarks for s in cfg.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]
    rows = aggregate_rows(results, cfg.benchmarks)
    atomic_write(out / "aggregate.csv", _csv_text(AGGREGATE_COLUMNS, rows))
    lines = [f"{r['benchmark']}\tseed {r['seed']}\t{r['status']}\t{r['expression']}" for r in results]
    atomic_write(out / "expressions.txt", "\n".join(lines) + "\n")
    print(_csv_text(AGGREGATE_COLUMNS, rows), end="")
    return EXIT_FAILED if all(r["status"] != "ok" for r in results) else EXIT_OK


# --- fit / extract ----------------------------------------------------------------------

def _report_expression(e, out: Path | None, net: Network | None = None):
    text = ex.render(e)
    print(text)
    if out is not None:
        atomic_write(out / "expression.txt", text + "\n")
        atomic_write(out / "expression.json", ex.dumps(e))
        if net is not None:
            atomic_write(out / "network.json", json.dumps(net.to_dict(), indent=1))


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = Dataset.from_csv(args.train_csv)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    net = build_network(data.input_dim, cfg.layers(), True, init=cfg.init, seed=seed)
    res = run_training(net, data.X, data.y, cfg.effective_schedule(), seed=seed, engine=cfg.engine)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.seeds = [seed]
        cfg.data = [str(args.train_csv)]
        cfg.save(out / "config.yaml")
        _atomic_via(out / "history.csv", res.history.to_csv)
    if not res.ok:
        print(f"training failed: {res.message}", file=sys.stderr)
        return EXIT_FAILED
    if out is not None:
        # saved before extraction so `ceql extract --im-tolerance` can retry it
        atomic_write(out / "network.json", json.dumps(res.net.to_dict(), indent=1))
    e = ex.extract(res.net)
    _report_expression(e, out)
    return EXIT_OK


def cmd_extract(args) -> int:
    net = Network.load(args.network)
    e = ex.extract(net, im_tolerance=args.im_tolerance)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _report_expression(e, out)
    if args.json:
        print(ex.dumps(e))
    return EXIT_OK


# --- data / demo --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    b = get_benchmark(args.benchmark)
    if args.split not in ("train", "interp", "extrap"):
        raise UsageError(f"unknown split {args.split!r}")
    data = sample_dataset(b, args.split, args.n, args.seed or 0)
    if args.out:
        _atomic_via(args.out, data.to_csv)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(data.input_dim)] + ["y"])
        for row, t in zip(data.X, data.y):
            w.writerow([f"{v:.17g}" for v in row] + [f"{t:.17g}"])
    return EXIT_OK


def cmd_demo_division(args) -> int:
    a0 = complex(args.re, 0.0 if args.restrict_real else args.im)
    traj = division_pathology_demo(a0, args.restrict_real, args.steps, args.lr, args.seed or 0,
                                   args.points)
    if args.out:
        _atomic_via(args.out, traj.to_csv)
    a = traj.final_a
    print(f"final a = {a.real:.6g}{a.imag:+.6g}i  |a| = {abs(a):.6g}  loss = {traj.final_loss:.6g}")
    return EXIT_OK


# --- frf ------------------------------------------------------------------------------------

def cmd_frf(args) -> int:
    from . import frf

    if args.synthetic:
        spec = frf.three_resonance_spec()
        clean = frf.synth_frf(spec, args.levels, 0.0, args.points, seed=args.seed or 0)
        sd = args.noise * float(clean.y.max())
        data = frf.synth_frf(spec, args.levels, sd, args.points, seed=args.seed or 0) if sd else clean
    elif args.data:
        data = frf.FrfData.from_csv(args.data)
    else:
        raise UsageError("frf needs a data CSV or --synthetic")
    config = frf.FrfConfig(scale=args.scale if args.scale is not None else 1.0,
                           min_edges=args.min_edges, n_terms=args.terms, seed=args.seed or 0)
    out = Path(args.out or "frf_out")
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        _atomic_via(out / "data.csv", data.to_csv)
    fit = frf.fit_frf(data, config)
    atomic_write(out / "model.json", json.dumps(fit.model.to_dict(), indent=1))
    atomic_write(out / "prune_events.json", json.dumps(fit.prune_events, indent=1))
    hist_cols = ["epoch", "phase", "loss", "data_mse", "l1_mass", "im_mass", "active_edges", "lr",
                 "flagged_samples"]
    atomic_write(out / "history.csv", _csv_text(hist_cols, [dict(zip(hist_cols, h)) for h in fit.history]))
    rows = frf.peak_report(fit.model, data)
    _atomic_via(out / "peak_report.csv", lambda p: frf.write_peak_report(rows, p))
    print(frf.render_model(fit.model))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("--config", default=None, help=f"YAML run config (default: ${'{'}CEQL_DEFAULT_CONFIG{'}'})")
    common.add_argument("--scale", type=float, default=None, help="multiply all phase epoch counts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ceql", description="Complex-weighted equation learner.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", parents=[common], help="benchmark sweep")
    b.add_argument("--ids", default=None, help="E-1..E-10 or a comma list")
    b.add_argument("--seeds", default=None, help="count or comma list")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fit", parents=[common], help="train on a CSV and print the expression")
    f.add_argument("train_csv")
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gen-data", parents=[common], help="sample a benchmark split to CSV")
    g.add_argument("benchmark")
    g.add_argument("split")
    g.add_argument("n", type=int)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("extract", parents=[common], help="extract a saved network")
    e.add_argument("network")
    e.add_argument("--im-tolerance", type=float, default=1e-4)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("demo-division", parents=[common], help="single-parameter division fit")
    d.add_argument("--re", type=float, default=1.5)
    d.add_argument("--im", type=float, default=0.5)
    d.add_argument("--restrict-real", action="store_true")
    d.add_argument("--steps", type=int, default=20000)
    d.add_argument("--lr", type=float, default=1e-2)
    d.add_argument("--points", type=int, default=100)
    d.set_defaults(func=cmd_demo_division)

    r = sub.add_parser("frf", parents=[common], help="fit the resonance surrogate")
    r.add_argument("data", nargs="?")
    r.add_argument("--synthetic", action="store_true")
    r.add_argument("--noise", type=float, default=0.0, help="noise sd as a fraction of max(y)")
    r.add_argument("--levels", type=float, nargs="+", default=[0.0, 1.97, 3.95, 5.92])
    r.add_argument("--points", type=int, default=400)
    r.add_argument("--terms", type=int, default=20)
    r.add_argument("--min-edges", type=int, default=50)
    r.set_defaults(func=cmd_frf)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DegenerateModel, ImaginaryResidue) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (UsageError, InvalidConfig, SamplingStarved, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CeqlError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
