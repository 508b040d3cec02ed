"""Command-line entry points: ``gen``, ``run``, ``sweep`` and ``plotdata``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .data import (
    DatasetError,
    Domain,
    gen_blobs,
    gen_two_moons,
    load_csv,
    reference_benchmark,
    save_csv,
    shift_domain,
)
from .driver import RunFailedError, run_experiment
from .model import save_checkpoint

log = logging.getLogger("gsde")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

METRIC_COLUMNS = ["experiment_id", "seed", "run", "iteration", "target_accuracy", "per_class_accuracy",
                  "mean_disc_src", "mean_disc_tgt", "expansion_size", "pseudo_accuracy"]
SWEEP_COLUMNS = ["axis", "point", "mean_accuracy", "std_accuracy", "n_seeds", "accuracies"]
PLOT_COLUMNS = ["figure", "series", "run", "seed", "x", "y"]

SWEEP_AXES = {
    "max_runs": [str(n) for n in range(1, 9)],
    "bottlenecks": ["1", "3", "5", "7"],
    "losses": ["AD", "AD+MS", "AD+MS+SS"],
    "scoring": ["none", "LS", "MB", "LS+MB"],
}


class UsageError(Exception):
    pass


@dataclass
class MetricsRow:
    experiment_id: str
    seed: int
    run: int
    iteration: int
    target_accuracy: float
    per_class_accuracy: list
    mean_disc_src: float
    mean_disc_tgt: float
    expansion_size: int
    pseudo_accuracy: float

    def cells(self) -> list[str]:
        d = asdict(self)
        d["per_class_accuracy"] = ";".join(_fmt(v) for v in self.per_class_accuracy)
        return [d[c] if isinstance(d[c], str) else _fmt(d[c]) for c in METRIC_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".10g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "x", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        rows = [dict(zip(header, r)) for r in reader if r]
    return header, rows


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.kind == "two-moons":
        source = gen_two_moons(args.n, args.noise, seed=args.seed, name="source")
        raw_target = gen_two_moons(args.n, args.noise, seed=args.seed + 1, domain=Domain.TARGET, name="target")
    else:
        centers = _parse_centers(args.centers)
        source = gen_blobs(args.n, len(centers), centers, args.spread, seed=args.seed, name="source")
        raw_target = gen_blobs(args.n, len(centers), centers, args.spread, seed=args.seed + 1,
                               domain=Domain.TARGET, name="target")
    translation = None
    if args.shift_tx or args.shift_ty:
        translation = [args.shift_tx, args.shift_ty] + [0.0] * (source.feature_dim - 2)
    target = shift_domain(raw_target, rotation_deg=args.shift_rot, translation=translation,
                          scale=args.shift_scale, noise_sd=args.shift_noise, seed=args.seed + 2)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(source, out / f"{args.prefix}source.csv")
    save_csv(target, out / f"{args.prefix}target.csv")
    print(f"wrote {out / (args.prefix + 'source.csv')} and {out / (args.prefix + 'target.csv')}")
    return EXIT_OK


def _parse_centers(text: str):
    if not text:
        raise UsageError("--centers is required for blobs, e.g. '0,0;3,3'")
    try:
        return [[float(v) for v in c.split(",")] for c in text.split(";")]
    except ValueError:
        raise UsageError(f"cannot parse centers {text!r}") from None


# ---------------------------------------------------------------- run

def load_data(cfg: ExperimentConfig):
    if (cfg.data.source is None) != (cfg.data.target is None):
        raise ConfigError("data.source and data.target must be given together")
    if cfg.data.source is None:
        return reference_benchmark(cfg.data.n, cfg.data.noise, cfg.data.rotation, seed=cfg.data.seed)
    source = load_csv(cfg.data.source)
    target = load_csv(cfg.data.target, num_classes=source.num_classes)
    if np.any(target.labels < 0):
        raise ConfigError("target CSV needs ground-truth labels for evaluation")
    return source, target


def _run_seed(cfg: ExperimentConfig, source, target, seed: int):
    """Worker entry point; returns (seed, records, leaked reads, error)."""
    try:
        res = run_experiment(cfg, source, target, seed, keep_models=True)
        return seed, res.records, res.vault.leaked_reads, None
    except RunFailedError as e:
        return seed, e.records, None, str(e)


def run_seeds(cfg: ExperimentConfig, source, target) -> list:
    workers = max(1, min(len(cfg.seeds), int(os.environ.get("GSDE_THREADS", "1") or 1)))
    if workers == 1:
        return [_run_seed(cfg, source, target, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_seed, cfg, source, target, s) for s in cfg.seeds]
        return [f.result() for f in futures]


def metrics_rows(cfg: ExperimentConfig, seed: int, records) -> tuple[list, list]:
    trace_rows, summary_rows = [], []
    for r in records:
        for tp in r.trace:
            trace_rows.append(MetricsRow(cfg.experiment_id, seed, r.run, tp.iteration, tp.accuracy, tp.per_class,
                                         tp.disc_src, tp.disc_tgt, r.expansion_size, r.pseudo_accuracy))
        last = r.trace[-1] if r.trace else None
        summary_rows.append(MetricsRow(
            cfg.experiment_id, seed, r.run, cfg.iterations_per_run, r.final_accuracy, r.per_class_accuracy,
            last.disc_src if last else float("nan"), last.disc_tgt if last else float("nan"),
            r.expansion_size, r.pseudo_accuracy))
    return trace_rows, summary_rows


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or ())
    if args.source or args.target:
        cfg.data.source, cfg.data.target = args.source, args.target
    source, target = load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("config.txt", "metrics.csv", "summary.csv"):
        if (out / name).exists():
            raise UsageError(f"{out / name} already exists; outputs are never overwritten")
    with open(out / "config.txt", "x", encoding="utf-8") as fh:
        fh.write("\n".join(dump_config(cfg)) + "\n")
    (out / "scores").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    results = run_seeds(cfg, source, target)
    trace, summary, failures = [], [], []
    for seed, records, leaked, error in results:
        t, s = metrics_rows(cfg, seed, records)
        trace += t
        summary += [row for row, rec in zip(s, records) if not rec.failed]
        for r in records:
            if r.scores is not None:
                r.scores.save_csv(out / "scores" / f"seed{seed}_run{r.run}.csv")
            if r.model is not None:
                save_checkpoint(r.model, out / "checkpoints" / f"seed{seed}_run{r.run}.gsde")
        if error:
            failures.append(error)
        elif leaked:
            failures.append(f"seed {seed}: {leaked} target label reads outside evaluation")
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, (r.cells() for r in trace))
    _write_csv(out / "summary.csv", METRIC_COLUMNS, (r.cells() for r in summary))
    for row in summary:
        print(f"seed {row.seed} run {row.run}: target accuracy {row.target_accuracy:.4f} "
              f"(expansion {row.expansion_size})")
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def sweep_config(base: ExperimentConfig, axis: str, point: str) -> ExperimentConfig:
    cfg = copy.deepcopy(base)
    a = cfg.ablation
    if axis == "max_runs":
        cfg.max_runs = int(point)
    elif axis == "bottlenecks":
        cfg.bottlenecks = int(point)
        cfg.max_runs = 1
    elif axis == "losses":
        terms = set(point.split("+"))
        if not terms <= {"AD", "MS", "SS"}:
            raise UsageError(f"unknown loss combination {point!r}")
        a.disable_AD, a.disable_MS, a.disable_SS = ("AD" not in terms, "MS" not in terms, "SS" not in terms)
        cfg.max_runs = 1
    elif axis == "scoring":
        terms = set() if point == "none" else set(point.split("+"))
        if not terms <= {"LS", "MB"}:
            raise UsageError(f"unknown scoring combination {point!r}")
        a.disable_scoring_extras = "LS" not in terms
        cfg.bottlenecks = base.bottlenecks if "MB" in terms else 1
    else:
        raise UsageError(f"unknown sweep axis {axis!r}")
    return cfg.validate()


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set or ())
    source, target = load_data(base)
    points = args.points.split(",") if args.points else SWEEP_AXES[args.axis]
    rows, failed = [], False
    for point in points:
        cfg = sweep_config(base, args.axis, point)
        accs = []
        for seed, records, leaked, error in run_seeds(cfg, source, target):
            if error:
                failed = True
                print(f"error: {error}", file=sys.stderr)
                continue
            accs.append(records[-1].final_accuracy)
        mean = float(np.mean(accs)) if accs else float("nan")
        std = float(np.std(accs)) if accs else float("nan")
        rows.append([args.axis, point, _fmt(mean), _fmt(std), str(len(accs)), ";".join(_fmt(a) for a in accs)])
        print(f"{args.axis}={point}: {mean:.4f} +- {std:.4f} over {len(accs)} seeds")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, SWEEP_COLUMNS, rows)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------- plotdata

_SWEEP_FIGURES = {"max_runs": "fig3a", "bottlenecks": "fig3b", "losses": "tab6", "scoring": "tab7"}


def plot_series(header: list[str], rows: list[dict]) -> list[list]:
    """Long-format figure series from a metrics or sweep file."""
    if header == METRIC_COLUMNS:
        out = []
        final: dict = {}
        for r in rows:
            run, seed, it = int(r["run"]), r["seed"], int(r["iteration"])
            out.append(["fig4", "accuracy", run, seed, it, r["target_accuracy"]])
            out.append(["fig5", "src", run, seed, it, r["mean_disc_src"]])
            out.append(["fig5", "tgt", run, seed, it, r["mean_disc_tgt"]])
            key = (run, seed)
            if key not in final or it >= final[key][0]:
                final[key] = (it, float(r["target_accuracy"]))
        runs = sorted({k[0] for k in final})
        for run in runs:
            accs = [v[1] for k, v in final.items() if k[0] == run]
            out.append(["fig3c", "accuracy", run, "mean", run, _fmt(float(np.mean(accs)))])
        return out
    if header == SWEEP_COLUMNS:
        out = []
        for r in rows:
            fig = _SWEEP_FIGURES.get(r["axis"])
            if fig is None:
                raise UsageError(f"unknown sweep axis {r['axis']!r}")
            out.append([fig, "mean", "", "mean", r["point"], r["mean_accuracy"]])
            out.append([fig, "std", "", "mean", r["point"], r["std_accuracy"]])
        return out
    unknown = sorted(set(header) - set(METRIC_COLUMNS) - set(SWEEP_COLUMNS))
    raise UsageError(f"unrecognised columns {unknown or header}")


def cmd_plotdata(args) -> int:
    rows_out = []
    for path in args.inputs:
        header, rows = _read_csv(path)
        rows_out += plot_series(header, rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, PLOT_COLUMNS, rows_out)
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsde", description="Gradual source domain expansion experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate source/target CSV files")
    g.add_argument("--kind", required=True, choices=["two-moons", "blobs"])
    g.add_argument("--n", required=True, type=int, help="samples per domain")
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--noise", type=float, default=0.15)
    g.add_argument("--centers", default="", help="blobs centers, 'x,y;x,y'")
    g.add_argument("--spread", type=float, default=0.5)
    g.add_argument("--shift-rot", type=float, default=0.0, help="target rotation in degrees")
    g.add_argument("--shift-tx", type=float, default=0.0)
    g.add_argument("--shift-ty", type=float, default=0.0)
    g.add_argument("--shift-scale", type=float, default=1.0)
    g.add_argument("--shift-noise", type=float, default=0.0)
    g.add_argument("--out-dir", default=".")
    g.add_argument("--prefix", default="")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the expansion schedule for every configured seed")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--source")
    r.add_argument("--target")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="ablation sweep aggregated over seeds")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--points", help="comma-separated subset of axis points")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("plotdata", help="reshape metrics or sweep CSVs into tidy figure data")
    d.add_argument("inputs", nargs="+")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, FileExistsError, FileNotFoundError) as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
