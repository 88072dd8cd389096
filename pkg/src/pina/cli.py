"""Command-line front end: ``run``, ``accountant`` and ``compare``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
The default output directory comes from ``$PINA_OUTPUT_DIR`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config, with_overrides
from .privacy import CalibrationError, calibrate_z, default_delta, epsilon_for
from .simulation import RunResult, Simulator, rounds_to_reach

log = logging.getLogger("pina")

ENV_OUTPUT = "PINA_OUTPUT_DIR"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
SUMMARY = "summary.csv"
STAGE1 = "stage1.json"
SUMMARY_FIELDS = ["algorithm", "seed", "C", "z", "epsilon", "rounds", "final_clustering_accuracy",
                  "final_test_accuracy", "rounds_to_0.9", "stage1_sketch_ari", "stage1_clustering_accuracy"]


def default_output_dir() -> Path:
    return Path(os.environ.get(ENV_OUTPUT) or "runs")


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def read_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Load an INI config, or the config embedded in a run manifest (``*.json``)."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
            text = manifest["config"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"not a run manifest: {exc}", str(path), 1) from None
        return parse_config(text, f"{path}#config", overrides)
    return load_config(path, overrides)


def metrics_lines(result: RunResult) -> str:
    return "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in result.series)


def summary_row(cfg: ExperimentConfig, result: RunResult) -> dict:
    last = result.series[-1]
    st = result.stage1
    return {
        "algorithm": cfg.algorithm, "seed": cfg.seed, "C": cfg.C, "z": repr(result.z),
        "epsilon": "" if last.epsilon is None else repr(last.epsilon),
        "rounds": last.round,
        "final_clustering_accuracy": repr(last.clustering_accuracy),
        "final_test_accuracy": "" if last.mean_test_accuracy is None else repr(last.mean_test_accuracy),
        "rounds_to_0.9": "" if (r := rounds_to_reach(result.series, 0.9)) is None else r,
        "stage1_sketch_ari": "" if st is None else repr(st.sketch_ari),
        "stage1_clustering_accuracy": "" if st is None else repr(st.clustering_accuracy),
    }


def _csv_text(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def execute(cfg: ExperimentConfig, out_dir: Path, workers: int = 1) -> RunResult:
    """Run one experiment and write manifest, metrics, summary and (for pina) stage-1 results."""
    out_dir = Path(out_dir)
    start = time.perf_counter()
    result = Simulator(cfg, workers=workers).run()
    _write_atomic(out_dir / METRICS, metrics_lines(result))
    _write_atomic(out_dir / SUMMARY, _csv_text([summary_row(cfg, result)], SUMMARY_FIELDS))
    outputs = {"metrics": METRICS, "summary": SUMMARY}
    if result.stage1 is not None:
        st = result.stage1
        payload = dict(st.summary(), centroids=st.protos.centroids.tolist(),
                       assignment={str(k): v for k, v in sorted(st.protos.assignment.items())})
        _write_atomic(out_dir / STAGE1, json.dumps(payload, sort_keys=True, indent=1) + "\n")
        outputs["stage1"] = STAGE1
    manifest = {
        "config": dump_config(cfg), "seed": cfg.seed, "version": __version__, "outputs": outputs,
        "z": result.z, "duration_s": round(time.perf_counter() - start, 3),
    }
    _write_atomic(out_dir / MANIFEST, json.dumps(manifest, indent=1) + "\n")
    return result


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = read_config(args.config, _parse_overrides(args.set))
    out = Path(args.out) if args.out else default_output_dir() / f"{cfg.algorithm}-seed{cfg.seed}"
    result = execute(cfg, out, workers=args.workers)
    last = result.series[-1]
    print(f"{cfg.algorithm} seed={cfg.seed} z={result.z:.4f} rounds={last.round} "
          f"clustering={last.clustering_accuracy:.3f} -> {out}")
    return EXIT_OK


def cmd_accountant(args) -> int:
    if (args.eps is None) == (args.z is None):
        print("error: give exactly one of --eps or --z", file=sys.stderr)
        return EXIT_CONFIG
    delta = args.delta if args.delta is not None else default_delta(args.clients)
    if not 0 < delta < 1 or not 0 < args.q <= 1 or args.rounds < 0 or args.stage1 < 0:
        print("error: need 0 < delta < 1, 0 < q <= 1 and non-negative counts", file=sys.stderr)
        return EXIT_CONFIG
    record = {"delta": delta, "q": args.q, "rounds": args.rounds, "stage1_participations": args.stage1}
    if args.eps is not None:
        try:
            z = calibrate_z(args.eps, delta, args.q, args.rounds, stage1_participations=args.stage1)
        except CalibrationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        record.update(epsilon=args.eps, z=z, epsilon_spent=epsilon_for(z, delta, args.q, args.rounds, args.stage1))
        text = f"z = {z:.6g} spends epsilon = {record['epsilon_spent']:.6g} (target {args.eps:g}, delta = {delta:.4g})"
    else:
        eps = epsilon_for(args.z, delta, args.q, args.rounds, args.stage1)
        record.update(z=args.z, epsilon=eps)
        text = f"epsilon = {eps:.6g} at z = {args.z:g} (delta = {delta:.4g})"
    print(json.dumps(record, sort_keys=True) if args.json else text)
    return EXIT_OK


def _compare_child(job):
    text, path, algorithm, seed, out, workers = job
    cfg = with_overrides(parse_config(text, path), algorithm=algorithm, seed=seed)
    execute(cfg, Path(out), workers=workers)
    return algorithm, seed


def merge_runs(runs: dict[tuple[str, int], list[dict]]) -> list[dict]:
    """Per (algorithm, round) mean and population std of accuracies across seeds."""
    rows = []
    algorithms = list(dict.fromkeys(a for a, _ in runs))
    for algo in algorithms:
        series = [recs for (a, _), recs in sorted(runs.items()) if a == algo]
        for i in range(min(len(s) for s in series)):
            row = {"algorithm": algo, "round": series[0][i]["round"], "n_seeds": len(series)}
            for key, name in (("clustering_accuracy", "clustering_accuracy"), ("mean_test_accuracy", "test_accuracy")):
                vals = [s[i][key] for s in series if s[i][key] is not None]
                row[f"{name}_mean"] = repr(statistics.fmean(vals)) if vals else ""
                row[f"{name}_std"] = repr(statistics.pstdev(vals)) if vals else ""
            rows.append(row)
    return rows


COMPARE_FIELDS = ["algorithm", "round", "n_seeds", "clustering_accuracy_mean", "clustering_accuracy_std",
                  "test_accuracy_mean", "test_accuracy_std"]


def cmd_compare(args) -> int:
    overrides = _parse_overrides(args.set)
    base = read_config(args.config, overrides)
    text = dump_config(base)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not algorithms or not seeds:
        raise ConfigError("need at least one algorithm and one seed")
    for a in algorithms:
        with_overrides(base, algorithm=a)  # validates the name before any work starts
    root = Path(args.out) if args.out else default_output_dir() / "compare"
    jobs = [(text, str(args.config), a, s, str(root / f"{a}-seed{s}"), args.workers)
            for a in algorithms for s in seeds]
    failed = []
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            futures = [(job, pool.submit(_compare_child, job)) for job in jobs]
            for job, fut in futures:
                try:
                    fut.result()
                except Exception as exc:  # keep going; partial outputs stay on disk
                    failed.append((job[2], job[3], exc))
    else:
        for job in jobs:
            try:
                _compare_child(job)
            except Exception as exc:
                failed.append((job[2], job[3], exc))
    runs = {}
    for _, _, a, s, out, _ in jobs:
        path = Path(out) / METRICS
        if path.exists():
            runs[(a, s)] = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    if runs:
        _write_atomic(root / "compare.csv", _csv_text(merge_runs(runs), COMPARE_FIELDS))
    for a, s, exc in failed:
        print(f"error: {a} seed={s} failed: {exc}", file=sys.stderr)
    if failed:
        return EXIT_RUNTIME
    print(f"compared {', '.join(algorithms)} over seeds {seeds} -> {root / 'compare.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pina", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="INI config file or a previous run's manifest.json")
    r.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override a config field")
    r.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT}/<algorithm>-seed<seed>)")
    r.add_argument("--workers", type=int, default=1, help="client-level threads (results do not depend on it)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("accountant", help="calibrate z from epsilon or report epsilon for z")
    a.add_argument("--eps", type=float)
    a.add_argument("--z", type=float)
    a.add_argument("--delta", type=float, help="default 1/clients^1.1")
    a.add_argument("--clients", type=int, default=200)
    a.add_argument("--q", type=float, default=0.1)
    a.add_argument("--rounds", type=int, default=30, help="subsampled stage-2 rounds")
    a.add_argument("--stage1", type=int, default=1, help="full-rate stage-1 releases per client")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_accountant)

    c = sub.add_parser("compare", help="run algorithms over seeds and merge per-round curves")
    c.add_argument("config")
    c.add_argument("--algorithms", default="pina,pina-random-init")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE")
    c.add_argument("--out")
    c.add_argument("--jobs", type=int, default=1, help="parallel processes")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
