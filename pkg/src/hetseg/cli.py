"""``hetseg`` command line: generate | train | eval | benchmark | ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from hetseg.config import SEED_STRIDE, ConfigError, ExperimentConfig, load_config
from hetseg.evaluation import (
    EvalError,
    MetricsRecord,
    aggregate_seeds,
    append_metrics_row,
    column_names,
    evaluate,
    paired_permutation_test,
    write_summary,
)
from hetseg.labelspace import LabelError
from hetseg.netcore import NetError
from hetseg.phantom import (
    Dataset,
    DatasetError,
    PlacementError,
    class_pixel_fractions,
    generate_database,
    load_dataset,
    save_dataset,
)
from hetseg.trainer import (
    ABLATION_COLUMNS,
    METHODS,
    TrainConfig,
    TrainedModel,
    TrainingError,
    ablation_runs,
    load_model,
    run_ablation,
    run_method,
    save_model,
)

log = logging.getLogger("hetseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DB_DIRS = ("db1_train", "db1_test", "db2_train")
TABLE_NAMES = {"sl1": "SL1", "sl12": "SL12", "ace": "ACE", "pl": "PL", "mt": "MT",
               "ace_pl": "ACE/PL", "ace_mt": "ACE/MT"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with status 1
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("HETSEG_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


# -- data ----------------------------------------------------------------------

def generate_all(cfg: ExperimentConfig, out: Path) -> dict[str, Dataset]:
    space = cfg.space()
    base = cfg.phantom.seed
    dbs = cfg.databases
    plan = {
        "db1_train": (base, cfg.db1_protocol(), dbs.db1_train, "train", dbs.db1_intensity_shift),
        "db1_test": (base + SEED_STRIDE, cfg.db1_protocol(), dbs.db1_test, "test",
                     dbs.db1_intensity_shift),
        "db2_train": (base + 2 * SEED_STRIDE, cfg.db2_protocol(), dbs.db2_train, "train",
                      dbs.db2_intensity_shift),
    }
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for name, (seed, proto, n, split, shift) in plan.items():
        ds = generate_database(seed, cfg.phantom.build(shift), proto, n, split, space)
        save_dataset(ds, out / name)
        result[name] = ds
    (out / "fingerprint.txt").write_text(cfg.fingerprint() + "\n", encoding="utf-8")
    return result


def load_all(data: Path, need_db2: bool = True) -> dict[str, Dataset]:
    if not data.is_dir():
        raise UsageError(f"data directory {data} does not exist")
    out = {}
    for name in DB_DIRS:
        if (data / name).is_dir():
            out[name] = load_dataset(data / name)
    if "db1_train" not in out:
        raise UsageError(f"{data} has no db1_train dataset")
    if need_db2 and "db2_train" not in out:
        raise UsageError(f"{data} has no db2_train dataset")
    return out


def ensure_data(cfg: ExperimentConfig, data: Path) -> dict[str, Dataset]:
    stamp = data / "fingerprint.txt"
    if stamp.exists() and stamp.read_text(encoding="utf-8").strip() == cfg.fingerprint():
        return load_all(data)
    log.info("generating datasets in %s", data)
    return generate_all(cfg, data)


def pixel_report(datasets: dict[str, Dataset]) -> str:
    lines = []
    for name, ds in datasets.items():
        frac = class_pixel_fractions(ds)
        names = ("background",) + ds.space.class_names
        cells = " ".join(f"{n}={100 * f:.2f}%" for n, f in zip(names, frac))
        lines.append(f"{name} (n={len(ds)}, annotated={sorted(ds.protocol.annotated)}): {cells}")
    return "\n".join(lines)


# -- training runs ---------------------------------------------------------------

def _run_key(tc: TrainConfig, data_fingerprint: str) -> str:
    resolved = asdict(replace(tc, dropout=tc.dropout_profile))
    blob = json.dumps({"train": resolved, "data": data_fingerprint}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _run_dir(root: Path, tc: TrainConfig) -> Path:
    default = replace(tc, dropout=None).dropout_profile
    suffix = "" if tc.dropout_profile == default else f"_{tc.dropout_profile}"
    return root / f"{tc.method}{suffix}_s{tc.seed}"


def train_or_load(tc: TrainConfig, datasets: dict[str, Dataset], root: Path, fingerprint: str,
                  initial: TrainedModel | None = None) -> TrainedModel:
    """Train one run or reuse a finished checkpoint with the same configuration."""
    run = _run_dir(root, tc)
    key = _run_key(tc, fingerprint)
    manifest = run / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text(encoding="utf-8"))["meta"]
        if meta.get("run_key") == key:
            log.info("reusing %s", run)
            return load_model(run)
    log.info("training %s seed %d (dropout %s)", tc.method, tc.seed, tc.dropout_profile)
    db2 = None if tc.method == "sl1" else datasets["db2_train"]
    model = run_method(tc.method, datasets["db1_train"], db2, tc, initial=initial)
    save_model(model, run, {"run_key": key})
    return model


def _job(args) -> None:
    tc, data, root, fingerprint, initial_dir = args
    _setup_logging()
    datasets = load_all(data)
    initial = load_model(initial_dir) if initial_dir is not None else None
    train_or_load(tc, datasets, root, fingerprint, initial)


def _run_jobs(jobs: list, n_jobs: int) -> None:
    if n_jobs <= 1 or len(jobs) <= 1:
        for job in jobs:
            _job(job)
        return
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        for _ in pool.map(_job, jobs):
            pass


def train_matrix(cfg: ExperimentConfig, methods, data: Path, root: Path, n_jobs: int = 1,
                 train_changes: dict | None = None) -> dict[tuple[str, int], TrainConfig]:
    """Train ``methods`` x seeds; pseudo-label methods run after their labelling models."""
    fingerprint = cfg.fingerprint()
    changes = train_changes or {}
    configs = {(m, s): cfg.train_config(m, s, **changes.get(m, {}))
               for s in cfg.seeds for m in methods}
    first = [k for k in configs if k[0] not in ("pl", "ace_pl")]
    base_of = {"pl": "sl1", "ace_pl": "ace"}
    # labelling models for pseudo-label methods are ordinary runs of the base method
    for (m, s) in list(configs):
        if m in base_of and (base_of[m], s) not in configs:
            configs[(base_of[m], s)] = cfg.train_config(base_of[m], s)
            first.append((base_of[m], s))
    _run_jobs([(configs[k], data, root, fingerprint, None) for k in first], n_jobs)
    second = [(configs[k], data, root, fingerprint, _run_dir(root, configs[(base_of[k[0]], k[1])]))
              for k in configs if k[0] in base_of]
    _run_jobs(second, n_jobs)
    return configs


# -- reports ---------------------------------------------------------------------

def _pts(x: float) -> str:
    return f"{100 * x:.2f}"


def benchmark_predicates(means: dict[str, dict[str, float]]) -> list[tuple[str, bool, str]]:
    """Qualitative orderings on seed-averaged group means (fractions)."""
    ov = {m: v["mean_overlap"] for m, v in means.items()}
    no = {m: v["mean_nonoverlap"] for m, v in means.items()}
    tot = {m: v["mean_total"] for m, v in means.items()}
    checks = []

    def add(name, ok, detail):
        checks.append((name, bool(ok), detail))

    add("SL12 overlapping > SL1 overlapping", ov["sl12"] > ov["sl1"],
        f"{_pts(ov['sl12'])} vs {_pts(ov['sl1'])}")
    add("SL12 non-overlap < SL1 non-overlap by >= 1.0", no["sl12"] <= no["sl1"] - 0.01,
        f"{_pts(no['sl12'])} vs {_pts(no['sl1'])}")
    add("ACE non-overlap >= SL12 non-overlap + 1.0", no["ace"] >= no["sl12"] + 0.01,
        f"{_pts(no['ace'])} vs {_pts(no['sl12'])}")
    add("|ACE non-overlap - SL1 non-overlap| <= 2.0", abs(no["ace"] - no["sl1"]) <= 0.02,
        f"{_pts(no['ace'])} vs {_pts(no['sl1'])}")
    add("ACE/MT total >= ACE total", tot["ace_mt"] >= tot["ace"],
        f"{_pts(tot['ace_mt'])} vs {_pts(tot['ace'])}")
    add("MT total > SL1 total", tot["mt"] > tot["sl1"], f"{_pts(tot['mt'])} vs {_pts(tot['sl1'])}")
    return checks


def ablation_predicates(means: dict[str, dict[str, float]]) -> list[tuple[str, bool | None, str]]:
    tot = {c: v["mean_total"] for c, v in means.items()}
    return [
        ("|MT_t - MT_s| total <= 1.0", abs(tot["MT_t"] - tot["MT_s"]) <= 0.01,
         f"{_pts(tot['MT_t'])} vs {_pts(tot['MT_s'])}"),
        ("MT_s+ total >= MT_s total", tot["MT_s+"] >= tot["MT_s"],
         f"{_pts(tot['MT_s+'])} vs {_pts(tot['MT_s'])}"),
        ("ACE+ total vs ACE total (reported only)", None,
         f"{_pts(tot['ACE+'])} vs {_pts(tot['ACE'])}"),
    ]


def format_report(title: str, checks) -> str:
    lines = [title]
    for name, ok, detail in checks:
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        lines.append(f"{status}  {name}  ({detail})")
    return "\n".join(lines) + "\n"


def _means_dict(space, summary) -> dict[str, float]:
    return dict(zip(column_names(space), map(float, summary.mean)))


def run_benchmark(cfg: ExperimentConfig, out: Path, n_jobs: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    datasets = ensure_data(cfg, data)
    runs = out / "runs"
    train_matrix(cfg, METHODS, data, runs, n_jobs)
    space, test = cfg.space(), datasets["db1_test"]

    metrics_path = out / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    records: dict[str, list[MetricsRecord]] = {m: [] for m in METHODS}
    for method in METHODS:
        for seed in cfg.seeds:
            model = load_model(_run_dir(runs, cfg.train_config(method, seed)))
            rec = evaluate(model.params, test, space, model.net, seed)
            records[method].append(rec)
            append_metrics_row(metrics_path, method, seed, "student", rec)

    summaries = {m: aggregate_seeds(records[m]) for m in METHODS}
    p_values = {m: (None if m == "sl1" else paired_permutation_test(
        summaries[m].case_means, summaries["sl1"].case_means, seed=0)) for m in METHODS}
    write_summary(out / "summary.csv", space, summaries, p_values)
    means = {m: _means_dict(space, summaries[m]) for m in METHODS}
    checks = benchmark_predicates(means)
    report = format_report("benchmark orderings (seed-averaged, Dice points)", checks)
    report += "\n" + format_table({TABLE_NAMES[m]: means[m] for m in METHODS}, space,
                                  {TABLE_NAMES[m]: p_values[m] for m in METHODS})
    (out / "report.txt").write_text(report, encoding="utf-8")
    return {"means": means, "checks": checks, "p_values": p_values}


def format_table(columns: dict[str, dict[str, float]], space, p_values=None) -> str:
    rows = [(n, f"dice_c{i}") for i, n in enumerate(space.class_names, start=1)]
    rows += [("Overlapping", "mean_overlap"), ("Non-Overlap.", "mean_nonoverlap"),
             ("Total Mean", "mean_total")]
    names = list(columns)
    lines = ["Class".ljust(14) + "".join(n.rjust(10) for n in names)]
    for label, key in rows:
        cells = []
        for n in names:
            star = "*" if p_values and key.startswith("mean") and p_values.get(n) is not None \
                and p_values[n] < 0.05 else " "
            cells.append((_pts(columns[n][key]) + star).rjust(10))
        lines.append(label.ljust(14) + "".join(cells))
    if p_values:
        lines.append("* paired sign-flip permutation test vs SL1 on per-case mean Dice, p < 0.05")
    return "\n".join(lines) + "\n"


def run_ablation_matrix(cfg: ExperimentConfig, out: Path, n_jobs: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    datasets = ensure_data(cfg, data)
    runs = out / "runs"
    fingerprint = cfg.fingerprint()
    space, test = cfg.space(), datasets["db1_test"]
    # per-method overrides still apply; runs equal to a benchmark run share its directory
    plans = {s: {k: cfg.train_config(k[0], s, dropout=k[1])
                 for k in ablation_runs(cfg.train_config("mt", s))} for s in cfg.seeds}
    jobs = [(tc, data, runs, fingerprint, None) for p in plans.values() for tc in p.values()]
    _run_jobs(jobs, n_jobs)

    records: dict[str, list[MetricsRecord]] = {c: [] for c in ABLATION_COLUMNS}
    for seed, plan in plans.items():
        trained = {k: load_model(_run_dir(runs, tc)) for k, tc in plan.items()}
        table = run_ablation([datasets["db1_train"], datasets["db2_train"]], test,
                             cfg.train_config("mt", seed), trained)
        for col in ABLATION_COLUMNS:
            records[col].append(table[col])
    means = {c: _means_dict(space, aggregate_seeds(records[c])) for c in ABLATION_COLUMNS}
    write_ablation_csv(out / "ablation.csv", space, means)
    checks = ablation_predicates(means)
    report = format_report("ablation (seed-averaged, Dice points)", checks)
    report += "\n" + format_table(means, space)
    (out / "ablation_report.txt").write_text(report, encoding="utf-8")
    return {"means": means, "checks": checks}


def write_ablation_csv(path: Path, space, means: dict[str, dict[str, float]]) -> None:
    keys = column_names(space)
    labels = list(space.class_names) + ["Overlapping", "Non-Overlap.", "Total Mean"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(("class",) + ABLATION_COLUMNS) + "\n")
        for label, key in zip(labels, keys):
            fh.write(",".join([label] + [f"{means[c][key]:.6f}" for c in ABLATION_COLUMNS]) + "\n")


# -- commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    try:
        datasets = generate_all(cfg, out)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    print(pixel_report(datasets))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    method = args.method
    tc = cfg.train_config(method, args.seed)
    datasets = load_all(Path(args.data), need_db2=method != "sl1")
    space = cfg.space()
    if datasets["db1_train"].space != space:
        raise UsageError("datasets were generated with a different label space than the config")
    db2 = None if method == "sl1" else datasets["db2_train"]
    model = run_method(method, datasets["db1_train"], db2, tc)
    save_model(model, Path(args.out))
    print(f"wrote {args.out} ({model.steps} steps, teacher={'yes' if model.teacher else 'no'})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(Path(args.checkpoint))
    test = load_dataset(Path(args.data))
    if model.net.num_classes != test.space.num_classes:
        raise UsageError(f"checkpoint predicts {model.net.num_classes} classes, "
                         f"test set has {test.space.num_classes}")
    try:
        params = model.prediction_params(args.source)
    except TrainingError as exc:
        raise UsageError(str(exc)) from exc
    rec = evaluate(params, test, test.space, model.net, model.config.seed)
    append_metrics_row(Path(args.out), model.config.method, model.config.seed, args.source, rec)
    print(" ".join(f"{k}={_pts(v)}" for k, v in zip(column_names(test.space), rec.row())))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    run_benchmark(cfg, out, args.jobs)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    run_ablation_matrix(cfg, out, args.jobs)
    print((out / "ablation_report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write the three phantom databases")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one method for one seed")
    t.add_argument("--config")
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", required=True, help="directory written by 'generate'")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dice of a checkpoint on a test database")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="test dataset directory")
    e.add_argument("--out", required=True, help="metrics CSV to append to")
    e.add_argument("--source", choices=("student", "teacher"), default="student")
    e.set_defaults(func=cmd_eval)

    for name, func, text in (("benchmark", cmd_benchmark, "all methods x seeds"),
                             ("ablate", cmd_ablate, "mean-teacher ablation")):
        b = sub.add_parser(name, help=text)
        b.add_argument("--config")
        b.add_argument("--out")
        b.add_argument("--jobs", type=int, default=1)
        b.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"hetseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PlacementError, NetError, TrainingError, EvalError, LabelError,
            OSError, ValueError) as exc:
        print(f"hetseg: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
