"""``ecgforge`` command line: fetch, prepare, pretrain, train, transfer, eval, qrs-predict, hpo, report.

Settings resolve as command-line flags, then a JSON ``--config`` file, then
built-in defaults. Every command writes its resolved settings next to its
outputs and holds a lock file on the output directory while it runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import dataset as D
from . import hpo, metrics, synthetic, training, wfdb
from .model import load_network

DEFAULTS = {
    "cache_dir": None,
    "base_url": None,
    "records": ",".join(wfdb.DEFAULT_RECORDS),
    "source": "mitdb",
    "synthetic_records": 6,
    "synthetic_seconds": 60.0,
    "seed": 0,
    "n_ds0": 99990,
    "classes": None,
    "per_class": None,
    "output_dir": "out",
    "data_dir": None,
    "epochs": None,
    "batch_size": 50,
    "lr": 1e-3,
    "reps": 24,
    "protocol": "cnet",
    "dtype": "float32",
    "mask_policy": "beat_centered",
    "static_masks": False,
    "freeze_trunk": False,
    "pretrain_epochs": 100,
    "ds0_fraction": 1.0,
    "eta": 2,
    "grace": 5,
    "max_budget": 40,
    "workers": 1,
    "resume": None,
    "hpo_pretrain_epochs": 2,
    "max_trials": None,
    "checkpoint": None,
    "repetition": 0,
    "groups": "N,P,X,M",
    "counts": "10000,2281,10000,10000",
    "bin_width": 0.01,
    "suite": None,
}

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CliError(RuntimeError):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- settings


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read {args.config}: {exc}") from None
        unknown = set(file_settings) - set(DEFAULTS)
        if unknown:
            raise CliError("config", f"unknown keys in {args.config}: {sorted(unknown)}")
        settings.update(file_settings)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    return settings


def snapshot(settings: dict, directory: Path, name: str = "config.json") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")


@contextmanager
def locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".ecgforge.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError("lock", f"{directory} is in use by another run ({lock} exists)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------- data


def record_names(settings: dict) -> list[str]:
    names = settings["records"]
    if names == "all":
        return list(wfdb.ALL_RECORDS)
    return [n.strip() for n in names.split(",") if n.strip()] if isinstance(names, str) else list(names)


def load_sources(settings: dict) -> list[D.Source]:
    """Records from the cache (read only) or the synthetic generator."""
    if settings["source"] == "synthetic":
        records = synthetic.synthetic_database(settings["synthetic_records"], settings["synthetic_seconds"],
                                               settings["seed"])
    else:
        cache = Path(settings["cache_dir"]) if settings["cache_dir"] else wfdb.default_cache_dir()
        missing = [n for n in record_names(settings) if not (cache / n / f"{n}.hea").exists()]
        if missing:
            raise CliError("data", f"records not in cache {cache}: {missing}; run `ecgforge fetch` first")
        records = [wfdb.read_record(cache / n, n) for n in record_names(settings)]
    return D.sources_from_records(records)


def class_table(settings: dict) -> D.ClassTable:
    table = D.load_class_table(settings["classes"])
    if settings["per_class"]:
        counts = tuple(int(v) for v in str(settings["per_class"]).split(","))
        table = table.scaled(counts)
    return table


def data_settings(settings: dict) -> dict:
    """Settings of the ``prepare`` run that produced ``data_dir`` (source, seed, classes)."""
    data_dir = Path(settings["data_dir"] or settings["output_dir"])
    path = data_dir / "config.json"
    if not path.exists():
        raise CliError("data", f"{data_dir} has no prepared dataset; run `ecgforge prepare` first")
    prepared = json.loads(path.read_text())
    keys = ("source", "synthetic_records", "synthetic_seconds", "records", "cache_dir", "classes", "per_class")
    return {**settings, **{k: prepared[k] for k in keys}, "data_seed": prepared["seed"]}


def load_prepared(settings: dict):
    s = data_settings(settings)
    sources = load_sources({**s, "seed": s["data_seed"]})
    data_dir = Path(settings["data_dir"] or settings["output_dir"]) / "manifests"
    ds0 = D.segments_from_rows(D.read_manifest(data_dir / "ds0.jsonl"), sources)
    bundle = D.bundle_from_rows(D.read_manifest(data_dir / "classification.jsonl"), sources, class_table(s))
    return sources, ds0, bundle


def subsample(items: list, fraction: float, seed: int) -> list:
    if fraction >= 1:
        return items
    keep, _ = D.split_fraction(items, 1 - fraction, seed)
    return keep


# ---------------------------------------------------------------- commands


def cmd_fetch(settings: dict) -> dict:
    cache = Path(settings["cache_dir"]) if settings["cache_dir"] else wfdb.default_cache_dir()
    done = {}
    for name in record_names(settings):
        paths = wfdb.fetch_record(name, cache, settings["base_url"])
        done[name] = str(paths[".hea"].parent)
    print(f"{len(done)} records in {cache}")
    return done


def cmd_prepare(settings: dict) -> dict:
    out = Path(settings["output_dir"])
    sources = load_sources(settings)
    rng = np.random.default_rng(settings["seed"])
    n_ds0 = settings["n_ds0"]
    ds0 = D.build_ds0(sources, n_ds0 - n_ds0 % len(sources), rng)
    bundle = D.build_ds1_ds2(sources, class_table(settings), rng)
    D.write_manifest(out / "manifests" / "ds0.jsonl", D.manifest_rows("ds0", ds0))
    D.write_manifest(out / "manifests" / "classification.jsonl", D.bundle_rows(bundle))
    snapshot(settings, out)
    summary = {"subjects": len(sources), "ds0": len(ds0), "classification_pool": len(bundle.pool),
               "repetitions": len(bundle.splits)}
    print(json.dumps(summary))
    return summary


def train_config(settings: dict, task: str, epochs_default: int) -> training.TrainConfig:
    return training.TrainConfig(
        task=task, epochs=settings["epochs"] if settings["epochs"] is not None else epochs_default,
        batch_size=settings["batch_size"], learning_rate=settings["lr"], seed=settings["seed"],
        dtype=settings["dtype"], mask_policy=settings["mask_policy"], static_masks=settings["static_masks"],
        freeze_trunk=settings["freeze_trunk"],
    )


def run_suite(settings: dict, protocol: str) -> dict:
    out = Path(settings["output_dir"])
    _, ds0, bundle = load_prepared(settings)
    ds0 = subsample(ds0, settings["ds0_fraction"], settings["seed"])
    reps = min(settings["reps"], len(bundle.splits))
    kwargs = {"bundle": bundle, "ds0": ds0}
    if protocol == "cnet":
        kwargs["train_config"] = train_config(settings, "classification", 1000)
    elif protocol == "rcnet":
        kwargs["train_config"] = train_config(settings, "classification", 1000)
        kwargs["pretrain_config"] = train_config({**settings, "epochs": settings["pretrain_epochs"]}, "regression", 100)
    else:
        kwargs["train_config"] = train_config(settings, "regression", 100)
        sources = load_sources({**data_settings(settings), "seed": data_settings(settings)["data_seed"]})
        kwargs["qrs"] = D.build_qrs_testset(sources, qrs_counts(settings), settings["seed"])
    suite = settings["suite"] or protocol
    snapshot(settings, out / "runs" / suite)
    _, agg = training.run_experiment_suite(protocol, reps, settings["seed"], out / "runs", suite, **kwargs)
    print(json.dumps({k: v for k, v in agg.items() if k != "confusion"}, sort_keys=True))
    if agg.get("failed"):
        raise CliError("training", f"repetitions {agg['failed']} failed; see their metrics.json")
    return agg


def cmd_eval(settings: dict) -> dict:
    if not settings["checkpoint"]:
        raise CliError("usage", "eval needs --checkpoint")
    out = Path(settings["output_dir"])
    _, _, bundle = load_prepared(settings)
    network = load_network(settings["checkpoint"])
    report = training.evaluate_classifier(network, bundle.split("test", settings["repetition"]))
    (out / "eval").mkdir(parents=True, exist_ok=True)
    (out / "eval" / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    metrics.write_confusion_csv(out / "eval" / "confusion.csv", np.array(report["confusion"]),
                                [c.key for c in bundle.table.classes])
    snapshot(settings, out / "eval")
    print(json.dumps({k: report[k] for k in ("overall_accuracy", "balanced_accuracy", "kappa")}))
    return report


VARIANTS = ("raw", "scaled", "shifted", "scaled_shifted")


def qrs_counts(settings: dict) -> dict[str, int]:
    groups = [g.strip() for g in settings["groups"].split(",")]
    counts = [int(c) for c in str(settings["counts"]).split(",")]
    if len(counts) == 1:
        counts = counts * len(groups)
    if len(counts) != len(groups) or not set(groups) <= {"N", "P", "X", "M"}:
        raise CliError("usage", "--groups must be a subset of N,P,X,M with one count or one count per group")
    return dict(zip(groups, counts))


def cmd_qrs_predict(settings: dict) -> dict:
    if not settings["checkpoint"]:
        raise CliError("usage", "qrs-predict needs --checkpoint")
    out = Path(settings["output_dir"]) / "qrs"
    counts = qrs_counts(settings)
    groups = list(counts)
    s = data_settings(settings)
    sources = load_sources({**s, "seed": s["data_seed"]})
    testset = D.build_qrs_testset(sources, counts, settings["seed"])
    network = load_network(settings["checkpoint"])
    result = training.evaluate_qrs(network, testset)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["group", "record_name", "start_sample", "mask_start", *VARIANTS],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(result["rows"])
    for group in groups:
        rows = [r for r in result["rows"] if r["group"] == group]
        write_group_histogram(out / f"histogram_{group}.csv", rows, settings["bin_width"])
    summary = {"groups": result["summary"], "shortfall": testset.shortfall}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    snapshot(settings, out)
    print(json.dumps(summary["groups"], sort_keys=True))
    return summary


def write_group_histogram(path: Path, rows: list[dict], bin_width: float) -> None:
    """One row per bin, one count column per NRMSE variant."""
    hists = {}
    for v in VARIANTS:
        if rows:
            hists[v] = metrics.error_histogram([r[v] for r in rows], bin_width)[1]
        else:
            hists[v] = np.zeros(0, dtype=np.int64)
    n_bins = max((h.size for h in hists.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", *VARIANTS])
        for b in range(n_bins):
            w.writerow([f"{b * bin_width:.6g}", f"{(b + 1) * bin_width:.6g}",
                        *(int(hists[v][b]) if b < hists[v].size else 0 for v in VARIANTS)])


def cmd_hpo(settings: dict) -> list:
    out = Path(settings["output_dir"]) / "hpo"
    _, ds0, bundle = load_prepared(settings)
    ds0 = subsample(ds0, settings["ds0_fraction"], settings["seed"])
    ds0_train, ds0_val = D.split_fraction(ds0, 0.1, settings["seed"])
    configs = hpo.enumerate_grid()
    if settings["max_trials"]:
        order = np.random.default_rng(settings["seed"]).permutation(len(configs))[: settings["max_trials"]]
        configs = [configs[i] for i in sorted(order)]
    if settings["workers"] != 1:
        print("note: trials run one at a time; --workers only affects simulations", file=sys.stderr)
    evaluate = hpo.make_training_evaluator(ds0_train, ds0_val, bundle.split("train", 0), bundle.split("val", 0),
                                           out / "trials", settings["hpo_pretrain_epochs"], settings["seed"],
                                           settings["dtype"])
    ledger = Path(settings["resume"]) if settings["resume"] else out / "ledger.jsonl"
    snapshot(settings, out)
    ranked = hpo.run_search(evaluate, configs, ledger, settings["eta"], settings["grace"],
                            settings["max_budget"], resume=bool(settings["resume"]))
    (out / "ranking.json").write_text(json.dumps(ranked, indent=2, sort_keys=True, default=str))
    if ranked:
        print(json.dumps(ranked[0], sort_keys=True, default=str))
    return ranked


def cmd_report(settings: dict) -> list[dict]:
    runs = Path(settings["output_dir"]) / "runs"
    suites = [settings["suite"]] if settings["suite"] else sorted(p.name for p in runs.iterdir() if p.is_dir())
    table = []
    for suite in suites:
        agg_path = runs / suite / "aggregate.json"
        if not agg_path.exists():
            raise CliError("data", f"suite {suite} has no aggregate.json")
        agg = json.loads(agg_path.read_text())
        row = {"suite": suite, "runs": agg["n_runs"]}
        if "overall_accuracy" in agg:
            for key, label in (("overall_accuracy", "ov acc"), ("balanced_accuracy", "bal acc"),
                               ("kappa", "kappa")):
                m, sd = agg[key]["mean"], agg[key]["std"]
                row[label] = f"{m:.4f} ± {sd:.4f}" if key == "kappa" else f"{m:.2f} ± {sd:.2f}"
            if "confusion" in agg:
                names = [c.key for c in D.load_class_table().classes]
                metrics.write_confusion_csv(runs / suite / "confusion_sum.csv", np.array(agg["confusion"]), names)
        else:
            for key, v in agg.items():
                if isinstance(v, dict) and "mean" in v:
                    row[key] = f"{v['mean']:.4f} ± {v['std']:.4f}"
        table.append(row)
    columns = list(dict.fromkeys(k for r in table for k in r))
    out = Path(settings["output_dir"]) / "report.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    print(" | ".join(columns))
    for r in table:
        print(" | ".join(str(r.get(c, "")) for c in columns))
    return table


COMMANDS = {
    "fetch": cmd_fetch,
    "prepare": cmd_prepare,
    "pretrain": lambda s: run_suite({**s, "reps": s["reps"] if s["reps"] != DEFAULTS["reps"] else 1}, "regression"),
    "train": lambda s: run_suite(s, s["protocol"]),
    "transfer": lambda s: run_suite(s, "rcnet"),
    "eval": cmd_eval,
    "qrs-predict": cmd_qrs_predict,
    "hpo": cmd_hpo,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of settings (flags override it)")
        p.add_argument("--output-dir", help="where outputs go (default: out)")
        p.add_argument("--cache-dir", help="raw record cache (default: $ECGFORGE_CACHE or ~/.cache/ecgforge)")
        p.add_argument("--seed", type=int)
        return p

    def data(p):
        p.add_argument("--source", choices=["mitdb", "synthetic"])
        p.add_argument("--records", help="comma-separated record names, or 'all' for all 48")
        p.add_argument("--synthetic-records", type=int)
        p.add_argument("--synthetic-seconds", type=float)
        return p

    def prepared(p):
        p.add_argument("--data-dir", help="output dir of `prepare` (default: --output-dir)")
        return p

    def train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--reps", type=int)
        p.add_argument("--dtype", choices=["float32", "float64"])
        p.add_argument("--mask-policy", choices=["beat_centered", "uniform"])
        p.add_argument("--static-masks", action="store_const", const=True)
        p.add_argument("--freeze-trunk", action="store_const", const=True)
        p.add_argument("--ds0-fraction", type=float, help="use this fraction of DS0")
        p.add_argument("--suite", help="name of runs/<suite>/ (default: the protocol)")
        return p

    p = common(sub.add_parser("fetch", help="download records into the cache"))
    p.add_argument("--records", help="comma-separated record names, or 'all' for all 48")
    p.add_argument("--base-url", help="mirror URL (default: $ECGFORGE_BASE_URL or PhysioNet)")

    p = data(common(sub.add_parser("prepare", help="build DS0 and DS1/DS2 manifests")))
    p.add_argument("--n-ds0", type=int)
    p.add_argument("--classes", help="class-definition JSON (default: shipped table)")
    p.add_argument("--per-class", help="train,val,test count for every class (desk-scale builds)")

    p = train_flags(prepared(common(sub.add_parser("pretrain", help="masked-beat regression suite"))))
    p.add_argument("--groups", help="QRS test groups (default: N,P,X,M)")
    p.add_argument("--counts", help="QRS test windows: one count for all groups or one per group")
    p = train_flags(prepared(common(sub.add_parser("train", help="run a training suite"))))
    p.add_argument("--protocol", choices=list(training.PROTOCOLS))
    p = train_flags(prepared(common(sub.add_parser("transfer", help="regression-to-classification suite"))))
    p.add_argument("--pretrain-epochs", type=int)

    p = prepared(common(sub.add_parser("eval", help="classification metrics of a checkpoint on DS2")))
    p.add_argument("--checkpoint")
    p.add_argument("--repetition", type=int)

    p = prepared(common(sub.add_parser("qrs-predict", help="QRS prediction errors per group")))
    p.add_argument("--checkpoint")
    p.add_argument("--groups")
    p.add_argument("--counts", help="one count for all groups or one per group")
    p.add_argument("--bin-width", type=float)

    p = prepared(common(sub.add_parser("hpo", help="ASHA search over the architecture grid")))
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--ds0-fraction", type=float, help="use this fraction of DS0")
    p.add_argument("--eta", type=int)
    p.add_argument("--grace", type=int)
    p.add_argument("--max-budget", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", help="ledger to continue")
    p.add_argument("--hpo-pretrain-epochs", type=int)
    p.add_argument("--max-trials", type=int, help="random subset of the grid")

    p = common(sub.add_parser("report", help="mean ± std table of finished suites"))
    p.add_argument("--suite")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve(args)
        with locked(Path(settings["output_dir"])):
            COMMANDS[args.command](settings)
    except CliError as exc:
        print(f"ecgforge {args.command}: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_USAGE if exc.category == "usage" else EXIT_RUNTIME
    except (wfdb.TransportError, wfdb.CorruptFileError, wfdb.WfdbParseError) as exc:
        print(f"ecgforge {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (D.ConstructionError, training.TrainingDivergedError, ValueError, OSError) as exc:
        print(f"ecgforge {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
