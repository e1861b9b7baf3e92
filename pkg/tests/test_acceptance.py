"""Acceptance criteria, one test per criterion, each printing a PASS or FAIL line.

Criteria that need the MIT-BIH Arrhythmia Database read it from the record
cache (``$ECGFORGE_CACHE`` or ``~/.cache/ecgforge``; fill it with
``ecgforge fetch``). When the records are not cached those criteria cannot
be evaluated: they print FAIL with the reason and are reported as xfail.
With the records present they run at their stated tolerances.
"""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from ecgforge import dataset as D
from ecgforge import hpo, metrics, nn, training, wfdb
from ecgforge.model import EcgNetConfig, build_network, load_network, shape_chain
from ecgforge.nn import functional as F
from ecgforge.synthetic import synthetic_database


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def blocked(number: int, title: str, reason: str) -> None:
    line = f"FAIL criterion {number}: {title} (not evaluated: {reason})"
    VERDICTS.append(line)
    print(line)
    pytest.xfail(reason)


def cached_records(names) -> Path | None:
    cache = wfdb.default_cache_dir()
    ok = all((cache / n / f"{n}{s}").exists() for n in names for s in wfdb.SUFFIXES)
    return cache if ok else None


def mitdb_sources(cache: Path) -> list[D.Source]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return D.sources_from_records(wfdb.load_records(wfdb.DEFAULT_RECORDS, cache, fetch=False))


@pytest.fixture(scope="module")
def synth_sources():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return D.sources_from_records(synthetic_database(6, 60.0, rng=0))


# ---------------------------------------------------------------- 1


def _layer_cases(rng):
    return [
        ("conv1d", nn.Sequential(nn.Conv1d(2, 3, 5, rng=rng)), (2, 2, 16)),
        ("batchnorm1d", nn.Sequential(nn.BatchNorm1d(3)), (4, 3, 6)),
        ("relu", nn.Sequential(nn.ReLU()), (2, 3, 7)),
        ("maxpool1d", nn.Sequential(nn.MaxPool1d(4, 2)), (2, 2, 15)),
        ("adaptive_maxpool1d", nn.Sequential(nn.AdaptiveMaxPool1d(5)), (2, 13)),
        ("flatten", nn.Sequential(nn.Flatten()), (2, 3, 4)),
        ("linear", nn.Sequential(nn.Linear(7, 4, rng=rng)), (3, 7)),
    ]


@pytest.mark.slow
def test_criterion_1_autodiff():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(0)
    for name, net, shape in _layer_cases(rng):
        for p in net.parameters():
            p.data += rng.normal(scale=0.3, size=p.shape)
        x = nn.Tensor(rng.normal(size=shape))
        target = rng.normal(size=net(x).shape)
        worst[name] = nn.gradient_check(net, x, lambda o: F.smooth_l1_loss(o, target), 1e-5, check_input=True)
    x = nn.Tensor(rng.normal(size=(3, 5)))
    worst["cross_entropy"] = nn.gradient_check(nn.Sequential(nn.Linear(5, 17, rng=rng)), x,
                                               lambda o: F.cross_entropy(o, np.array([0, 8, 16])), 1e-5,
                                               check_input=True)
    counts = {}
    for head in ("regression", "classification"):
        net = build_network(EcgNetConfig(head=head), 1)
        x = nn.Tensor(rng.normal(size=(2, 1, 3600)))
        if head == "regression":
            target = rng.normal(size=(2, 100))
            loss = lambda o: F.smooth_l1_loss(o, target)  # noqa: E731
        else:
            loss = lambda o: F.cross_entropy(o, np.array([3, 11]))  # noqa: E731
        report = {}
        worst[f"network/{head}"] = nn.gradient_check(net, x, loss, 1e-5, max_per_tensor=6,
                                                     rng=np.random.default_rng(2), report=report)
        counts[head] = report
    elapsed = time.perf_counter() - start
    err = max(worst.values())
    ok = err < 1e-4 and elapsed < 60 and all(c["checked"] > 0 for c in counts.values())
    verdict(1, "autodiff vs central differences", ok,
            f"max rel err {err:.2e} < 1e-4 over {len(worst)} cases, full nets checked "
            f"{counts['regression']['checked']}+{counts['classification']['checked']} scalars, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------- 2


def test_criterion_2_shape_chain():
    chain = shape_chain(EcgNetConfig(), 3600)
    want = [(3473, 1735), (1672, 835), (804, 401), (386, 192), (185, 91), (88, 43), (42, 20)]
    x = nn.Tensor(np.zeros((1, 1, 3600)))
    with nn.no_grad():
        dims = [build_network(EcgNetConfig(head=h)).eval()(x).shape[1] for h in ("regression", "classification")]
    verdict(2, "shape chain and head dims", chain == want and dims == [100, 17], f"chain {chain[-1]}, heads {dims}")


# ---------------------------------------------------------------- 3


def test_criterion_3_parsers_on_mitdb():
    title = "format-212 and annotation parsers on every MIT-BIH record"
    cache = cached_records(wfdb.ALL_RECORDS)
    if cache is None:
        blocked(3, title, f"MIT-BIH records not in cache {wfdb.default_cache_dir()}; run `ecgforge fetch --records all`")
    start = time.perf_counter()
    problems = []
    for name in wfdb.ALL_RECORDS:
        folder = cache / name
        header = wfdb.parse_header((folder / f"{name}.hea").read_bytes())
        raw = (folder / header.signals[0].file_name).read_bytes()
        signals = wfdb.parse_signal_212(raw, header.n_signals, header.n_samples)
        frames = np.stack(signals, axis=1).reshape(-1)
        if wfdb.encode_212(frames) != raw[: wfdb.bytes_for_212(frames.size)]:
            problems.append(f"{name}: 212 round trip differs")
        for spec, sig in zip(header.signals, signals):
            if wfdb.checksum(sig) != spec.checksum:
                problems.append(f"{name}: checksum mismatch")
        atr = (folder / f"{name}.atr").read_bytes()
        anns = wfdb.parse_annotations(atr)
        if _annotation_times(atr) != [a.sample_index for a in anns]:
            problems.append(f"{name}: annotation times differ")
    elapsed = time.perf_counter() - start
    verdict(3, title, not problems and elapsed < 120, f"{len(problems)} problems, {elapsed:.1f}s < 120s")


def _annotation_times(data: bytes) -> list[int]:
    """Independent cumulative-time walk over an MIT annotation stream."""
    t, out, i = 0, [], 0
    while i + 1 < len(data):
        word = data[i] | data[i + 1] << 8
        code, value = word >> 10, word & 0x3FF
        i += 2
        if code == 0 and value == 0:
            break
        if code == 59:  # SKIP: 32-bit interval, high word first
            hi = data[i] | data[i + 1] << 8
            lo = data[i + 2] | data[i + 3] << 8
            skip = hi << 16 | lo
            t += skip - (1 << 32) if skip >= 1 << 31 else skip
            i += 4
        elif code == 63:  # AUX: payload padded to even length
            i += value + (value & 1)
        elif code in (60, 61, 62):
            pass
        else:
            t += value
            if code != 0:
                out.append(t)
    return out


# ---------------------------------------------------------------- 4


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        y, y_hat = rng.normal(size=n), rng.normal(size=n)
        ref = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, y_hat)) / n) / (max(y) - min(y))
        worst = max(worst, abs(metrics.nrmse(y, y_hat) - ref))

        m = int(rng.integers(1, 40))
        actual = rng.integers(0, 17, m).tolist()
        predicted = [a if rng.random() < 0.5 else int(rng.integers(0, 17)) for a in actual]
        recalls = []
        for c in set(actual):
            idx = [i for i, a in enumerate(actual) if a == c]
            recalls.append(sum(predicted[i] == c for i in idx) / len(idx))
        p_o = sum(a == p for a, p in zip(actual, predicted)) / m
        p_e = sum(actual.count(c) * predicted.count(c) for c in range(17)) / m**2
        kappa = 1.0 if p_e == 1 else (p_o - p_e) / (1 - p_e)
        r = metrics.classification_metrics(actual, predicted)
        worst = max(worst, abs(r.balanced_accuracy - 100 * sum(recalls) / len(recalls)), abs(r.kappa - kappa))
    verdict(4, "metric oracles on 1000 random instances", worst <= 1e-12, f"max abs diff {worst:.1e} <= 1e-12")


# ---------------------------------------------------------------- 5


def test_criterion_5_loss_values():
    vals = {
        "smooth_l1(0.5)": (float(F.smooth_l1_loss(nn.Tensor(np.array([[0.5]])), np.zeros((1, 1))).data), 0.125),
        "smooth_l1(2.0)": (float(F.smooth_l1_loss(nn.Tensor(np.array([[2.0]])), np.zeros((1, 1))).data), 1.5),
        "ce(uniform17)": (float(F.cross_entropy(nn.Tensor(np.zeros((1, 17))), np.array([4])).data), math.log(17)),
    }
    err = max(abs(a - b) for a, b in vals.values())
    verdict(5, "loss values", err <= 1e-9,
            ", ".join(f"{k}={a:.10f}" for k, (a, _) in vals.items()) + f", max err {err:.1e}")


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_overfit(synth_sources):
    start = time.perf_counter()
    ten = D.build_ds0(synth_sources[:2], 10, 1)
    reg = training.train_regression(ten, None, training.TrainConfig(epochs=200, static_masks=True, seed=0))
    reg_time = time.perf_counter() - start

    start = time.perf_counter()
    by_class = D.candidate_windows(synth_sources[:2], D.load_class_table())
    picks = [segs[0] for segs in by_class.values()] + [by_class[k][1] for k in (0, 6, 16)]
    cls = training.train_classification(picks, None, training.TrainConfig(task="classification", epochs=40, seed=0))
    x, y = training._as_arrays(picks)
    acc = float(np.mean(training.predict(cls.network, x).argmax(axis=1) == y))
    cls_time = time.perf_counter() - start

    ok = reg.train_loss[-1] < 0.01 and acc == 1.0 and reg_time < 600 and cls_time < 600 and len(picks) == 20
    verdict(6, "overfitting smoke tests", ok,
            f"10-sample SmoothL1 {reg.train_loss[-1]:.4f} < 0.01 in {reg_time:.0f}s, "
            f"20-sample train acc {100 * acc:.0f}% in {cls_time:.0f}s, limit 600s each")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_desk_scale_classification(tmp_path):
    title = "desk-scale CNet, 3 reps x 100 epochs, ov acc >= 70% and kappa >= 0.65"
    cache = cached_records(wfdb.DEFAULT_RECORDS)
    if cache is None:
        blocked(7, title, f"MIT-BIH records not in cache {wfdb.default_cache_dir()}")
    bundle = D.build_ds1_ds2(mitdb_sources(cache), D.load_class_table(), 0)
    cfg = training.TrainConfig(task="classification", epochs=100)
    _, agg = training.run_experiment_suite("cnet", 3, 0, tmp_path, bundle=bundle, train_config=cfg)
    acc, kappa = agg["overall_accuracy"]["mean"], agg["kappa"]["mean"]
    verdict(7, title, acc >= 70 and kappa >= 0.65 and not agg["failed"],
            f"ov acc {acc:.2f} ± {agg['overall_accuracy']['std']:.2f}, kappa {kappa:.3f}")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_desk_scale_qrs(tmp_path):
    title = "desk-scale QRS regression, median shifted NRMSE < 0.25 on 400 N windows"
    cache = cached_records(wfdb.DEFAULT_RECORDS)
    if cache is None:
        blocked(8, title, f"MIT-BIH records not in cache {wfdb.default_cache_dir()}")
    sources = mitdb_sources(cache)
    ds0 = D.build_ds0(sources, 99990, 0)
    sub, _ = D.split_fraction(ds0, 0.9, 1)
    res = training.train_regression(sub, None, training.TrainConfig(epochs=20, checkpoint_dir=str(tmp_path)))
    qrs = D.build_qrs_testset(sources, {"N": 400}, 2)
    rows = training.evaluate_qrs(training.load_best(res), qrs)["rows"]
    median = float(np.median([r["shifted"] for r in rows]))
    ordered = sum(r["shifted"] <= r["raw"] for r in rows) / len(rows)
    verdict(8, title, median < 0.25 and ordered == 1.0 and len(rows) == 400,
            f"median shifted {median:.3f}, shifted <= raw in {100 * ordered:.0f}% of {len(rows)}")


# ---------------------------------------------------------------- 9


def test_criterion_9_transfer(tmp_path, synth_sources):
    start = time.perf_counter()
    bundle = D.build_ds1_ds2(synth_sources, D.load_class_table().scaled((2, 1, 1)), 0)
    ds0 = D.build_ds0(synth_sources, 30, 0)
    pre = training.TrainConfig(epochs=2, batch_size=10, checkpoint_dir=str(tmp_path / "pretrain"))
    fine = training.TrainConfig(task="classification", epochs=2, batch_size=17,
                                checkpoint_dir=str(tmp_path / "finetune"))
    res = training.train_transfer(ds0, bundle.split("train"), bundle.split("val"), pre, fine)
    best_reg = load_network(res.pretrain.best_checkpoint)
    start_net = load_network(tmp_path / "finetune" / "initial.ecgf")
    same = start_net.trunk_bytes() == best_reg.trunk_bytes()
    elapsed = time.perf_counter() - start
    done = res.best_checkpoint.exists() and len(res.val_loss) == 2
    verdict(9, "transfer pipeline integrity", same and done and elapsed < 900,
            f"fine-tune trunk == best regression trunk: {same}, end to end {elapsed:.0f}s < 900s")


# ---------------------------------------------------------------- 10


def test_criterion_10_asha():
    grid = hpo.enumerate_grid()
    hits, fractions = 0, []
    for seed in range(100):
        objective = hpo.synthetic_objective(grid, seed)
        rng = np.random.default_rng([seed, 1])
        speed = rng.uniform(0.5, 2.0, len(grid))
        order = list(rng.permutation(len(grid)))
        res = hpo.simulate(objective, len(grid), 2, 5, 40, workers=8, duration=lambda c: speed[c], order=order)
        hits += res.best_trial == res.exhaustive_best
        fractions.append(res.budget_fraction)
    same = 0
    for seed in range(100):
        table = np.random.default_rng(seed).normal(size=(64, 4))
        scores = lambda t, r: float(table[t, r])  # noqa: E731
        same += hpo.synchronous_asha(scores, 64) == hpo.classic_successive_halving(scores, 64)
    verdict(10, "ASHA mechanism", hits >= 95 and max(fractions) <= 0.40 and same == 100,
            f"best found {hits}/100, max budget {100 * max(fractions):.1f}% <= 40%, sync == SH {same}/100")


# ---------------------------------------------------------------- 11


def test_criterion_11_determinism(tmp_path, synth_sources):
    bundle = D.build_ds1_ds2(synth_sources, D.load_class_table().scaled((2, 1, 1)), 3)
    again = D.build_ds1_ds2(synth_sources, D.load_class_table().scaled((2, 1, 1)), 3)
    cfg = training.TrainConfig(task="classification", epochs=2, batch_size=17)
    outputs = []
    for name in ("a", "b"):
        training.run_experiment_suite("cnet", 1, 5, tmp_path / name, bundle=bundle, train_config=cfg)
        outputs.append({p.relative_to(tmp_path / name).as_posix(): p.read_bytes()
                        for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    a, b = outputs
    same_files = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    same_data = D.bundle_rows(bundle) == D.bundle_rows(again)
    verdict(11, "determinism", same_files and same_data,
            f"{len(a)} run files bit-identical: {same_files}, dataset manifests identical: {same_data}")
