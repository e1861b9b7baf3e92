import json
import math
import warnings

import numpy as np
import pytest

from ecgforge import dataset as D
from ecgforge import nn, training
from ecgforge.model import build_network, load_network, EcgNetConfig
from ecgforge.synthetic import synthetic_database
from ecgforge.training import TrainConfig

TINY = {"n_conv_layers": 3, "first_channels": 4, "first_kernel": 16, "adaptive_output_length": 64}


def tiny(task="classification", **kw):
    return TrainConfig(task=task, network=dict(TINY), batch_size=kw.pop("batch_size", 8), **kw)


@pytest.fixture(scope="module")
def sources():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return D.sources_from_records(synthetic_database(6, 60.0, rng=0))


@pytest.fixture(scope="module")
def bundle(sources):
    return D.build_ds1_ds2(sources, D.load_class_table().scaled((2, 1, 1)), 0)


@pytest.fixture(scope="module")
def ds0(sources):
    return D.build_ds0(sources, 24, 0)


def test_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate, c.beta1, c.beta2) == (100, 50, 1e-3, 0.9, 0.999)
    assert c.select_best_by == "validation_loss" and not c.freeze_trunk and not c.static_masks
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig(task="clustering")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_zero_epochs_gives_initial_checkpoint(tmp_path, ds0):
    res = training.train_regression(ds0, None, tiny("regression", epochs=0, checkpoint_dir=str(tmp_path)))
    assert res.train_loss == [] and res.val_loss == []
    assert res.initial_checkpoint.exists() and res.best_checkpoint == res.initial_checkpoint
    assert res.last_checkpoint is None
    assert (tmp_path / "losses.csv").read_text().splitlines() == ["epoch,train_loss,val_loss"]


def test_classification_run_layout_and_selection(tmp_path, bundle):
    cfg = tiny(epochs=4, checkpoint_dir=str(tmp_path), seed=3)
    res = training.train_classification(bundle.split("train"), bundle.split("val"), cfg)
    assert len(res.train_loss) == len(res.val_loss) == 4
    assert res.best_epoch == int(np.argmin(res.val_loss))
    for name in ("initial", "best", "last"):
        assert (tmp_path / f"{name}.ecgf").exists()
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 3
    rows = (tmp_path / "losses.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss" and len(rows) == 5 and rows[1].startswith("0,")
    # the best checkpoint reproduces the minimum validation loss
    best = load_network(res.best_checkpoint, np.float32)
    vx, vy = bundle.arrays("val")
    assert training.classification_loss(best, vx, vy) == pytest.approx(min(res.val_loss), rel=1e-6)
    assert all(min(res.val_loss) <= v for v in res.val_loss)


def test_uniform_predictor_has_ln17_loss(bundle):
    net = build_network(EcgNetConfig(**TINY, head="classification"), 0)
    last = net.head.parameters()
    for p in last[-2:]:
        p.data[...] = 0.0
    vx, vy = bundle.arrays("val")
    assert training.classification_loss(net, vx, vy) == pytest.approx(math.log(17), abs=1e-12)


def test_initial_val_loss_near_ln17(bundle):
    # at Kaiming initialisation the logits are spread out, so the loss is close to but above ln 17
    res = training.train_classification(bundle.split("train"), bundle.split("val"), tiny(epochs=1, seed=0,
                                                                                         learning_rate=0.0))
    assert math.log(17) <= res.val_loss[0] < 3 * math.log(17)


def test_loss_decreases_over_ten_steps():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3600))
    y = np.arange(8) % 17
    res = training.train_classification((x, y), None, tiny(epochs=10, seed=1))
    assert res.train_loss[-1] < res.train_loss[0]


def test_same_seed_gives_bit_identical_runs(tmp_path, ds0):
    runs = []
    for name in ("a", "b"):
        cfg = tiny("regression", epochs=2, seed=5, checkpoint_dir=str(tmp_path / name))
        runs.append(training.train_regression(ds0[:16], ds0[16:], cfg))
    assert runs[0].train_loss == runs[1].train_loss and runs[0].val_loss == runs[1].val_loss
    for name in ("initial", "best", "last"):
        assert (tmp_path / "a" / f"{name}.ecgf").read_bytes() == (tmp_path / "b" / f"{name}.ecgf").read_bytes()
    other = training.train_regression(ds0[:16], ds0[16:], tiny("regression", epochs=2, seed=6))
    assert other.train_loss != runs[0].train_loss


def test_static_masks_fix_inputs(ds0):
    seen = {}
    orig = training._masked_arrays

    def spy(samples, dtype):
        seen.setdefault(len(seen), [m.mask_start for m in samples])
        return orig(samples, dtype)

    training._masked_arrays = spy
    try:
        training.train_regression(ds0[:8], None, tiny("regression", epochs=2, static_masks=True, batch_size=8))
        static = dict(seen)
        seen.clear()
        training.train_regression(ds0[:8], None, tiny("regression", epochs=2, batch_size=8))
        fresh = dict(seen)
    finally:
        training._masked_arrays = orig
    assert sorted(static[0]) == sorted(static[1])
    assert sorted(fresh[0]) != sorted(fresh[1])


def test_predict_does_not_mutate(bundle):
    net = build_network(EcgNetConfig(**TINY, head="classification"), 0)
    net.train()
    before = [a.copy() for _, a in net.state()]
    vx, _ = bundle.arrays("val")
    training.predict(net, vx)
    training.evaluate_classifier(net, bundle.split("test"))
    assert net.training
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, net.state()))


def test_divergence_is_reported(monkeypatch):
    calls = []
    original = nn.cross_entropy

    def exploding(out, labels):
        calls.append(1)
        loss = original(out, labels)
        return loss + (math.inf if len(calls) == 3 else 0.0)

    monkeypatch.setattr(training.nn, "cross_entropy", exploding, raising=True)
    x = np.random.default_rng(0).normal(size=(8, 3600))
    with pytest.raises(training.TrainingDivergedError) as err:
        training.train_classification((x, np.zeros(8, dtype=int)), None, tiny(epochs=2, batch_size=4))
    assert (err.value.epoch, err.value.batch) == (1, 0)
    assert "epoch 1" in str(err.value)


def test_freeze_trunk_leaves_trunk_alone(bundle):
    net = build_network(EcgNetConfig(**TINY, head="classification"), 0)
    head_before = [p.data.copy() for p in net.head.parameters()]
    training.train_classification(bundle.split("train"), None, tiny(epochs=1, freeze_trunk=True, dtype="float64"),
                                  net)
    # batch-norm running statistics move in train mode, weights do not
    frozen = [p.data.copy() for p in net.parameters() if all(p is not q for q in net.head.parameters())]
    ref = build_network(EcgNetConfig(**TINY, head="classification"), 0)
    ref_params = [p.data for p in ref.parameters() if all(p is not q for q in ref.head.parameters())]
    assert all(np.array_equal(a, b) for a, b in zip(frozen, ref_params))
    assert any(not np.array_equal(a, p.data) for a, p in zip(head_before, net.head.parameters()))


def test_transfer_starts_from_best_regression_trunk(tmp_path, ds0, bundle):
    pre = tiny("regression", epochs=2, seed=2, checkpoint_dir=str(tmp_path / "pre"))
    fine = tiny(epochs=1, seed=2, checkpoint_dir=str(tmp_path / "fine"))
    res = training.train_transfer(ds0, bundle.split("train"), bundle.split("val"), pre, fine)
    assert res.pretrain is not None and res.pretrain.best_checkpoint.parent == tmp_path / "pre"
    best_reg = load_network(res.pretrain.best_checkpoint, np.float32)
    start = load_network(tmp_path / "fine" / "initial.ecgf", np.float32)
    assert start.trunk_bytes() == best_reg.trunk_bytes()
    assert start.config.head == "classification" and best_reg.config.head == "regression"
    w = start.head.parameters()[0].data
    assert w.std() == pytest.approx(math.sqrt(2 / w.shape[1]), rel=0.2)
    assert len(res.pretrain.val_loss) == 2  # the pretraining stage selects on its 10% split


def test_suite_aggregates_and_isolates_seeds(tmp_path, bundle):
    cfg = tiny(epochs=1)
    results, agg = training.run_experiment_suite("cnet", 2, 10, tmp_path, bundle=bundle, train_config=cfg)
    assert agg["n_runs"] == 2 and agg["failed"] == []
    assert np.sum(agg["confusion"]) == 2 * 17
    assert (tmp_path / "cnet" / "aggregate.json").exists()
    summary = json.loads((tmp_path / "cnet" / "1" / "metrics.json").read_text())
    assert summary["repetition_index"] == 1 and summary["best_checkpoint"] == "best.ecgf"
    assert "checkpoint_dir" not in json.loads((tmp_path / "cnet" / "1" / "config.json").read_text())
    alone = training.run_repetition("cnet", 1, 10, None, bundle=bundle, train_config=cfg)
    assert alone.test_metrics == results[1].test_metrics
    accs = [r.test_metrics["overall_accuracy"] for r in results]
    assert agg["overall_accuracy"]["mean"] == pytest.approx(np.mean(accs))
    assert agg["overall_accuracy"]["std"] == pytest.approx(np.std(accs))


def test_suite_records_failures(tmp_path, bundle):
    results, agg = training.run_experiment_suite("regression", 1, 0, tmp_path, ds0=[], train_config=tiny("regression"))
    assert agg["failed"] == [0] and agg["n_runs"] == 0
    failure = json.loads((tmp_path / "regression" / "0" / "metrics.json").read_text())
    assert "error" in failure
    with pytest.raises(ValueError):
        training.run_repetition("nope", 0, 0, None)


def test_regression_suite_scores_qrs(tmp_path, sources, ds0):
    qrs = D.build_qrs_testset(sources, {"N": 3, "M": 3}, 0)
    results, agg = training.run_experiment_suite("regression", 1, 0, None, ds0=ds0, qrs=qrs,
                                                 train_config=tiny("regression", epochs=1))
    assert set(results[0].test_metrics) == {"N", "M"}
    assert "N.shifted.median" in agg
    rows = training.evaluate_qrs(results[0].network, qrs)["rows"]
    assert all(r["shifted"] <= r["raw"] for r in rows)
