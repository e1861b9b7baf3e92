"""Training loops for masked-beat regression, classification and transfer, plus suites.

Randomness is drawn from generators keyed on (seed, purpose[, epoch]) so every
run is a pure function of its seed and data, and one repetition's outcome does
not depend on which other repetitions ran.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dataset import (
    WINDOW,
    ClassificationBundle,
    MaskedSample,
    QrsTestSet,
    Segment,
    make_masked_sample,
    split_fraction,
)
from .metrics import aggregate, classification_metrics, nrmse_variants
from .model import EcgNet, EcgNetConfig, build_network, load_network, save_network, swap_head

# generator purposes
_INIT, _SHUFFLE, _MASK, _VAL_MASK, _HEAD, _SPLIT = range(6)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    task: str = "regression"
    epochs: int = 100
    batch_size: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_dir: str | None = None
    select_best_by: str = "validation_loss"
    dtype: str = "float32"
    mask_policy: str = "beat_centered"
    static_masks: bool = False
    freeze_trunk: bool = False
    eval_batch_size: int = 100
    network: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def network_config(self) -> EcgNetConfig:
        return EcgNetConfig(**{**self.network, "head": self.task})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunResult:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int | None
    best_checkpoint: Path | None
    last_checkpoint: Path | None = None
    initial_checkpoint: Path | None = None
    test_metrics: dict = field(default_factory=dict)
    repetition_index: int | None = None
    pretrain: "RunResult | None" = None
    network: EcgNet | None = field(default=None, repr=False)

    def summary(self, base: str | Path | None = None) -> dict:
        """Plain-data summary; with ``base`` the checkpoint path is written relative to it."""
        best = self.best_checkpoint
        if best is not None and base is not None:
            best = Path(os.path.relpath(best, base))
        return {
            "best_epoch": self.best_epoch,
            "best_checkpoint": best.as_posix() if best else None,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "best_val_loss": min(self.val_loss) if self.val_loss else None,
            "test_metrics": self.test_metrics,
            "repetition_index": self.repetition_index,
        }


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def segment_matrix(segments: list[Segment], dtype=np.float64) -> np.ndarray:
    if not segments:
        return np.zeros((0, WINDOW), dtype=dtype)
    return np.stack([s.values for s in segments]).astype(dtype)


def make_masks(segments: list[Segment], values: np.ndarray, rng: np.random.Generator,
               policy: str) -> list[MaskedSample]:
    return [make_masked_sample(s, rng, policy, values[i]) for i, s in enumerate(segments)]


def _masked_arrays(samples: list[MaskedSample], dtype) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([m.input for m in samples]).astype(dtype),
            np.stack([m.target for m in samples]).astype(dtype))


# ---------------------------------------------------------------- inference


def predict(network: nn.Module, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Eval-mode forward in chunks; parameters and running statistics are untouched."""
    was_training = network.training
    network.eval()
    dtype = network.parameters()[0].dtype
    out = []
    try:
        with nn.no_grad():
            for i in range(0, len(x), batch_size):
                chunk = np.asarray(x[i : i + batch_size], dtype=dtype)
                out.append(network(nn.Tensor(chunk[:, None, :])).data)
    finally:
        network.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def regression_loss(network, inputs, targets, batch_size=100) -> float:
    pred = predict(network, inputs, batch_size).astype(np.float64)
    d = np.abs(pred - targets)
    return float(np.mean(np.where(d < 1, 0.5 * d * d, d - 0.5)))


def classification_loss(network, inputs, labels, batch_size=100) -> float:
    logits = predict(network, inputs, batch_size).astype(np.float64)
    return float(nn.cross_entropy(nn.Tensor(logits), labels).data)


# ---------------------------------------------------------------- core loop


class _Checkpoints:
    def __init__(self, directory):
        self.dir = Path(directory) if directory else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path | None:
        return self.dir / f"{name}.ecgf" if self.dir else None

    def save(self, network, name: str) -> Path | None:
        if self.dir:
            save_network(network, self.path(name))
        return self.path(name)


def _fit(network: EcgNet, config: TrainConfig, n_train: int, batch_fn, val_fn) -> RunResult:
    """Shared loop: ``batch_fn(epoch, idx)`` gives (input, loss_fn); ``val_fn()`` a loss or None."""
    if config.epochs and not n_train:
        raise ValueError("empty training set")
    ckpt = _Checkpoints(config.checkpoint_dir)
    if ckpt.dir:
        # the snapshot omits the directory itself so a run reads the same wherever it lives
        snap = {k: v for k, v in config.to_dict().items() if k != "checkpoint_dir"}
        (ckpt.dir / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True))
    initial = ckpt.save(network, "initial")
    params = network.head.parameters() if config.freeze_trunk else network.parameters()
    opt = nn.Adam(params, config.learning_rate, (config.beta1, config.beta2), config.epsilon)
    train_curve, val_curve = [], []
    best_val, best_epoch, best_path, best_state = math.inf, None, None, None
    for epoch in range(config.epochs):
        network.train()
        order = _rng(config.seed, _SHUFFLE, epoch).permutation(n_train)
        total = 0.0
        for b, start in enumerate(range(0, n_train, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x, loss_fn = batch_fn(epoch, idx)
            opt.zero_grad()
            network.zero_grad()
            loss = loss_fn(network(nn.Tensor(x[:, None, :])))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            loss.backward()
            opt.step()
            total += value * len(idx)
        train_curve.append(total / max(n_train, 1))
        val = val_fn()
        if val is not None:
            if not math.isfinite(val):
                raise TrainingDivergedError(epoch, -1, val)
            val_curve.append(val)
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_path = ckpt.save(network, "best")
                if best_path is None:
                    best_state = [a.copy() for _, a in network.state()]
        ckpt.save(network, "last")
    last = ckpt.path("last")
    if ckpt.dir:
        with open(ckpt.dir / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, t in enumerate(train_curve):
                w.writerow([e, repr(t), repr(val_curve[e]) if e < len(val_curve) else ""])
    if best_epoch is None:
        # no validation split: the final state stands in as "best" so every run has the same layout
        best_epoch = config.epochs - 1 if config.epochs else None
        best_path = (ckpt.save(network, "best") or last) if config.epochs else initial
    elif best_state is not None:
        # no checkpoint directory: keep the best weights in memory instead
        for (_, target), source in zip(network.state(), best_state):
            target[...] = source
    return RunResult(train_curve, val_curve, best_epoch, best_path, last if config.epochs else None, initial,
                     network=network)


def _prepare(config: TrainConfig, network: EcgNet | None) -> EcgNet:
    if network is None:
        network = build_network(config.network_config(), _rng(config.seed, _INIT))
    return network.astype(np.dtype(config.dtype))


def load_best(result: RunResult, dtype="float64") -> EcgNet:
    """The network at the best epoch (from disk if checkpointed)."""
    if result.best_checkpoint is not None and Path(result.best_checkpoint).exists():
        return load_network(result.best_checkpoint, np.dtype(dtype))
    return result.network


# ---------------------------------------------------------------- protocols


def train_regression(train: list[Segment], val: list[Segment] | None, config: TrainConfig,
                     network: EcgNet | None = None) -> RunResult:
    """Masked-beat regression with SmoothL1 on the 100 hidden samples."""
    dtype = np.dtype(config.dtype)
    network = _prepare(replace(config, task="regression"), network)
    values = segment_matrix(train)
    static = make_masks(train, values, _rng(config.seed, _MASK), config.mask_policy) if config.static_masks else None
    cache: dict[int, list[MaskedSample]] = {}

    def masks_for(epoch: int) -> list[MaskedSample]:
        if static is not None:
            return static
        if epoch not in cache:
            cache.clear()
            cache[epoch] = make_masks(train, values, _rng(config.seed, _MASK, epoch), config.mask_policy)
        return cache[epoch]

    def batch_fn(epoch, idx):
        samples = masks_for(epoch)
        x, y = _masked_arrays([samples[i] for i in idx], dtype)
        return x, lambda out: nn.smooth_l1_loss(out, y)

    val_fn = lambda: None
    if val:
        vx, vy = _masked_arrays(make_masks(val, segment_matrix(val), _rng(config.seed, _VAL_MASK),
                                           "beat_centered"), np.float64)
        val_fn = lambda: regression_loss(network, vx, vy, config.eval_batch_size)
    return _fit(network, config, len(train), batch_fn, val_fn)


def train_classification(train: list[Segment] | tuple[np.ndarray, np.ndarray],
                         val: list[Segment] | tuple[np.ndarray, np.ndarray] | None,
                         config: TrainConfig, network: EcgNet | None = None) -> RunResult:
    """Cross-entropy training; the best epoch is the one with the lowest validation loss."""
    dtype = np.dtype(config.dtype)
    network = _prepare(replace(config, task="classification"), network)
    x, y = _as_arrays(train)
    x = x.astype(dtype)

    def batch_fn(epoch, idx):
        labels = y[idx]
        return x[idx], lambda out: nn.cross_entropy(out, labels)

    val_fn = lambda: None
    if val is not None:
        vx, vy = _as_arrays(val)
        if len(vy):
            val_fn = lambda: classification_loss(network, vx, vy, config.eval_batch_size)
    return _fit(network, config, len(y), batch_fn, val_fn)


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        return np.asarray(data[0]), np.asarray(data[1], dtype=np.int64)
    return segment_matrix(data), np.array([s.label for s in data], dtype=np.int64)


def train_transfer(ds0: list[Segment], ds1_train, ds1_val, pretrain_config: TrainConfig,
                   finetune_config: TrainConfig, val_fraction: float = 0.1) -> RunResult:
    """Pretrain on masked beats with validation selection, swap the head, fine-tune everything."""
    ds0_train, ds0_val = split_fraction(ds0, val_fraction, _rng(pretrain_config.seed, _SPLIT))
    pre = train_regression(ds0_train, ds0_val, pretrain_config)
    network = load_best(pre, finetune_config.dtype)
    swap_head(network, "classification", _rng(finetune_config.seed, _HEAD))
    result = train_classification(ds1_train, ds1_val, finetune_config, network)
    result.pretrain = pre
    return result


# ---------------------------------------------------------------- evaluation


def evaluate_classifier(network: EcgNet, segments_or_arrays, batch_size: int = 100) -> dict:
    x, y = _as_arrays(segments_or_arrays)
    pred = predict(network, x, batch_size).argmax(axis=1)
    return classification_metrics(y, pred, network.config.out_features).as_dict()


def evaluate_qrs(network: EcgNet, testset: QrsTestSet, batch_size: int = 100) -> dict:
    """Per-group NRMSE variants of the masked-window predictions."""
    if network.config.head != "regression":
        raise ValueError(f"QRS prediction needs a regression head, not {network.config.head!r}")
    rows = []
    for group, samples in testset.samples.items():
        if not samples:
            continue
        pred = predict(network, np.stack([m.input for m in samples]), batch_size).astype(np.float64)
        for m, p in zip(samples, pred):
            v = nrmse_variants(m.segment.values, m.mask_start, p)
            rows.append({"group": group, "record_name": m.segment.record_name,
                         "start_sample": m.segment.start_sample, "mask_start": m.mask_start, **v})
    return {"rows": rows, "summary": qrs_summary(rows)}


def qrs_summary(rows: list[dict]) -> dict:
    out = {}
    for group in sorted({r["group"] for r in rows}):
        sub = [r for r in rows if r["group"] == group]
        out[group] = {"n": len(sub)}
        for k in ("raw", "scaled", "shifted", "scaled_shifted"):
            v = np.array([r[k] for r in sub])
            out[group][k] = {"median": float(np.median(v)), "mean": float(v.mean()),
                             "below_0.2": float(np.mean(v < 0.2))}
    return out


# ---------------------------------------------------------------- suites


PROTOCOLS = ("cnet", "rcnet", "regression")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def run_repetition(protocol: str, rep: int, base_seed: int, run_dir: Path | None, *,
                   bundle: ClassificationBundle | None = None, ds0: list[Segment] | None = None,
                   qrs: QrsTestSet | None = None, train_config: TrainConfig | None = None,
                   pretrain_config: TrainConfig | None = None) -> RunResult:
    seed = base_seed + rep
    ckdir = str(run_dir) if run_dir else None
    if protocol == "cnet":
        cfg = replace(train_config or TrainConfig(task="classification", epochs=1000),
                      task="classification", seed=seed, checkpoint_dir=ckdir)
        result = train_classification(bundle.split("train", rep), bundle.split("val", rep), cfg)
        result.test_metrics = evaluate_classifier(load_best(result), bundle.split("test", rep))
    elif protocol == "rcnet":
        fine = replace(train_config or TrainConfig(task="classification", epochs=1000),
                       task="classification", seed=seed, checkpoint_dir=ckdir and str(run_dir / "finetune"))
        pre = replace(pretrain_config or TrainConfig(epochs=100), task="regression", seed=seed,
                      checkpoint_dir=ckdir and str(run_dir / "pretrain"))
        result = train_transfer(ds0, bundle.split("train", rep), bundle.split("val", rep), pre, fine)
        result.test_metrics = evaluate_classifier(load_best(result), bundle.split("test", rep))
    elif protocol == "regression":
        cfg = replace(train_config or TrainConfig(epochs=100), task="regression", seed=seed, checkpoint_dir=ckdir)
        result = train_regression(ds0, None, cfg)
        if qrs is not None:
            result.test_metrics = evaluate_qrs(load_best(result), qrs)["summary"]
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    result.repetition_index = rep
    return result


def run_experiment_suite(protocol: str, repetitions: int = 24, base_seed: int = 0, out_dir=None,
                         suite: str | None = None, **kwargs) -> tuple[list[RunResult | dict], dict]:
    """Run ``repetitions`` seeded repetitions; failures are recorded and skipped in the aggregate."""
    root = Path(out_dir) / (suite or protocol) if out_dir else None
    results: list = []
    reports = []
    for rep in range(repetitions):
        run_dir = root / str(rep) if root else None
        try:
            res = run_repetition(protocol, rep, base_seed, run_dir, **kwargs)
        except Exception as exc:  # recorded; the suite carries on
            failure = {"repetition_index": rep, "error": f"{type(exc).__name__}: {exc}",
                       "traceback": traceback.format_exc()}
            results.append(failure)
            if run_dir:
                _write_json(run_dir / "metrics.json", failure)
            continue
        results.append(res)
        if run_dir:
            _write_json(run_dir / "metrics.json", res.summary(run_dir))
        if protocol != "regression":
            reports.append(res.test_metrics)
        else:
            reports.append(_flatten_qrs(res.test_metrics))
    agg = aggregate(reports)
    agg["failed"] = [r["repetition_index"] for r in results if isinstance(r, dict)]
    agg["std_convention"] = "population"
    if root:
        _write_json(root / "aggregate.json", agg)
    return results, agg


def _flatten_qrs(summary: dict) -> dict:
    return {f"{g}.{k}.median": v[k]["median"] for g, v in summary.items()
            for k in ("raw", "scaled", "shifted", "scaled_shifted")}


__all__ = [
    "PROTOCOLS",
    "RunResult",
    "TrainConfig",
    "TrainingDivergedError",
    "evaluate_classifier",
    "evaluate_qrs",
    "load_best",
    "predict",
    "run_experiment_suite",
    "run_repetition",
    "train_classification",
    "train_regression",
    "train_transfer",
]
