"""Grid search with asynchronous successive halving (ASHA).

The scheduler is a pure decision object: trials report scores at rung
boundaries and ask for work; a trial is promoted from rung k once it ranks in
the top ``max(1, n_k // eta)`` of the ``n_k`` results recorded there so far.
Two drivers run it: a virtual-clock simulation for synthetic objectives and
:func:`run_search`, which trains real networks and keeps an append-only JSONL
ledger that a later call can resume from.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SearchSpace:
    batch_size: tuple = (50, 100)
    n_conv: tuple = (3, 5, 7)
    first_channels: tuple = (8, 16)
    first_kernel: tuple = (64, 128)
    pool_size: tuple = (3, 4)
    batchnorm: tuple = (True, False)
    n_class_layers: tuple = (1, 3)
    head_width: tuple = (1000, 3000)
    residual_to_head: tuple = (True, False)

    @property
    def size(self) -> int:
        return math.prod(len(getattr(self, f.name)) for f in fields(self))


def enumerate_grid(space: SearchSpace | None = None) -> list[dict]:
    """Cartesian product in field order (last field varies fastest)."""
    space = space or SearchSpace()
    names = [f.name for f in fields(space)]
    return [dict(zip(names, combo)) for combo in itertools.product(*(getattr(space, n) for n in names))]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def network_fields(config: dict) -> dict:
    """EcgNetConfig fields for a grid point."""
    return {
        "n_conv_layers": config["n_conv"],
        "first_channels": config["first_channels"],
        "first_kernel": config["first_kernel"],
        "pool_size": config["pool_size"],
        "batchnorm": config["batchnorm"],
        "n_head_layers": config["n_class_layers"],
        "adaptive_output_length": config["head_width"],
        "residual_to_head": config["residual_to_head"],
    }


def rung_budgets(grace: int, eta: int, max_budget: int) -> list[int]:
    if eta < 2 or grace < 1 or grace > max_budget:
        raise ValueError("need eta >= 2 and 1 <= grace <= max_budget")
    out = [grace]
    while out[-1] * eta <= max_budget:
        out.append(out[-1] * eta)
    return out


# ---------------------------------------------------------------- scheduler


@dataclass
class TrialState:
    trial_id: int
    config: dict
    rung: int = -1  # highest rung with a recorded score
    budget: int = 0
    score: float = math.nan
    status: str = "pending"  # pending|running|paused|promoted|completed|stopped|failed


class Asha:
    def __init__(self, n_trials: int, eta: int = 2, grace: int = 5, max_budget: int = 40):
        self.eta = eta
        self.budgets = rung_budgets(grace, eta, max_budget)
        self.n_trials = n_trials
        self.next_new = 0
        self.recorded: list[list[tuple[float, int, int]]] = [[] for _ in self.budgets]  # (score, order, id)
        self.promoted: list[set[int]] = [set() for _ in self.budgets]
        self._order = 0

    @property
    def top_rung(self) -> int:
        return len(self.budgets) - 1

    def report(self, trial_id: int, rung: int, score: float) -> str:
        """Record a rung result; the decision is 'completed' at the top rung, else 'paused'."""
        score = math.inf if not math.isfinite(score) else float(score)
        self.recorded[rung].append((score, self._order, trial_id))
        self._order += 1
        return "completed" if rung == self.top_rung else "paused"

    def promotable(self, rung: int) -> list[int]:
        """Trials now in the top 1/eta at ``rung`` that have not been promoted yet."""
        results = self.recorded[rung]
        k = max(1, len(results) // self.eta)
        best = sorted(r for r in results if math.isfinite(r[0]))[:k]
        return [tid for _, _, tid in best if tid not in self.promoted[rung]]

    def next_job(self) -> tuple[int, int] | None:
        """(trial id, rung to run) or None when nothing is left to start now."""
        for rung in range(self.top_rung - 1, -1, -1):
            ready = self.promotable(rung)
            if ready:
                self.promoted[rung].add(ready[0])
                return ready[0], rung + 1
        if self.next_new < self.n_trials:
            self.next_new += 1
            return self.next_new - 1, 0
        return None


def classic_successive_halving(scores: Callable[[int, int], float], n_trials: int, eta: int = 2,
                               grace: int = 5, max_budget: int = 40) -> list[list[int]]:
    """Synchronous successive halving; returns the trial ids alive at each rung."""
    alive = list(range(n_trials))
    rungs = [alive]
    budgets = rung_budgets(grace, eta, max_budget)
    for rung, _ in enumerate(budgets[:-1]):
        ranked = sorted(alive, key=lambda t: (scores(t, rung), t))
        alive = ranked[: max(1, len(alive) // eta)]
        rungs.append(alive)
    return rungs


def synchronous_asha(scores: Callable[[int, int], float], n_trials: int, eta: int = 2,
                     grace: int = 5, max_budget: int = 40) -> list[list[int]]:
    """ASHA with every rung's results arriving before any promotion request."""
    sched = Asha(n_trials, eta, grace, max_budget)
    alive = list(range(n_trials))
    rungs = [alive]
    for rung in range(sched.top_rung):
        for t in sorted(alive):  # results arrive in trial order
            sched.report(t, rung, scores(t, rung))
        alive = []
        while (job := _next_at(sched, rung)) is not None:
            alive.append(job)
        rungs.append(alive)
    return rungs


def _next_at(sched: Asha, rung: int) -> int | None:
    ready = sched.promotable(rung)
    if not ready:
        return None
    sched.promoted[rung].add(ready[0])
    return ready[0]


# ---------------------------------------------------------------- simulation


@dataclass
class SimulationResult:
    best_trial: int
    best_score: float
    budget_used: float
    exhaustive_budget: float
    exhaustive_best: int
    decisions: list[tuple] = field(default_factory=list)

    @property
    def budget_fraction(self) -> float:
        return self.budget_used / self.exhaustive_budget


def simulate(objective: Callable[[int, int], float], n_trials: int, eta: int = 2, grace: int = 5,
             max_budget: int = 40, workers: int = 4, duration: Callable[[int], float] | None = None,
             order: list[int] | None = None) -> SimulationResult:
    """Run ASHA on a virtual clock; ``objective(trial, budget)`` is the score after ``budget`` epochs.

    Jobs cost their incremental epochs times ``duration(trial)``; results are
    handled in completion order, so faster trials report first, as on a real
    cluster.
    """
    sched = Asha(n_trials, eta, grace, max_budget)
    order = list(range(n_trials)) if order is None else order
    duration = duration or (lambda t: 1.0)
    clock, seq = 0.0, 0
    running: list[tuple[float, int, int, int]] = []
    used = 0.0
    reached = {}
    decisions = []

    def start():
        nonlocal seq, used
        job = sched.next_job()
        if job is None:
            return False
        tid, rung = job
        prev = sched.budgets[rung - 1] if rung else 0
        step = sched.budgets[rung] - prev
        used += step
        heapq.heappush(running, (clock + step * duration(order[tid]), seq, tid, rung))
        seq += 1
        return True

    while True:
        while len(running) < workers and start():
            pass
        if not running:
            break
        clock, _, tid, rung = heapq.heappop(running)
        score = objective(order[tid], sched.budgets[rung])
        decisions.append((tid, rung, sched.report(tid, rung, score)))
        reached[tid] = (rung, score)
    top = [(s, t) for t, (r, s) in reached.items() if r == sched.top_rung]
    best_score, best = min(top)
    full = sched.budgets[-1]
    exhaustive = min(range(n_trials), key=lambda t: (objective(order[t], full), t))
    return SimulationResult(order[best], best_score, used, float(n_trials * full), order[exhaustive], decisions)


def synthetic_objective(configs: list[dict], seed: int, noise: float = 0.02) -> Callable[[int, int], float]:
    """Seeded score surface: additive option effects, a learning-curve term and rung noise."""
    rng = np.random.default_rng(seed)
    effects = {}
    for key in configs[0]:
        for value in sorted({json.dumps(c[key]) for c in configs}):
            effects[(key, value)] = rng.normal(scale=0.1)
    base = np.array([sum(effects[(k, json.dumps(v))] for k, v in c.items()) for c in configs])
    rate = rng.uniform(0.5, 1.5, size=len(configs))
    noise_seed = int(rng.integers(2**31))

    def objective(trial: int, budget: int) -> float:
        jitter = np.random.default_rng([noise_seed, trial, budget]).normal(scale=noise)
        return float(base[trial] + rate[trial] / budget + jitter)

    return objective


# ---------------------------------------------------------------- real search


class Ledger:
    """Append-only JSON-lines trial ledger."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def repair(self) -> None:
        """Drop a torn final line left by a crash so new events start on a fresh line."""
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            self.path.write_bytes(data[: data.rfind(b"\n") + 1])

    def append(self, **event) -> None:
        event.setdefault("timestamp", time.time())
        with open(self.path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def events(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    try:
                        out.append(json.loads(line))
                    except json.JSONDecodeError:
                        break  # torn final line from a crash
        return out


def decisions(events: list[dict]) -> list[tuple]:
    """The ledger's decision sequence without timestamps (for replay comparisons)."""
    return [(e["event"], e["trial"], e.get("rung"), e.get("score"), e.get("decision")) for e in events
            if e["event"] in ("result", "stop")]


def run_search(evaluate: Callable[[int, dict, int, int], float], configs: list[dict], ledger_path,
               eta: int = 2, grace: int = 5, max_budget: int = 40, resume: bool = False,
               max_jobs: int | None = None) -> list[dict]:
    """Drive ASHA over ``configs``; ``evaluate(trial, config, from_budget, to_budget)`` returns a score.

    Jobs run one at a time in the scheduler's order, so decisions are a pure
    function of the scores. A crashing evaluation scores +inf. With ``resume``
    the ledger is replayed first; jobs it shows as started but unfinished are
    rerun. ``max_jobs`` stops early (used to emulate an interruption).
    Returns completed trials ranked by score.
    """
    ledger = Ledger(ledger_path)
    sched = Asha(len(configs), eta, grace, max_budget)
    pending: list[tuple[int, int]] = []
    if resume:
        ledger.repair()
        pending = _replay(sched, ledger.events())
    elif ledger.path.exists() and ledger.events():
        raise FileExistsError(f"ledger {ledger.path} exists; pass resume=True to continue it")
    else:
        ledger.append(event="search", n_trials=len(configs), eta=eta, grace=grace, max_budget=max_budget,
                      budgets=sched.budgets)
    jobs = 0
    while True:
        if max_jobs is not None and jobs >= max_jobs:
            return []
        if pending:
            tid, rung = pending.pop(0)
        else:
            job = sched.next_job()
            if job is None:
                break
            tid, rung = job
            ledger.append(event="start", trial=tid, rung=rung, config_hash=config_hash(configs[tid]),
                          budget=sched.budgets[rung])
        prev = sched.budgets[rung - 1] if rung else 0
        try:
            score = float(evaluate(tid, configs[tid], prev, sched.budgets[rung]))
            error = None
        except Exception as exc:  # a crashed trial must not end the search
            score, error = math.inf, f"{type(exc).__name__}: {exc}"
            print(f"trial {tid} rung {rung} failed: {error}", file=sys.stderr)
        if not math.isfinite(score):
            score = math.inf
        decision = sched.report(tid, rung, score)
        if error:
            decision = "failed"
        ledger.append(event="result", trial=tid, rung=rung, config_hash=config_hash(configs[tid]),
                      budget=sched.budgets[rung], score=_score_json(score), decision=decision, error=error)
        jobs += 1
    already = {e["trial"] for e in ledger.events() if e["event"] == "stop"}
    for tid in _unpromoted(sched):
        if tid in already:
            continue
        ledger.append(event="stop", trial=tid, rung=None, score=None, decision="stopped",
                      config_hash=config_hash(configs[tid]))
    return rank(ledger.events(), configs)


def _score_json(score: float):
    return score if math.isfinite(score) else "inf"


def _score_value(v) -> float:
    return math.inf if v == "inf" else float(v)


def _unpromoted(sched: Asha) -> list[int]:
    out = []
    for rung in range(sched.top_rung):
        for _, _, tid in sched.recorded[rung]:
            if tid not in sched.promoted[rung]:
                out.append(tid)
    return out


def _replay(sched: Asha, events: list[dict]) -> list[tuple[int, int]]:
    """Rebuild scheduler state from a ledger; return started-but-unfinished jobs."""
    started: list[tuple[int, int]] = []
    for e in events:
        if e["event"] == "search":
            if e["budgets"] != sched.budgets:
                raise ValueError("ledger was written with different rung budgets")
        elif e["event"] == "start":
            tid, rung = e["trial"], e["rung"]
            if rung == 0:
                sched.next_new = max(sched.next_new, tid + 1)
            else:
                sched.promoted[rung - 1].add(tid)
            started.append((tid, rung))
        elif e["event"] == "result":
            sched.report(e["trial"], e["rung"], _score_value(e["score"]))
            started.remove((e["trial"], e["rung"]))
    return started


def trial_states(events: list[dict], configs: list[dict]) -> list[TrialState]:
    """Latest state of every trial mentioned in a ledger."""
    states: dict[int, TrialState] = {}
    for e in events:
        if e["event"] not in ("start", "result", "stop"):
            continue
        st = states.setdefault(e["trial"], TrialState(e["trial"], configs[e["trial"]]))
        if e["event"] == "start":
            st.status = "running"
        elif e["event"] == "result":
            st.rung, st.budget, st.score = e["rung"], e["budget"], _score_value(e["score"])
            st.status = e["decision"]
        else:
            st.status = "stopped"
    for st in states.values():
        if st.status == "paused":
            st.status = "promoted"  # paused below the top rung and never stopped: it was promoted
    return [states[k] for k in sorted(states)]


def rank(events: list[dict], configs: list[dict]) -> list[dict]:
    best: dict[int, dict] = {}
    for e in events:
        if e["event"] == "result":
            prev = best.get(e["trial"])
            if prev is None or e["rung"] >= prev["rung"]:
                best[e["trial"]] = e
    top = max((e["rung"] for e in best.values()), default=0)
    rows = [{"trial": t, "rung": e["rung"], "score": _score_value(e["score"]), "config": configs[t]}
            for t, e in best.items() if e["rung"] == top]
    return sorted(rows, key=lambda r: (r["score"], r["trial"]))


# ---------------------------------------------------------------- training objective


def make_training_evaluator(ds0_train, ds0_val, ds1_train, ds1_val, work_dir, pretrain_epochs: int = 2,
                            seed: int = 0, dtype: str = "float32") -> Callable[[int, dict, int, int], float]:
    """Score = best classification validation loss after pretraining and ``to_budget`` fine-tune epochs.

    Each trial pretrains once (fixed epochs), swaps to the classification
    head and then fine-tunes rung by rung, continuing from its last
    checkpoint. Optimizer moments restart at every rung boundary.
    """
    from .model import load_network, swap_head
    from .training import TrainConfig, load_best, train_classification, train_regression

    work_dir = Path(work_dir)

    def evaluate(trial: int, config: dict, from_budget: int, to_budget: int) -> float:
        tdir = work_dir / f"trial_{trial:04d}"
        net_cfg = network_fields(config)
        if from_budget == 0:
            pre = train_regression(ds0_train, ds0_val, TrainConfig(
                epochs=pretrain_epochs, batch_size=config["batch_size"], seed=seed + trial, dtype=dtype,
                network=net_cfg, checkpoint_dir=str(tdir / "pretrain")))
            network = load_best(pre, dtype)
            swap_head(network, "classification", np.random.default_rng([seed, trial]))
        else:
            network = load_network(tdir / "finetune" / "last.ecgf", np.dtype(dtype))
        res = train_classification(ds1_train, ds1_val, TrainConfig(
            task="classification", epochs=to_budget - from_budget, batch_size=config["batch_size"],
            seed=seed + trial + 7919 * from_budget, dtype=dtype, network=net_cfg,
            checkpoint_dir=str(tdir / "finetune")), network)
        marker = tdir / "best_val_loss.txt"
        best = min(res.val_loss)
        if from_budget and marker.exists():
            best = min(best, float(marker.read_text()))
        marker.write_text(repr(best))
        return best

    return evaluate
