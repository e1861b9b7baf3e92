"""Finite-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from .errors import NumericError
from .tensor import Tensor, no_grad

# Smallest step tried when shrinking the perturbation away from a kink.
MIN_REFINED_STEP = 1e-9


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, 1e-8)`` elementwise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradient_check(
    network: Callable[[Tensor], Tensor],
    inputs: Tensor,
    loss_fn: Callable[[Tensor], Tensor],
    perturbation: float = 1e-5,
    *,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    check_input: bool = False,
    refine_kinks: bool = True,
    report: dict | None = None,
) -> float:
    """Largest relative error between autodiff and central differences.

    Every scalar of every parameter (and of ``inputs`` when ``check_input``)
    is perturbed by ``+-perturbation``. ``max_per_tensor`` restricts the check
    to that many randomly chosen scalars per tensor, for networks too large to
    sweep exhaustively.

    ReLU, max pooling and the SmoothL1 joint are only piecewise smooth. With
    ``refine_kinks`` the branch decisions of every forward pass are compared to
    the unperturbed ones; when a ``+-h`` probe flips any of them the step is
    divided by 10 (down to 1e-9) until it no longer does, and a scalar sitting
    exactly on a tie is skipped. Counts go into ``report`` when given.
    """
    if not 1e-7 <= perturbation <= 1e-3:
        raise ValueError("perturbation must lie in [1e-7, 1e-3]")
    params = list(network.parameters()) if hasattr(network, "parameters") else []
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError("non-finite parameter")
    targets = list(params)
    if check_input:
        inputs.requires_grad = True
        targets.append(inputs)

    for t in targets:
        t.grad = None
    loss = loss_fn(network(inputs))
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {loss.data}")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    def evaluate() -> tuple[float, list]:
        trace: list = []
        F._decision_trace = trace
        try:
            with no_grad():
                value = float(loss_fn(network(inputs)).data)
        finally:
            F._decision_trace = None
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value}")
        return value, trace

    def same_branches(a: list, b: list) -> bool:
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    _, baseline = evaluate()
    counts = {"checked": 0, "refined": 0, "skipped": 0}

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, grad in zip(targets, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view, so writes perturb t
        indices = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            indices = rng.choice(flat.size, size=max_per_tensor, replace=False)
        g = grad.reshape(-1)
        for i in indices:
            original = flat[i]
            step = perturbation
            while True:
                flat[i] = original + step
                up, up_trace = evaluate()
                flat[i] = original - step
                down, down_trace = evaluate()
                flat[i] = original
                smooth = same_branches(up_trace, baseline) and same_branches(down_trace, baseline)
                if smooth or not refine_kinks or step / 10 < MIN_REFINED_STEP:
                    break
                step /= 10
            if refine_kinks and not smooth:
                counts["skipped"] += 1
                continue
            counts["checked"] += 1
            counts["refined"] += step != perturbation
            numeric = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(np.float64(g[i]), np.float64(numeric))))
    if report is not None:
        report.update(counts)
    return worst
