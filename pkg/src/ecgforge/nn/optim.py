"""Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(np.asarray(p)) for p in params]
        state.second_moment = [np.zeros_like(np.asarray(p)) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``None`` gradients are treated as zero.
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("params, grads and optimiser state differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"optimiser state shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Adam over a list of parameter tensors (gradients read from ``.grad``)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            [p.data for p in self.params], learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps
        )

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
