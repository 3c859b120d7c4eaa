"""AdamW with decoupled weight decay and a per-step cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from app.errors import ConfigError, GradError
from app.tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps, no warmup."""

    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ConfigError(f"step {step} outside schedule range [0, {self.total_steps}]")
        # endpoints are returned as configured so they compare exactly
        if step == 0:
            return self.lr_max
        if step == self.total_steps:
            return self.lr_min
        progress = step / self.total_steps
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * progress))


def lr_at(schedule: CosineSchedule, step: int) -> float:
    return schedule.lr_at(step)


@dataclass
class AdamWState:
    """
    Moment buffers and hyperparameters of one AdamW optimizer.

    ``no_decay`` names parameters excluded from weight decay (biases).
    """

    weight_decay: float = 1e-4
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def adamw_step(params: Mapping[str, Tensor], state: AdamWState, lr: float) -> None:
    """
    Apply one AdamW update in place.

    The decay factor multiplies the parameter before the adaptive step, so
    with zero gradients theta follows theta * (1 - lr * weight_decay) exactly.

    Args:
        params: Trainable parameters by name; frozen parameters must not be listed.
        state: Optimizer state, updated in place.
        lr: Learning rate for this step.

    Raises:
        GradError: If a listed parameter has no gradient buffer.
    """
    for name, p in params.items():
        if p.grad is None:
            raise GradError(f"parameter {name!r} has no gradient")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        if state.weight_decay and name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps))


class AdamW:
    """Convenience wrapper binding a parameter set to its AdamWState."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 1e-4, no_decay: Optional[Iterable[str]] = None):
        self.params = dict(params)
        if no_decay is None:
            no_decay = [name for name in self.params if name.endswith(".bias")]
        self.state = AdamWState(weight_decay=weight_decay, no_decay=frozenset(no_decay))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr)
