"""
Optimizador Adam con estado desacoplado por parámetro y calendario de tasa de aprendizaje.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from ..exceptions import NonFiniteError
from ..models.parameters import ParameterStore
from ..models.tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """Momentos de primer y segundo orden de un parámetro."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(param: Tensor, state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """
    Aplica una actualización de Adam in situ usando ``param.grad``.

    Args:
        param (Tensor): Parámetro con gradiente acumulado
        state (AdamState): Estado propio de este parámetro
        lr (float): Tasa de aprendizaje
    """
    if param.grad is None:
        return
    g = param.grad
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    param.data = (param.data - update).astype(param.dtype, copy=False)


@dataclass
class Adam:
    """Adam sobre un subconjunto con nombre de un ParameterStore."""
    store: ParameterStore
    names: Iterable[str]
    states: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        self.names = list(self.names)
        for name in self.names:
            self.states[name] = AdamState.zeros_like(self.store[name])

    def zero_grad(self) -> None:
        for name in self.store.names():
            self.store[name].zero_grad()

    def step(self, lr: float, step_number: Optional[int] = None) -> None:
        for name in self.names:
            param = self.store[name]
            if param.grad is not None and not np.all(np.isfinite(param.grad)):
                raise NonFiniteError(f"Gradiente no finito en '{name}'", step=step_number)
            adam_step(param, self.states[name], lr)


def learning_rate(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Calentamiento lineal seguido de decaimiento coseno hasta 10% de la tasa base."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))
