"""
Verificación de gradientes por diferencias finitas centrales.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..exceptions import ConfigurationError, GradCheckEvaluationError, NonFiniteError
from ..models.tensor import Tensor


@dataclass
class GradCheckReport:
    """Resultado de comparar el gradiente de la cinta con diferencias finitas."""
    passed: bool
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    def to_dict(self):
        return {
            'passed': self.passed,
            'max_rel_error': self.max_rel_error,
            'worst_index': self.worst_index,
        }


def _call(f: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    try:
        return f(x)
    except NonFiniteError as e:
        raise GradCheckEvaluationError(f"f produjo valores no finitos: {e}") from e


def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    value = _call(f, Tensor(data, requires_grad=False))
    scalar = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(scalar):
        raise GradCheckEvaluationError("f devolvió un valor no finito")
    return scalar


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: float = 1e-5, floor: float = 1e-3) -> GradCheckReport:
    """
    Compara el gradiente de la cinta con (f(x+h) - f(x-h)) / 2h coordenada a coordenada.

    Args:
        f (Callable): Función escalar de un Tensor
        x (Tensor): Punto de evaluación
        h (float): Paso de la diferencia
        tol (float): Error relativo máximo admitido
        floor (float): Cota inferior del denominador del error relativo

    Returns:
        GradCheckReport: Informe con el error relativo máximo
    """
    if h <= 0:
        raise ConfigurationError(f"h debe ser positivo (recibido {h})")
    base = np.array(x.data, copy=True)
    point = Tensor(base.copy(), requires_grad=True)
    out = _call(f, point)
    if not np.isfinite(out.data).all():
        raise GradCheckEvaluationError("f devolvió un valor no finito")
    out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[i] += h
        minus = base.copy()
        minus.reshape(-1)[i] -= h
        flat[i] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel.reshape(-1)[worst]) if rel.size else 0.0
    return GradCheckReport(passed=max_rel <= tol, max_rel_error=max_rel, worst_index=worst,
                           analytic=analytic, numeric=numeric)
