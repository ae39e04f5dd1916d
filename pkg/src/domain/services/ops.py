"""
Operaciones diferenciables sobre Tensor.

Convenciones de difusión: sólo se admite la misma forma, un vector sobre las
filas (forma ``(d,)`` contra ``(..., d)``) o un escalar (tamaño 1). Cualquier
otra combinación exige un ``reshape`` explícito.
"""
import math
from typing import Optional, Sequence

import numpy as np

from ..exceptions import DimensionError
from ..models.tensor import Tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(value, dtype=dtype))


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1:
        return "scalar"
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "rows"
    raise DimensionError("Difusión no soportada", a.shape, b.shape)


def _reduce_to(grad: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == "same":
        return grad
    if kind == "scalar":
        return np.asarray(grad.sum()).reshape(shape)
    return grad.reshape(-1, shape[0]).sum(axis=0)


# --- Elementales -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Suma elemento a elemento (b puede ser vector sobre filas o escalar)."""
    b = _as_tensor(b, a)
    kind = _broadcast_kind(a, b)

    def backward(g):
        return g, _reduce_to(g, kind, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(_as_tensor(b, a), -1.0))


def mul(a: Tensor, b) -> Tensor:
    """Producto elemento a elemento (b puede ser vector sobre filas o escalar)."""
    b = _as_tensor(b, a)
    kind = _broadcast_kind(a, b)

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, kind, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiplica por una constante."""
    factor = float(factor)
    return Tensor.from_op(a.data * a.dtype.type(factor), (a,), lambda g: (g * factor,), "scale")


def add_constant(a: Tensor, constant: np.ndarray) -> Tensor:
    """Suma un arreglo constante difundible con numpy (máscaras de atención); sin gradiente hacia la constante."""
    out = a.data + constant.astype(a.dtype, copy=False)
    if out.shape != a.shape:
        raise DimensionError("La constante no puede cambiar la forma", a.shape, constant.shape)
    return Tensor.from_op(out, (a,), lambda g: (g,), "add_constant")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def gelu(a: Tensor) -> Tensor:
    """GELU con la aproximación tanh."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t ** 2
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * d,)

    return Tensor.from_op(out, (a,), backward, "gelu")


# --- Forma -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def transpose_last(a: Tensor) -> Tensor:
    """Intercambia los dos últimos ejes."""
    return Tensor.from_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def gather_rows(table: Tensor, indices) -> Tensor:
    """
    Selecciona filas del primer eje; la salida tiene forma ``indices.shape + table.shape[1:]``.
    Índices repetidos acumulan gradiente.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"Índice fuera de rango para {table.shape[0]} filas")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (grad,)

    return Tensor.from_op(table.data[idx], (table,), backward, "gather_rows")


def embedding_lookup(table: Tensor, token_ids) -> Tensor:
    """Busca los embeddings de ``token_ids`` en la tabla (vocabulario × d)."""
    return gather_rows(table, token_ids)


# --- Reducciones -----------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor.from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return Tensor.from_op(a.data.mean(axis=axis), (a,), backward, "mean")


# --- Álgebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Producto matricial. ``a`` puede tener ejes de lote iniciales; ``b`` es
    ``k×n`` (compartida) o tiene los mismos ejes de lote que ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("Dimensiones internas distintas en matmul", a.shape, b.shape)
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError("Ejes de lote distintos en matmul", a.shape, b.shape)

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            k, n = b.shape
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax sobre el último eje, con resta del máximo por estabilidad."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalización por vector (último eje) seguida de la transformación afín."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("gain/bias deben coincidir con el último eje", x.shape, gain.shape)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        grad_x = inv_std / d * (
            d * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        flat = g.reshape(-1, d)
        return grad_x, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return Tensor.from_op(out, (x, gain, bias), backward, "layer_norm")


def normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide cada vector (último eje) por su norma L2."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor.from_op(y, (x,), backward, "normalize")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """
    Rota los pares entrelazados (2i, 2i+1) del último eje por ángulos fijos.

    ``cos`` y ``sin`` tienen la forma de ``x[..., ::2]`` o son difundibles a ella.
    """
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = ge * cos + go * sin
        grad[..., 1::2] = -ge * sin + go * cos
        return (grad,)

    return Tensor.from_op(out, (x,), backward, "rotate_pairs")


# --- Pérdidas --------------------------------------------------------------

def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """
    Media de -log softmax(logits)[target] sobre las filas.

    Args:
        logits (Tensor): Forma m×V
        targets (Sequence[int]): Un índice por fila

    Returns:
        Tensor: Pérdida escalar
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, v = logits.shape
    if t.shape[0] != m:
        raise DimensionError("Número de objetivos distinto del número de filas", logits.shape, t.shape)
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"Objetivo fuera de rango para un vocabulario de {v}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(m)
    loss = -log_probs[rows, t].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, t] -= 1.0
        return (grad * (g / m),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def mse(prediction: Tensor, target: np.ndarray) -> Tensor:
    """Error cuadrático medio contra un objetivo constante."""
    target = np.asarray(target, dtype=prediction.dtype)
    if target.shape != prediction.shape:
        raise DimensionError("Predicción y objetivo con formas distintas", prediction.shape, target.shape)
    diff = prediction.data - target
    n = diff.size
    return Tensor.from_op(np.asarray((diff ** 2).mean(), dtype=prediction.dtype), (prediction,),
                          lambda g: (g * 2.0 * diff / n,), "mse")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out

