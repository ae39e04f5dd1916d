"""
Bloques transformer pre-norm compartidos por el codificador visual y el modelo de lenguaje.
"""
import math
from typing import List, Optional

import numpy as np

from ..models.parameters import ParameterStore
from ..models.rng import RngStream
from ..models.tensor import Tensor
from . import ops

MASK_VALUE = -1e9


def init_layer_norm(store: ParameterStore, prefix: str, dim: int, dtype=np.float32) -> None:
    store.add(f"{prefix}.gain", np.ones(dim, dtype=dtype))
    store.add(f"{prefix}.bias", np.zeros(dim, dtype=dtype))


def init_block(store: ParameterStore, prefix: str, dim: int, mlp_ratio: int, rng: RngStream,
               init_scale: float, n_layers: int, dtype=np.float32) -> None:
    """Registra los parámetros de un bloque (atención + MLP) bajo ``prefix``."""
    hidden = dim * mlp_ratio
    # Las proyecciones de salida se escalan por la profundidad
    out_scale = init_scale / math.sqrt(2 * n_layers)
    init_layer_norm(store, f"{prefix}.ln1", dim, dtype)
    for name in ("wq", "wk", "wv"):
        store.add(f"{prefix}.attn.{name}", rng.normal((dim, dim), init_scale, dtype))
    store.add(f"{prefix}.attn.wo", rng.normal((dim, dim), out_scale, dtype))
    init_layer_norm(store, f"{prefix}.ln2", dim, dtype)
    store.add(f"{prefix}.mlp.w1", rng.normal((dim, hidden), init_scale, dtype))
    store.add(f"{prefix}.mlp.b1", np.zeros(hidden, dtype=dtype))
    store.add(f"{prefix}.mlp.w2", rng.normal((hidden, dim), out_scale, dtype))
    store.add(f"{prefix}.mlp.b2", np.zeros(dim, dtype=dtype))


def causal_mask(length: int) -> np.ndarray:
    """Máscara aditiva (T, T): 0 en y bajo la diagonal, MASK_VALUE encima."""
    return np.triu(np.full((length, length), MASK_VALUE, dtype=np.float64), k=1)


def multi_head_attention(x: Tensor, store: ParameterStore, prefix: str, n_heads: int,
                         cos: Optional[np.ndarray], sin: Optional[np.ndarray],
                         mask: Optional[np.ndarray], capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """
    Atención multi-cabeza sobre x (B, T, D); la rotación se aplica sólo a consultas y claves.

    Args:
        cos, sin: Tablas (T, dh/2) o (B, 1, T, dh/2); None desactiva la rotación
        mask: Máscara aditiva difundible a (B, H, T, T)
        capture: Si se indica, recibe las probabilidades de atención (B, H, T, T)
    """
    batch, length, dim = x.shape
    head_dim = dim // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return ops.permute(ops.reshape(t, (batch, length, n_heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(ops.matmul(x, store[f"{prefix}.wq"]))
    k = split_heads(ops.matmul(x, store[f"{prefix}.wk"]))
    v = split_heads(ops.matmul(x, store[f"{prefix}.wv"]))
    if cos is not None:
        q = ops.rotate_pairs(q, cos, sin)
        k = ops.rotate_pairs(k, cos, sin)
    scores = ops.scale(ops.matmul(q, ops.transpose_last(k)), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = ops.add_constant(scores, np.broadcast_to(mask, scores.shape))
    probs = ops.softmax_rows(scores)
    if capture is not None:
        capture.append(probs.data)
    context = ops.matmul(probs, v)
    merged = ops.reshape(ops.permute(context, (0, 2, 1, 3)), (batch, length, dim))
    return ops.matmul(merged, store[f"{prefix}.wo"])


def transformer_block(x: Tensor, store: ParameterStore, prefix: str, n_heads: int,
                      cos: Optional[np.ndarray], sin: Optional[np.ndarray], mask: Optional[np.ndarray],
                      capture: Optional[List[np.ndarray]] = None) -> Tensor:
    h = ops.layer_norm(x, store[f"{prefix}.ln1.gain"], store[f"{prefix}.ln1.bias"])
    x = ops.add(x, multi_head_attention(h, store, f"{prefix}.attn", n_heads, cos, sin, mask, capture))
    h = ops.layer_norm(x, store[f"{prefix}.ln2.gain"], store[f"{prefix}.ln2.bias"])
    h = ops.gelu(ops.linear(h, store[f"{prefix}.mlp.w1"], store[f"{prefix}.mlp.b1"]))
    return ops.add(x, ops.linear(h, store[f"{prefix}.mlp.w2"], store[f"{prefix}.mlp.b2"]))


def rotation_tables(angles: np.ndarray, dtype) -> tuple:
    """cos/sin de una tabla de ángulos, en el dtype del modelo."""
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)
