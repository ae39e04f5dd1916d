"""
Codificación posicional rotatoria 1D y 2D (axial) y asignación de posiciones.

Convenciones fijas:
- Se rotan pares entrelazados (2i, 2i+1).
- En 2D, la primera mitad del vector gira con x y la segunda con y, cada una
  con una tabla de frecuencias de dimensión d/2.
- Los tokens de texto reciben (t, t); los parches se desplazan por la longitud
  del texto previo en ambos ejes.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, DimensionError
from ..models.positions import FreqTable, Modality, PeScheme, PosIndex
from ..models.rng import RngStream

DEFAULT_BASE = 10000.0


def make_freqs(head_dim: int, base: float = DEFAULT_BASE) -> FreqTable:
    """
    Construye la tabla de frecuencias de RoPE.

    Args:
        head_dim (int): Dimensión par
        base (float): Base (> 1)

    Returns:
        FreqTable: Tabla con head_dim/2 frecuencias decrecientes
    """
    if head_dim < 2 or head_dim % 2 != 0:
        raise ConfigurationError(f"head_dim debe ser par y >= 2 (recibido {head_dim})")
    if base <= 1:
        raise ConfigurationError(f"La base debe ser > 1 (recibida {base})")
    thetas = tuple(float(base ** (-2.0 * i / head_dim)) for i in range(head_dim // 2))
    return FreqTable(head_dim=head_dim, base=float(base), thetas=thetas)


def _rotate(v: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = v[0::2], v[1::2]
    out = np.empty_like(v, dtype=np.result_type(v, np.float64))
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def apply_rope_1d(v, pos: int, freqs: FreqTable) -> np.ndarray:
    """Rota cada par (v_2i, v_2i+1) por pos·θ_i."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (freqs.head_dim,):
        raise DimensionError("Longitud del vector distinta de head_dim", v.shape, (freqs.head_dim,))
    return _rotate(v, pos * freqs.as_array())


def apply_rope_2d(v, pos: PosIndex, freqs: FreqTable) -> np.ndarray:
    """
    RoPE axial: la primera mitad gira con ``pos.x`` y la segunda con ``pos.y``.

    ``freqs`` es la tabla de dimensión d/2 (la de cada mitad).
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[0]
    if d % 4 != 0:
        raise ConfigurationError(f"RoPE 2D requiere d divisible por 4 (recibido {d})")
    if freqs.head_dim != d // 2:
        raise DimensionError("La tabla de frecuencias debe tener dimensión d/2", (freqs.head_dim,), (d // 2,))
    half = d // 2
    thetas = freqs.as_array()
    return np.concatenate([_rotate(v[:half], pos.x * thetas), _rotate(v[half:], pos.y * thetas)])


def assign_positions(text_len: int, grid: Tuple[int, int], scheme: PeScheme,
                     suffix_len: int = 0) -> List[PosIndex]:
    """
    Asigna posiciones a [texto previo; parches de imagen; texto posterior].

    Args:
        text_len (int): Tokens de texto antes de la imagen
        grid (Tuple[int, int]): (filas, columnas) de parches
        scheme (PeScheme): Esquema 1D o 2D
        suffix_len (int): Tokens de texto después de la imagen

    Returns:
        List[PosIndex]: Una posición por token, en el orden de la secuencia
    """
    rows, cols = grid
    if text_len < 0 or suffix_len < 0 or rows < 1 or cols < 1:
        raise ConfigurationError(f"Disposición inválida: text_len={text_len}, grid={grid}, suffix_len={suffix_len}")
    positions = [PosIndex(t, t, Modality.TEXT) for t in range(text_len)]
    if scheme == PeScheme.ROPE_1D:
        t = text_len
        for _ in range(rows * cols):
            positions.append(PosIndex(t, t, Modality.IMAGE))
            t += 1
        start = t
    else:
        for r in range(rows):
            for c in range(cols):
                positions.append(PosIndex(text_len + c, text_len + r, Modality.IMAGE))
        start = text_len + max(rows, cols)
    positions.extend(PosIndex(start + j, start + j, Modality.TEXT) for j in range(suffix_len))
    return positions


def rotation_angles(positions: Sequence[PosIndex], scheme: PeScheme, head_dim: int,
                    base: float = DEFAULT_BASE) -> np.ndarray:
    """
    Tabla de ángulos (T, head_dim/2) para ``ops.rotate_pairs``; coincide con
    apply_rope_1d / apply_rope_2d aplicadas vector a vector.
    """
    xs = np.array([p.x for p in positions], dtype=np.float64)
    if scheme == PeScheme.ROPE_1D:
        return xs[:, None] * make_freqs(head_dim, base).as_array()[None, :]
    if head_dim % 4 != 0:
        raise ConfigurationError(f"RoPE 2D requiere head_dim divisible por 4 (recibido {head_dim})")
    ys = np.array([p.y for p in positions], dtype=np.float64)
    thetas = make_freqs(head_dim // 2, base).as_array()
    return np.concatenate([xs[:, None] * thetas[None, :], ys[:, None] * thetas[None, :]], axis=1)


def shuffle_image_positions(positions: Sequence[PosIndex], rng: Optional[RngStream],
                            permutation: Optional[Sequence[int]] = None) -> List[PosIndex]:
    """
    Permuta las posiciones de los tokens de imagen entre sí (el contenido no se mueve).

    Args:
        positions (Sequence[PosIndex]): Posiciones originales
        rng (Optional[RngStream]): Fuente de la permutación aleatoria
        permutation (Optional[Sequence[int]]): Permutación explícita (prioritaria)

    Returns:
        List[PosIndex]: Posiciones con los índices de imagen reordenados
    """
    image_slots = [i for i, p in enumerate(positions) if p.modality == Modality.IMAGE]
    if permutation is None:
        permutation = rng.shuffle_indices(len(image_slots))
    if sorted(permutation) != list(range(len(image_slots))):
        raise ConfigurationError("La permutación no cubre los tokens de imagen")
    shuffled = list(positions)
    for slot, source in zip(image_slots, permutation):
        shuffled[slot] = positions[image_slots[source]]
    return shuffled


def attention_logits(queries: np.ndarray, keys: np.ndarray, positions: Sequence[PosIndex],
                     scheme: PeScheme, base: float = DEFAULT_BASE) -> np.ndarray:
    """Logits q·k entre todos los pares tras rotar consultas y claves (herramienta de verificación)."""
    d = queries.shape[1]
    angles = rotation_angles(positions, scheme, d, base)
    rq = np.stack([_rotate(q, a) for q, a in zip(queries, angles)])
    rk = np.stack([_rotate(k, a) for k, a in zip(keys, angles)])
    return rq @ rk.T


def text_positions(length: int, start: int = 0) -> List[PosIndex]:
    """Posiciones (t, t) de una secuencia sólo de texto."""
    return [PosIndex(t, t, Modality.TEXT) for t in range(start, start + length)]
