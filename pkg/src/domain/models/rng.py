"""
Flujos de números aleatorios reproducibles basados en contador (Philox 4x64).
"""
from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """
    Flujo determinista identificado por (semilla, id de flujo).

    Usa el generador Philox de numpy: la clave de 128 bits es (semilla, flujo)
    y el contador arranca en cero, de modo que flujos con ids distintos son
    disjuntos y la secuencia no depende de la plataforma.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bit_generator = np.random.Philox(key=key)
        self._generator = np.random.Generator(self._bit_generator)

    @property
    def counter(self) -> int:
        """Contador de bloques Philox consumidos (palabra baja)."""
        return int(self._bit_generator.state["state"]["counter"][0])

    def child(self, stream_id: int) -> "RngStream":
        """Flujo derivado con la misma semilla y otro id."""
        return RngStream(self.seed, (self.stream_id * 1_000_003 + int(stream_id) + 1) & _MASK64)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, size, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._generator.standard_normal(size) * scale).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        """Entero(s) en [low, high)."""
        values = self._generator.integers(low, high, size=size)
        return int(values) if size is None else values

    def random(self) -> float:
        return float(self._generator.random())

    def choice(self, items: Sequence):
        return items[self.integers(0, len(items))]

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def shuffle_indices(self, n: int) -> list:
        return [int(i) for i in self.permutation(n)]

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


class Streams:
    """Ids de flujo fijos por propósito; garantizan flujos disjuntos dentro de una celda."""
    ENCODER_INIT = 1
    ENCODER_HEAD_INIT = 2
    CAPTION_INIT = 3
    LM_INIT = 4
    PROJECTION_INIT = 5
    ENCODER_ORDER = 6
    WARMUP_ORDER = 7
    STAGE1_ORDER = 8
    STAGE2_ORDER = 9
    SHUFFLE_PROBE = 10
    SPATIAL_PROBE = 11
    DATA = 1000
