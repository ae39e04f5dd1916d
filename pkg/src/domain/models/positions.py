"""
Modelos de posiciones para la codificación rotatoria (1D y 2D).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Tuple

import numpy as np


class Modality(str, Enum):
    TEXT = "text"
    IMAGE = "image"


class PeScheme(str, Enum):
    """Esquema de codificación posicional del modelo de lenguaje."""
    ROPE_1D = "rope1d"
    ROPE_2D = "rope2d"

    @classmethod
    def parse(cls, value: str) -> "PeScheme":
        return cls(value.strip().lower().replace("-", "").replace("_", ""))


@dataclass(frozen=True)
class FreqTable:
    """
    Frecuencias angulares θ_i = base^(-2i/d) para i en 0..d/2-1.
    """
    head_dim: int
    base: float
    thetas: Tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thetas, dtype=np.float64)


@dataclass(frozen=True)
class PosIndex:
    """Posición de un token: índice horizontal, vertical y modalidad."""
    x: int
    y: int
    modality: Modality = Modality.TEXT

    def shifted(self, dx: int, dy: int) -> "PosIndex":
        return PosIndex(self.x + dx, self.y + dy, self.modality)

    def to_dict(self) -> Dict[str, Any]:
        return {'x': self.x, 'y': self.y, 'modality': self.modality.value}
