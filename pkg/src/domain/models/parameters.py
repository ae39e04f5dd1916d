"""
Almacén ordenado de parámetros con nombres canónicos.
"""
import hashlib
from typing import Callable, Dict, Iterable, Iterator, List, Optional

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """
    Mapa nombre canónico → Tensor entrenable.

    Los nombres usan puntos como separador (``lm.blocks.0.attn.wq``) y el orden
    de inserción es el orden de serialización.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"Parámetro duplicado: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def census(self, prefix: str = "") -> int:
        """Número de escalares bajo un prefijo."""
        return int(sum(self._params[n].data.size for n in self.names(prefix)))

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """SHA-256 de los bytes (nombre, forma, datos) de los parámetros indicados."""
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self._params):
            data = np.ascontiguousarray(self._params[name].data)
            h.update(name.encode("utf-8"))
            h.update(str(data.shape).encode("ascii"))
            h.update(data.tobytes())
        return h.hexdigest()

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, tensor in self._params.items():
            tensor.requires_grad = bool(predicate(name))
            tensor.grad = None

    def trainable_names(self) -> List[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    def merge(self, other: "ParameterStore") -> None:
        for name in other:
            if name in self._params:
                raise KeyError(f"Parámetro duplicado: {name}")
            self._params[name] = other[name]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], dtype=np.float32) -> "ParameterStore":
        store = cls()
        for name, data in arrays.items():
            store.add(name, np.asarray(data, dtype=dtype))
        return store

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore.from_arrays(self.to_arrays(), dtype=dtype)
