"""
Módulo que define el tensor denso con participación opcional en la cinta de gradientes.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import NonFiniteError

# Función de retropropagación: recibe el gradiente de la salida y devuelve
# un gradiente (o None) por cada padre, en el mismo orden.
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    Arreglo numérico denso en orden row-major.

    Los datos viven en un ``np.ndarray``; la precisión la decide el dtype de
    entrada (float32 para entrenar, float64 para las verificaciones de gradiente).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        _ensure_finite(array, name or "tensor")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """
        Crea el resultado de una operación y lo conecta a sus padres.

        Args:
            data (np.ndarray): Valor calculado
            parents (Sequence[Tensor]): Operandos
            backward (BackwardFn): Regla de retropropagación
            op (str): Nombre de la operación (para mensajes de error)

        Returns:
            Tensor: Nodo nuevo; sólo participa en la cinta si algún padre requiere gradiente
        """
        _ensure_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = ""
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad: Optional[np.ndarray] = None) -> "Tape":
        """
        Retropropaga desde este nodo y devuelve la cinta recorrida.

        Args:
            grad (Optional[np.ndarray]): Gradiente inicial; unos si se omite

        Returns:
            Tape: Cinta en orden topológico
        """
        tape = Tape.record(self)
        tape.backward(grad)
        return tape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={self.op})"


def _ensure_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Valores no finitos producidos por '{where}'")


@dataclass
class Tape:
    """
    Cinta de operaciones en orden topológico (padres antes que hijos).

    ``index`` asocia id(nodo) con su posición en ``nodes``.
    """
    nodes: List[Tensor] = field(default_factory=list)
    index: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        tape = cls()
        visited = set()
        # Recorrido iterativo en profundidad (los grafos de atención son profundos)
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.index[id(node)] = len(tape.nodes)
                tape.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return tape

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Recorre la cinta en orden inverso; cada nodo se visita exactamente una vez
        y los gradientes de subexpresiones compartidas se suman.
        """
        if not self.nodes:
            return
        root = self.nodes[-1]
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.data.dtype)
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.data.shape:
                    parent_grad = parent_grad.reshape(parent.data.shape)
                if parent.grad is None:
                    parent.grad = np.array(parent_grad, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + parent_grad

    def __len__(self):
        return len(self.nodes)

    def position(self, node: Tensor) -> int:
        return self.index[id(node)]
