"""
Módulo que define los modelos de escenas sintéticas, preguntas y vocabulario.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..exceptions import ConfigurationError

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left-of", "right-of", "above", "below")
CAPTION_PROMPT = ("describe", "the", "scene", "?")


class Task(str, Enum):
    RELATION = "relation"
    COUNT = "count"
    LOCATE = "locate"

    @classmethod
    def parse_list(cls, text: str) -> List["Task"]:
        try:
            return [cls(t.strip().lower()) for t in text.split(",") if t.strip()]
        except ValueError as e:
            raise ConfigurationError(f"Tarea desconocida en '{text}'") from e


@dataclass(frozen=True)
class SceneObject:
    """Objeto de color en una celda de la cuadrícula."""
    shape: str
    color: str
    cell: Tuple[int, int]

    def to_dict(self) -> Dict[str, Any]:
        return {'shape': self.shape, 'color': self.color, 'cell': [self.cell[0], self.cell[1]]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneObject":
        return cls(shape=data['shape'], color=data['color'], cell=(int(data['cell'][0]), int(data['cell'][1])))


@dataclass(frozen=True)
class SceneSpec:
    """
    Descripción simbólica de una escena 2D; verdad de referencia para todas las preguntas.
    """
    grid: Tuple[int, int]
    objects: Tuple[SceneObject, ...]

    def __post_init__(self):
        if not self.objects:
            raise ConfigurationError("La escena debe tener al menos un objeto")
        rows, cols = self.grid
        cells = set()
        for obj in self.objects:
            r, c = obj.cell
            if not (0 <= r < rows and 0 <= c < cols):
                raise ConfigurationError(f"Celda {obj.cell} fuera de la cuadrícula {self.grid}")
            if obj.cell in cells:
                raise ConfigurationError(f"Dos objetos en la celda {obj.cell}")
            cells.add(obj.cell)

    def sorted_objects(self) -> List[SceneObject]:
        """Objetos en orden row-major."""
        return sorted(self.objects, key=lambda o: o.cell)

    def to_dict(self) -> Dict[str, Any]:
        return {'grid': [self.grid[0], self.grid[1]], 'objects': [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        return cls(grid=(int(data['grid'][0]), int(data['grid'][1])),
                   objects=tuple(SceneObject.from_dict(o) for o in data['objects']))


@dataclass(frozen=True)
class SceneConstraints:
    min_objects: int = 2
    max_objects: int = 5
    shapes: Tuple[str, ...] = SHAPES
    colors: Tuple[str, ...] = COLORS


class Vocab:
    """
    Biyección token ↔ id.

    Ids reservados: PAD=0, BOS=1, EOS=2, IMG=3 (marca de las posiciones de imagen).
    """
    PAD, BOS, EOS, IMG = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<img>")

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != self.RESERVED:
            raise ConfigurationError("Los cuatro primeros tokens deben ser los reservados")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("Tokens duplicados en el vocabulario")
        self.tokens: List[str] = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, grid: Tuple[int, int] = (8, 8)) -> "Vocab":
        rows, cols = grid
        words = ["a", "at", "row", "column", ".", "is", "the", "how", "many", "where",
                 "describe", "scene", "?", "yes", "no"]
        words += list(COLORS) + list(SHAPES) + list(RELATIONS)
        words += [str(d) for d in range(10)]
        words += [f"r{r}" for r in range(rows)] + [f"c{c}" for c in range(cols)]
        # Números de fila/columna de los pies de imagen por encima de 9
        words += [str(n) for n in range(10, max(rows, cols))]
        return cls(list(cls.RESERVED) + words)

    def __len__(self):
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> List[int]:
        try:
            return [self._ids[w] for w in words]
        except KeyError as e:
            raise ConfigurationError(f"Token fuera del vocabulario: {e.args[0]}") from e

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens


@dataclass
class QARecord:
    """Pregunta con respuesta cerrada sobre una escena."""
    scene: SceneSpec
    task: Task
    question: List[str]
    answer: List[str]
    meta: Dict[str, Any] = field(default_factory=dict)

    def question_ids(self, vocab: Vocab) -> List[int]:
        return vocab.encode(self.question)

    def answer_ids(self, vocab: Vocab) -> List[int]:
        return vocab.encode(self.answer)

    def target_cells(self) -> List[Tuple[int, int]]:
        return [tuple(c) for c in self.meta.get('target_cells', [])]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scene': self.scene.to_dict(),
            'task': self.task.value,
            'question': " ".join(self.question),
            'answer': " ".join(self.answer),
            'meta': self.meta,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QARecord":
        return cls(scene=SceneSpec.from_dict(data['scene']), task=Task(data['task']),
                   question=data['question'].split(), answer=data['answer'].split(),
                   meta=dict(data.get('meta', {})))


def answer_set(task: Task, grid: Tuple[int, int] = (8, 8)) -> Optional[set]:
    """Conjunto cerrado de respuestas válidas (como tuplas de tokens)."""
    if task == Task.RELATION:
        return {("yes",), ("no",)}
    if task == Task.COUNT:
        return {(str(d),) for d in range(10)}
    return {(f"r{r}", f"c{c}") for r in range(grid[0]) for c in range(grid[1])}
