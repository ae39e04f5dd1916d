"""
Servicios de dominio para escenas sintéticas: muestreo, renderizado y preguntas.
"""
from collections import Counter
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, GenerationSkip
from ..models.rng import RngStream
from ..models.scene import (QARecord, SceneConstraints, SceneObject,
                            SceneSpec, Task)
from ..models.tensor import Tensor

BACKGROUND = 0.1
SHAPE_FILL = 0.8
COLOR_VALUES: Dict[str, Tuple[float, float, float]] = {
    'red': (1.0, 0.0, 0.0),
    'green': (0.0, 1.0, 0.0),
    'blue': (0.0, 0.0, 1.0),
    'yellow': (1.0, 1.0, 0.0),
}
OPPOSITE = {'left-of': 'right-of', 'right-of': 'left-of', 'above': 'below', 'below': 'above'}
ZERO_COUNT_RATE = 0.25


def sample_scene(rng: RngStream, constraints: SceneConstraints = SceneConstraints(),
                 grid: Tuple[int, int] = (8, 8)) -> SceneSpec:
    """
    Muestrea una escena: número de objetos uniforme y celdas distintas por rechazo.

    Args:
        rng (RngStream): Flujo aleatorio
        constraints (SceneConstraints): Límites de objetos, formas y colores
        grid (Tuple[int, int]): Cuadrícula (filas, columnas)

    Returns:
        SceneSpec: Escena determinista dado el estado del flujo
    """
    rows, cols = grid
    if (constraints.min_objects < 1 or constraints.max_objects < constraints.min_objects
            or constraints.max_objects > rows * cols or not constraints.shapes or not constraints.colors):
        raise ConfigurationError(f"Restricciones insatisfacibles en una cuadrícula {grid}: {constraints}")
    n = rng.integers(constraints.min_objects, constraints.max_objects + 1)
    used = set()
    objects = []
    while len(objects) < n:
        cell = (rng.integers(0, rows), rng.integers(0, cols))
        if cell in used:
            continue
        used.add(cell)
        objects.append(SceneObject(shape=rng.choice(constraints.shapes),
                                   color=rng.choice(constraints.colors), cell=cell))
    return SceneSpec(grid=grid, objects=tuple(objects))


def _shape_mask(shape: str, ch: int, cw: int) -> np.ndarray:
    side_h, side_w = int(round(SHAPE_FILL * ch)), int(round(SHAPE_FILL * cw))
    top, left = (ch - side_h) // 2, (cw - side_w) // 2
    ys = np.arange(ch)[:, None] + 0.5
    xs = np.arange(cw)[None, :] + 0.5
    if shape == 'square':
        mask = np.zeros((ch, cw), dtype=bool)
        mask[top:top + side_h, left:left + side_w] = True
        return mask
    cy, cx = top + side_h / 2.0, left + side_w / 2.0
    if shape == 'circle':
        return ((ys - cy) / (side_h / 2.0)) ** 2 + ((xs - cx) / (side_w / 2.0)) ** 2 <= 1.0
    if shape == 'triangle':
        frac = (ys - top) / side_h
        inside_rows = (ys >= top) & (ys <= top + side_h)
        return inside_rows & (np.abs(xs - cx) <= frac * side_w / 2.0)
    raise ConfigurationError(f"Forma desconocida: {shape}")


def render(scene: SceneSpec, image_size: int = 64) -> Tensor:
    """
    Dibuja la escena con colores planos sin antialiasing.

    Returns:
        Tensor: Imagen 3×S×S (float32)
    """
    rows, cols = scene.grid
    if image_size % rows != 0 or image_size % cols != 0:
        raise ConfigurationError(f"image_size={image_size} no es divisible por la cuadrícula {scene.grid}")
    ch, cw = image_size // rows, image_size // cols
    image = np.full((3, image_size, image_size), BACKGROUND, dtype=np.float32)
    for obj in scene.objects:
        r, c = obj.cell
        mask = _shape_mask(obj.shape, ch, cw)
        block = image[:, r * ch:(r + 1) * ch, c * cw:(c + 1) * cw]
        for channel, value in enumerate(COLOR_VALUES[obj.color]):
            block[channel][mask] = value
    return Tensor(image)


def _unique_objects(scene: SceneSpec) -> List[SceneObject]:
    counts = Counter((o.color, o.shape) for o in scene.objects)
    return [o for o in scene.sorted_objects() if counts[(o.color, o.shape)] == 1]


def make_relation_q(scene: SceneSpec, rng: RngStream) -> QARecord:
    """
    Pregunta de relación ("is the red square left-of the blue circle ?") con respuesta yes/no.

    La relación verdadera se invierte con probabilidad 1/2, de modo que las
    respuestas quedan balanceadas por construcción.
    """
    unique = _unique_objects(scene)
    if len(unique) < 2:
        raise GenerationSkip("No hay dos objetos descriptibles sin ambigüedad")
    i = rng.integers(0, len(unique))
    j = rng.integers(0, len(unique) - 1)
    if j >= i:
        j += 1
    a, b = unique[i], unique[j]
    axes = []
    if a.cell[1] != b.cell[1]:
        axes.append('horizontal')
    if a.cell[0] != b.cell[0]:
        axes.append('vertical')
    axis = rng.choice(axes)
    if axis == 'horizontal':
        relation = 'left-of' if a.cell[1] < b.cell[1] else 'right-of'
    else:
        relation = 'above' if a.cell[0] < b.cell[0] else 'below'
    answer = 'yes'
    if rng.random() < 0.5:
        relation, answer = OPPOSITE[relation], 'no'
    question = ['is', 'the', a.color, a.shape, relation, 'the', b.color, b.shape, '?']
    meta = {
        'template': 'relation',
        'subject': [a.color, a.shape],
        'object': [b.color, b.shape],
        'relation': relation,
        'target_cells': [list(a.cell), list(b.cell)],
    }
    return QARecord(scene=scene, task=Task.RELATION, question=question, answer=[answer], meta=meta)


def make_count_q(scene: SceneSpec, rng: RngStream) -> QARecord:
    """Pregunta de conteo ("how many red circle ?" o "how many circle ?")."""
    with_color = rng.random() < 0.5
    present = sorted({(o.color, o.shape) if with_color else (o.shape,) for o in scene.objects})
    if with_color:
        universe = [(c, s) for c in COLOR_VALUES for s in ('square', 'circle', 'triangle')]
    else:
        universe = [('square',), ('circle',), ('triangle',)]
    absent = [cat for cat in universe if cat not in present]
    if absent and rng.random() < ZERO_COUNT_RATE:
        category = rng.choice(absent)
    else:
        category = rng.choice(present)

    def matches(obj: SceneObject) -> bool:
        return (obj.color, obj.shape) == category if with_color else obj.shape == category[0]

    hits = [o for o in scene.sorted_objects() if matches(o)]
    if len(hits) > 9:
        raise GenerationSkip("Conteo fuera del conjunto de respuestas 0-9")
    question = ['how', 'many', *category, '?']
    meta = {
        'template': 'count_color_shape' if with_color else 'count_shape',
        'category': list(category),
        'target_cells': [list(o.cell) for o in hits],
    }
    return QARecord(scene=scene, task=Task.COUNT, question=question, answer=[str(len(hits))], meta=meta)


def make_locate_q(scene: SceneSpec, rng: RngStream) -> QARecord:
    """Pregunta de localización; la respuesta son los tokens de fila y columna de la celda."""
    unique = _unique_objects(scene)
    if not unique:
        raise GenerationSkip("Ningún objeto descriptible sin ambigüedad")
    obj = rng.choice(unique)
    r, c = obj.cell
    meta = {'template': 'locate', 'target': [obj.color, obj.shape], 'target_cells': [[r, c]]}
    return QARecord(scene=scene, task=Task.LOCATE, question=['where', 'is', 'the', obj.color, obj.shape, '?'],
                    answer=[f"r{r}", f"c{c}"], meta=meta)


def make_caption(scene: SceneSpec) -> List[str]:
    """Descripción determinista en orden row-major ("a red square at row 1 column 1 . ...")."""
    words: List[str] = []
    for obj in scene.sorted_objects():
        r, c = obj.cell
        words += ['a', obj.color, obj.shape, 'at', 'row', str(r), 'column', str(c), '.']
    return words


QUESTION_MAKERS: Dict[Task, Callable[[SceneSpec, RngStream], QARecord]] = {
    Task.RELATION: make_relation_q,
    Task.COUNT: make_count_q,
    Task.LOCATE: make_locate_q,
}


def generate_records(task: Task, n: int, rng: RngStream, constraints: SceneConstraints = SceneConstraints(),
                     grid: Tuple[int, int] = (8, 8), max_attempts_per_item: int = 100) -> List[QARecord]:
    """
    Genera ``n`` preguntas de una tarea, remuestreando la escena cuando no hay pregunta válida.
    """
    maker = QUESTION_MAKERS[task]
    records: List[QARecord] = []
    failures = 0
    while len(records) < n:
        scene = sample_scene(rng, constraints, grid)
        try:
            records.append(maker(scene, rng))
            failures = 0
        except GenerationSkip:
            failures += 1
            if failures > max_attempts_per_item:
                raise ConfigurationError(f"Las restricciones no permiten generar preguntas de tipo {task.value}")
    return records


def render_batch(scenes: Sequence[SceneSpec], image_size: int = 64) -> np.ndarray:
    """Lote B×3×S×S de imágenes renderizadas."""
    return np.stack([render(scene, image_size).data for scene in scenes])
