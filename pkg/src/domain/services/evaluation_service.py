"""
Servicio de dominio de evaluación: exactitud por tarea, trazas de atención y sondas.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ContractViolation, VocabMismatchError
from ..models.experiment import AttentionTrace, EvalRecord
from ..models.rng import RngStream
from ..models.scene import QARecord, Task, Vocab, answer_set
from .fusion_service import FusionModel, build_sequence, generate_answers
from .scene_service import render_batch
from ...utils.logger import get_logger

logger = get_logger("evaluation")

PermutationFn = Callable[[int], Optional[Sequence[int]]]


@dataclass
class Prediction:
    """Salida del modelo para un ítem de evaluación."""
    index: int
    task: Task
    predicted: List[str]
    expected: List[str]

    @property
    def correct(self) -> bool:
        return self.predicted == self.expected

    def to_dict(self) -> Dict:
        return {'index': self.index, 'task': self.task.value, 'predicted': " ".join(self.predicted),
                'expected': " ".join(self.expected), 'correct': self.correct}


@dataclass
class EvaluationResult:
    records: List[EvalRecord] = field(default_factory=list)
    predictions: List[Prediction] = field(default_factory=list)

    def accuracy(self, task: Task) -> float:
        return next(r.accuracy for r in self.records if r.task == task.value)


@dataclass
class ShuffleResult:
    """Caída de exactitud al permutar las posiciones de los parches."""
    variant: str
    seed: int
    task: str
    accuracy: float
    shuffled_accuracy: float
    n_items: int

    @property
    def delta(self) -> float:
        return self.shuffled_accuracy - self.accuracy

    def to_dict(self) -> Dict:
        return {'variant': self.variant, 'seed': self.seed, 'task': self.task, 'accuracy': self.accuracy,
                'shuffled_accuracy': self.shuffled_accuracy, 'delta': self.delta, 'n_items': self.n_items}


@dataclass
class SpatialProbeResult:
    """Exactitud de una sonda lineal que decodifica la fila o columna del parche."""
    variant: str
    seed: int
    stage: str
    axis: str
    accuracy: float
    chance: float
    n_train: int
    n_test: int

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def check_vocab(model: FusionModel, records: List[QARecord]) -> None:
    """
    Raises:
        VocabMismatchError: Si el vocabulario del modelo no es el de la cuadrícula de los datos
    """
    if not records:
        return
    expected = Vocab.build(records[0].scene.grid)
    if model.vocab != expected:
        raise VocabMismatchError(f"El vocabulario del checkpoint ({len(model.vocab)} tokens) no coincide con el "
                                 f"de los datos ({len(expected)} tokens, cuadrícula {records[0].scene.grid})")


def _batched(items: Sequence[int], size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def predict(model: FusionModel, records: List[QARecord], batch_size: int = 32,
            permutation_fn: Optional[PermutationFn] = None) -> List[Prediction]:
    """
    Respuestas voraces para cada registro, en el orden de entrada.

    Args:
        permutation_fn (Optional[PermutationFn]): Permutación de posiciones de imagen por ítem
    """
    check_vocab(model, records)
    predictions: List[Prediction] = []
    for chunk in _batched(list(range(len(records))), batch_size):
        images = render_batch([records[i].scene for i in chunk], model.hyper.image_size)
        questions = [records[i].question_ids(model.vocab) for i in chunk]
        perms = [permutation_fn(i) for i in chunk] if permutation_fn else None
        outputs = generate_answers(model, images, questions, image_permutations=perms)
        for i, tokens in zip(chunk, outputs):
            predictions.append(Prediction(index=i, task=records[i].task, predicted=model.vocab.decode(tokens),
                                          expected=list(records[i].answer)))
    return predictions


def score(predictions: List[Prediction], model: FusionModel, wall_ms: float = 0.0) -> List[EvalRecord]:
    """Exactitud por tarea (coincidencia exacta de la secuencia de respuesta), en el orden de Task."""
    records = []
    for task in Task:
        subset = [p for p in predictions if p.task == task]
        if not subset:
            continue
        valid = answer_set(task, model.hyper.grid)
        correct = sum(1 for p in subset if p.correct and tuple(p.predicted) in valid)
        records.append(EvalRecord.from_counts(model.variant, task, correct, len(subset), wall_ms))
    return records


def evaluate(model: FusionModel, records: List[QARecord], batch_size: int = 32) -> EvaluationResult:
    """
    Evalúa por coincidencia exacta sobre el conjunto de evaluación.

    Args:
        model (FusionModel): Modelo entrenado
        records (List[QARecord]): Ítems de evaluación de una o varias tareas

    Returns:
        EvaluationResult: Un EvalRecord por tarea y las predicciones individuales
    """
    started = time.perf_counter()
    predictions = predict(model, records, batch_size)
    wall_ms = (time.perf_counter() - started) * 1000.0
    result = EvaluationResult(records=score(predictions, model, wall_ms), predictions=predictions)
    for record in result.records:
        logger.info(f"{record.variant} s{record.seed} {record.task}: exactitud={record.accuracy:.3f} "
                    f"({record.n_items} ítems)")
    return result


def target_patches(cells: Sequence[Tuple[int, int]], grid: Tuple[int, int], patch_grid: Tuple[int, int],
                   image_size: int) -> List[int]:
    """Índices row-major de los parches cuyo recuadro de píxeles se solapa con alguna de las celdas."""
    cell_h, cell_w = image_size // grid[0], image_size // grid[1]
    patch_h, patch_w = image_size // patch_grid[0], image_size // patch_grid[1]
    hits = set()
    for r, c in cells:
        y0, y1, x0, x1 = r * cell_h, (r + 1) * cell_h, c * cell_w, (c + 1) * cell_w
        for pr in range(patch_grid[0]):
            if pr * patch_h >= y1 or (pr + 1) * patch_h <= y0:
                continue
            for pc in range(patch_grid[1]):
                if pc * patch_w >= x1 or (pc + 1) * patch_w <= x0:
                    continue
                hits.add(pr * patch_grid[1] + pc)
    return sorted(hits)


def diagnose_attention(model: FusionModel, records: List[QARecord], max_items: int = 200,
                       batch_size: int = 16) -> List[AttentionTrace]:
    """
    Registra la atención desde la posición que predice el primer token de la
    respuesta (el último token de la pregunta) hacia los tokens de imagen.

    Sólo se usan ítems con celdas objetivo en sus metadatos.
    """
    check_vocab(model, records)
    hyper = model.hyper
    chosen = [i for i, r in enumerate(records) if r.target_cells()][:max_items]
    traces: List[AttentionTrace] = []
    num_patches = hyper.num_patches
    with model.inference():
        for chunk in _batched(chosen, batch_size):
            sequences = [build_sequence(None, records[i].question_ids(model.vocab), None, model.variant.pe,
                                        hyper.patch_grid, hyper.max_seq_len) for i in chunk]
            capture: List[np.ndarray] = []
            model.hidden_states(sequences, images=render_batch([records[i].scene for i in chunk], hyper.image_size),
                                capture=capture)
            stacked = np.stack(capture, axis=1)  # (B, capas, cabezas, T, T)
            for b, i in enumerate(chunk):
                query = sequences[b].length - 1
                rows = stacked[b, :, :, query, :]
                traces.append(AttentionTrace(
                    variant=model.variant.variant_id, seed=model.variant.seed, item_index=i,
                    task=records[i].task.value, weights=rows[..., :num_patches].astype(np.float64),
                    row_sums=rows.astype(np.float64).sum(axis=-1),
                    target_patches=target_patches(records[i].target_cells(), hyper.grid, hyper.patch_grid,
                                                  hyper.image_size)))
    return traces


def patch_shuffle_probe(model: FusionModel, records: List[QARecord], rng: Optional[RngStream],
                        permutation_fn: Optional[PermutationFn] = None,
                        batch_size: int = 32) -> List[ShuffleResult]:
    """
    Evalúa dos veces: normal y con las posiciones de los tokens de imagen
    permutadas (las características no se mueven).

    Args:
        rng (Optional[RngStream]): Fuente de una permutación por ítem
        permutation_fn (Optional[PermutationFn]): Permutación explícita por índice (prioritaria)

    Returns:
        List[ShuffleResult]: Una entrada por tarea
    """
    num_patches = model.hyper.num_patches
    if permutation_fn is None:
        permutations = [rng.shuffle_indices(num_patches) for _ in records]
        permutation_fn = permutations.__getitem__
    normal = score(predict(model, records, batch_size), model)
    shuffled = score(predict(model, records, batch_size, permutation_fn), model)
    results = []
    for before, after in zip(normal, shuffled):
        results.append(ShuffleResult(variant=before.variant, seed=before.seed, task=before.task,
                                     accuracy=before.accuracy, shuffled_accuracy=after.accuracy,
                                     n_items=before.n_items))
        logger.info(f"Sonda de permutación {before.variant} s{before.seed} {before.task}: "
                    f"{before.accuracy:.3f} -> {after.accuracy:.3f}")
    return results


def _ridge_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                    classes: int, ridge: float) -> float:
    def with_bias(x):
        return np.hstack([x, np.ones((x.shape[0], 1))])

    xb = with_bias(train_x)
    onehot = np.eye(classes)[train_y]
    gram = xb.T @ xb + ridge * np.eye(xb.shape[1])
    weights = np.linalg.solve(gram, xb.T @ onehot)
    predicted = np.argmax(with_bias(test_x) @ weights, axis=1)
    return float((predicted == test_y).mean())


def spatial_probe(model: FusionModel, records: List[QARecord], rng: RngStream, max_items: int = 200,
                  ridge: float = 1e-2, batch_size: int = 16) -> List[SpatialProbeResult]:
    """
    Sonda lineal (mínimos cuadrados con regularización) que predice la fila y
    la columna de cada parche a partir de su representación en dos etapas: la
    salida del codificador y los estados finales del modelo de lenguaje.

    Los ítems se reparten por mitades (entrenamiento / prueba) con ``rng``.
    """
    hyper = model.hyper
    items = records[:max_items]
    if len(items) < 2:
        raise ContractViolation("La sonda espacial necesita al menos 2 ítems")
    order = rng.shuffle_indices(len(items))
    split = max(1, len(items) // 2)
    feats: Dict[str, List[np.ndarray]] = {'encoder': [], 'lm': []}
    with model.inference():
        for chunk in _batched(list(range(len(items))), batch_size):
            images = render_batch([items[i].scene for i in chunk], hyper.image_size)
            encoded = model.image_features(images)
            sequences = [build_sequence(None, items[i].question_ids(model.vocab), None, model.variant.pe,
                                        hyper.patch_grid, hyper.max_seq_len) for i in chunk]
            hidden = model.hidden_states(sequences, image_features=encoded)
            feats['encoder'].append(encoded.data.astype(np.float64))
            feats['lm'].append(hidden.data[:, :hyper.num_patches, :].astype(np.float64))
    rows, cols = hyper.patch_grid
    patch_rows = np.repeat(np.arange(rows), cols)
    patch_cols = np.tile(np.arange(cols), rows)
    train_items, test_items = order[:split], order[split:]
    results = []
    for stage, chunks in feats.items():
        data = np.concatenate(chunks, axis=0)
        for axis, labels, classes in (("row", patch_rows, rows), ("col", patch_cols, cols)):
            accuracy = _ridge_accuracy(
                data[train_items].reshape(-1, data.shape[-1]), np.tile(labels, len(train_items)),
                data[test_items].reshape(-1, data.shape[-1]), np.tile(labels, len(test_items)), classes, ridge)
            results.append(SpatialProbeResult(variant=model.variant.variant_id, seed=model.variant.seed,
                                              stage=stage, axis=axis, accuracy=accuracy, chance=1.0 / classes,
                                              n_train=len(train_items), n_test=len(test_items)))
    return results
