"""
Servicio de dominio del entrenamiento del modelo fusionado: calentamiento del
modelo de lenguaje, etapa 1 (sólo W) y etapa 2 (todo el modelo).
"""
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

from ..exceptions import ContractViolation, FreezeContractError, NonFiniteError
from ..models.rng import RngStream
from ..models.scene import CAPTION_PROMPT, QARecord, SceneSpec, Vocab
from ..models.tensor import Tensor
from .fusion_service import (ENCODER_GROUP, LM_GROUP, PROJECTION_GROUP, FusionModel, build_sequence,
                             forward_loss, text_loss)
from .optimizer import Adam, learning_rate
from .scene_service import make_caption, render_batch
from ...utils.logger import get_logger

logger = get_logger("training")

EpochCallback = Callable[[int, FusionModel], None]


@dataclass
class StageResult:
    """Resultado de una etapa: curva de pérdida, filas de registro y huellas por grupo."""
    stage: str
    loss_curve: List[float] = field(default_factory=list)
    log_rows: List[Dict] = field(default_factory=list)
    digests_before: Dict[str, str] = field(default_factory=dict)
    digests_after: Dict[str, str] = field(default_factory=dict)

    def changed_groups(self) -> List[str]:
        return [g for g, d in self.digests_before.items() if self.digests_after.get(g) != d]


def epoch_batches(rng: RngStream, n_items: int, batch: int) -> Iterator[List[int]]:
    """Lotes de una época en el orden de una permutación del flujo (el último puede ser menor)."""
    order = rng.shuffle_indices(n_items)
    for start in range(0, n_items, batch):
        yield order[start:start + batch]


def _step_batches(rng: RngStream, n_items: int, batch: int, steps: int) -> Iterator[List[int]]:
    if n_items < 1:
        raise ContractViolation("No hay ítems de entrenamiento")
    produced = 0
    while produced < steps:
        for indices in epoch_batches(rng, n_items, batch):
            if len(indices) < min(batch, n_items):
                continue
            yield indices
            produced += 1
            if produced >= steps:
                return


def _train(stage: str, model: FusionModel, trainable: Callable[[str], bool],
           loss_fn: Callable[[Sequence[int]], Tensor], batches: Iterator[List[int]], total_steps: int,
           lr: float, warmup: int, log_every: int, epoch_size: Optional[int] = None,
           on_epoch_end: Optional[EpochCallback] = None) -> StageResult:
    result = StageResult(stage=stage, digests_before=model.group_digests())
    model.store.set_trainable(trainable)
    optimizer = Adam(model.store, model.store.trainable_names())
    for step, indices in enumerate(batches):
        started = time.perf_counter()
        rate = learning_rate(step, total_steps, lr, warmup)
        optimizer.zero_grad()
        try:
            loss = loss_fn(indices)
            loss.backward()
            optimizer.step(rate, step_number=step)
        except NonFiniteError as e:
            logger.error(f"{stage}: valores no finitos en el paso {step}")
            raise NonFiniteError(f"{stage}: {e}", step=step) from e
        value = loss.item()
        epoch = step // epoch_size if epoch_size else 0
        result.loss_curve.append(value)
        result.log_rows.append({'stage': stage, 'epoch': epoch, 'step': step, 'loss': value, 'lr': rate,
                                'wall_ms': (time.perf_counter() - started) * 1000.0})
        if log_every and (step % log_every == 0 or step == total_steps - 1):
            logger.info(f"{stage} paso {step}/{total_steps} pérdida={value:.4f} lr={rate:.2e}")
        if epoch_size and on_epoch_end is not None and (step + 1) % epoch_size == 0:
            on_epoch_end(epoch, model)
    model.store.set_trainable(lambda name: True)
    result.digests_after = model.group_digests()
    return result


def caption_tokens(scene: SceneSpec, vocab: Vocab) -> List[int]:
    return vocab.encode(make_caption(scene))


def warmup_lm(model: FusionModel, scenes: List[SceneSpec], rng: RngStream, steps: int, lr: float,
              batch: int, warmup: int = 0, log_every: int = 50) -> StageResult:
    """
    Entrena sólo el modelo de lenguaje con las descripciones como texto puro
    ([BOS] descripción [EOS]).
    """
    texts = [[Vocab.BOS] + caption_tokens(s, model.vocab) + [Vocab.EOS] for s in scenes]

    def loss_fn(indices: Sequence[int]) -> Tensor:
        return text_loss(model, [texts[i] for i in indices])

    batches = _step_batches(rng, len(texts), batch, steps)
    return _train("warmup", model, lambda n: n.startswith(LM_GROUP), loss_fn, batches, steps, lr, warmup,
                  log_every)


def train_stage1(model: FusionModel, scenes: List[SceneSpec], rng: RngStream, steps: int, lr: float,
                 batch: int, warmup: int = 0, log_every: int = 50) -> StageResult:
    """
    Etapa 1: sólo W se actualiza, con pares imagen-descripción como respuesta
    a la instrucción fija de descripción.

    Raises:
        FreezeContractError: Si cambia cualquier parámetro fuera de W
    """
    hyper = model.hyper
    prompt = model.vocab.encode(CAPTION_PROMPT)
    captions = [caption_tokens(s, model.vocab) for s in scenes]

    def loss_fn(indices: Sequence[int]) -> Tensor:
        sequences = [build_sequence(None, prompt, captions[i], model.variant.pe, hyper.patch_grid,
                                    hyper.max_seq_len) for i in indices]
        return forward_loss(model, sequences, images=render_batch([scenes[i] for i in indices], hyper.image_size))

    batches = _step_batches(rng, len(scenes), batch, steps)
    result = _train("stage1", model, lambda n: n.startswith(PROJECTION_GROUP), loss_fn, batches, steps, lr,
                    warmup, log_every)
    frozen = [g for g in result.changed_groups() if g != PROJECTION_GROUP.rstrip(".")]
    if frozen:
        raise FreezeContractError(f"La etapa 1 modificó grupos congelados: {frozen}")
    logger.info(f"Etapa 1 verificada: sólo cambió W (huellas de {ENCODER_GROUP} y {LM_GROUP} intactas)")
    return result


def train_stage2(model: FusionModel, records: List[QARecord], rng: RngStream, epochs: int, lr: float,
                 batch: int, warmup: int = 0, log_every: int = 50,
                 on_epoch_end: Optional[EpochCallback] = None) -> StageResult:
    """
    Etapa 2: ajuste de instrucciones sobre las preguntas de todas las tareas,
    actualizando tronco del codificador, W y modelo de lenguaje.

    Args:
        on_epoch_end (Optional[EpochCallback]): Se llama al final de cada época (checkpoints)
    """
    if not records:
        raise ContractViolation("La etapa 2 necesita al menos un ítem")
    hyper = model.hyper
    questions = [r.question_ids(model.vocab) for r in records]
    answers = [r.answer_ids(model.vocab) for r in records]
    steps_per_epoch = math.ceil(len(records) / batch)

    def loss_fn(indices: Sequence[int]) -> Tensor:
        sequences = [build_sequence(None, questions[i], answers[i], model.variant.pe, hyper.patch_grid,
                                    hyper.max_seq_len) for i in indices]
        images = render_batch([records[i].scene for i in indices], hyper.image_size)
        return forward_loss(model, sequences, images=images)

    def batches() -> Iterator[List[int]]:
        for _ in range(epochs):
            yield from epoch_batches(rng, len(records), batch)

    return _train("stage2", model, lambda n: True, loss_fn, batches(), epochs * steps_per_epoch, lr, warmup,
                  log_every, epoch_size=steps_per_epoch, on_epoch_end=on_epoch_end)
