"""
Servicios de preentrenamiento del codificador visual: contrastivo global y generativo por parches.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..exceptions import ConfigurationError, NonFiniteError
from ..models.experiment import EncoderVariant
from ..models.parameters import ParameterStore
from ..models.rng import RngStream
from ..models.tensor import Tensor
from . import ops
from .encoder_service import MAX_LOG_TEMPERATURE, CaptionEncoder, VisionEncoder, patchify
from .optimizer import Adam, learning_rate
from ...utils.logger import get_logger

logger = get_logger("pretraining")

ImageBatchFn = Callable[[Sequence[int]], np.ndarray]


@dataclass
class PretrainResult:
    """Curva de pérdida y registro por paso de un preentrenamiento."""
    variant: EncoderVariant
    loss_curve: List[float] = field(default_factory=list)
    log_rows: List[Dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1] if self.loss_curve else float("nan")


def image_embedding(encoder: VisionEncoder, images: np.ndarray) -> Tensor:
    """Vector global normalizado (B, contrastive_dim): media de parches proyectada."""
    pooled = ops.mean_axis(encoder.encode_batch(images), axis=1)
    return ops.normalize_rows(ops.matmul(pooled, encoder.store["encoder.head.contrastive.proj"]))


def contrastive_loss(encoder: VisionEncoder, caption_encoder: CaptionEncoder, images: np.ndarray,
                     captions: List[List[int]]) -> Tensor:
    """
    InfoNCE simétrico sobre un lote de pares (imagen, descripción).

    Args:
        images (np.ndarray): Lote B×3×S×S
        captions (List[List[int]]): Ids de cada descripción

    Returns:
        Tensor: Pérdida escalar; con B pares idénticos vale exactamente ln B
    """
    batch = images.shape[0]
    if batch < 2 or len(captions) != batch:
        raise ConfigurationError(f"El lote contrastivo necesita al menos 2 pares alineados (recibido {batch})")
    image_vec = image_embedding(encoder, images)
    text_vec = ops.normalize_rows(caption_encoder.encode(captions))
    temperature = ops.exp(encoder.store["encoder.head.contrastive.log_temp"])
    logits = ops.mul(ops.matmul(image_vec, ops.transpose_last(text_vec)), temperature)
    targets = np.arange(batch)
    loss_i = ops.cross_entropy(logits, targets)
    loss_t = ops.cross_entropy(ops.transpose_last(logits), targets)
    return ops.scale(ops.add(loss_i, loss_t), 0.5)


def next_patch_loss(encoder: VisionEncoder, tokens, positions: Optional[Sequence[int]] = None) -> Tensor:
    """
    Error cuadrático de predecir el parche t+1 a partir de los parches ≤ t.

    Args:
        tokens: Tokens de parche (B, P, C·ps²), Tensor o arreglo
        positions (Optional[Sequence[int]]): Posiciones t que contribuyen (por defecto 0..P-2)

    Returns:
        Tensor: Pérdida escalar
    """
    if not isinstance(tokens, Tensor):
        tokens = Tensor(np.asarray(tokens, dtype=encoder.store["encoder.patch_embed.weight"].dtype))
    batch, length, patch_dim = tokens.shape
    positions = list(range(length - 1)) if positions is None else list(positions)
    hidden = encoder.features(tokens, causal=True)
    prediction = ops.linear(hidden, encoder.store["encoder.head.generative.weight"],
                            encoder.store["encoder.head.generative.bias"])
    flat = ops.reshape(prediction, (batch * length, patch_dim))
    rows = [b * length + t for b in range(batch) for t in positions]
    target = tokens.data[:, [t + 1 for t in positions], :].reshape(-1, patch_dim)
    return ops.mse(ops.gather_rows(flat, rows), target)


def mean_patch_baseline(images: np.ndarray, patch_size: int) -> float:
    """Pérdida de predecir siempre el parche medio: varianza media por píxel de los parches objetivo."""
    tokens, _ = patchify(images, patch_size)
    targets = tokens[:, 1:, :].reshape(-1, tokens.shape[-1]).astype(np.float64)
    return float(((targets - targets.mean(axis=0)) ** 2).mean())


def retrieval_at_1(encoder: VisionEncoder, caption_encoder: CaptionEncoder, images: np.ndarray,
                   captions: List[List[int]]) -> float:
    """Fracción de imágenes cuya descripción más similar es la propia."""
    image_vec = image_embedding(encoder, images).data
    text_vec = ops.normalize_rows(caption_encoder.encode(captions)).data
    hits = np.argmax(image_vec @ text_vec.T, axis=1) == np.arange(len(captions))
    return float(hits.mean())


def _run(name: str, variant: EncoderVariant, loss_fn: Callable[[np.ndarray], Tensor], optimizer: Adam,
         n_items: int, rng: RngStream, steps: int, lr: float, warmup: int, batch: int,
         log_every: int) -> PretrainResult:
    result = PretrainResult(variant=variant)
    order: List[int] = []
    for step in range(steps):
        # Lotes sin reemplazo dentro de cada pasada; el resto incompleto se descarta
        if len(order) < batch:
            order = rng.shuffle_indices(n_items)
        indices, order = order[:batch], order[batch:]
        started = time.perf_counter()
        optimizer.zero_grad()
        try:
            loss = loss_fn(np.asarray(indices))
            loss.backward()
            rate = learning_rate(step, steps, lr, warmup)
            optimizer.step(rate, step_number=step)
        except NonFiniteError as e:
            raise NonFiniteError(f"{name}: {e}", step=step) from e
        if "encoder.head.contrastive.log_temp" in optimizer.store:
            log_temp = optimizer.store["encoder.head.contrastive.log_temp"]
            log_temp.data = np.minimum(log_temp.data, log_temp.dtype.type(MAX_LOG_TEMPERATURE))
        value = loss.item()
        result.loss_curve.append(value)
        result.log_rows.append({'stage': name, 'step': step, 'loss': value, 'lr': rate,
                                'wall_ms': (time.perf_counter() - started) * 1000.0})
        if log_every and (step % log_every == 0 or step == steps - 1):
            logger.info(f"{name} paso {step}/{steps} pérdida={value:.4f} lr={rate:.2e}")
    return result


def pretrain_contrastive(encoder: VisionEncoder, caption_encoder: CaptionEncoder, image_fn: ImageBatchFn,
                         captions: List[List[int]], rng: RngStream, steps: int, lr: float, batch: int,
                         warmup: int = 0, log_every: int = 50) -> PretrainResult:
    """
    Entrena tronco, cabeza contrastiva y codificador de descripciones con InfoNCE simétrico.

    Args:
        encoder (VisionEncoder): Codificador con cabeza contrastiva
        caption_encoder (CaptionEncoder): Lado de texto
        image_fn (ImageBatchFn): Renderiza el lote de imágenes para unos índices
        captions (List[List[int]]): Descripción de cada índice
        rng (RngStream): Flujo del orden de los lotes

    Returns:
        PretrainResult: Curva de pérdida
    """
    if encoder.variant != EncoderVariant.CONTRASTIVE_GLOBAL:
        raise ConfigurationError("El codificador no tiene cabeza contrastiva")
    if batch < 2 or len(captions) < 2:
        raise ConfigurationError("El preentrenamiento contrastivo necesita lotes de al menos 2 pares")
    batch = min(batch, len(captions))
    store = ParameterStore()
    store.merge(encoder.store)
    store.merge(caption_encoder.store)
    store.set_trainable(lambda n: True)
    optimizer = Adam(store, store.names())

    def loss_fn(indices: np.ndarray) -> Tensor:
        return contrastive_loss(encoder, caption_encoder, image_fn(indices), [captions[i] for i in indices])

    return _run("contrastive", encoder.variant, loss_fn, optimizer, len(captions), rng, steps, lr, warmup,
                batch, log_every)


def pretrain_generative(encoder: VisionEncoder, image_fn: ImageBatchFn, n_items: int, rng: RngStream,
                        steps: int, lr: float, batch: int, warmup: int = 0, log_every: int = 50) -> PretrainResult:
    """Entrena tronco y cabeza generativa con predicción causal del siguiente parche."""
    if encoder.variant != EncoderVariant.GENERATIVE_PATCH:
        raise ConfigurationError("El codificador no tiene cabeza generativa")
    if n_items < 1 or batch < 1:
        raise ConfigurationError("El preentrenamiento generativo necesita al menos una imagen")
    encoder.store.set_trainable(lambda n: True)
    optimizer = Adam(encoder.store, encoder.store.names())

    def loss_fn(indices: np.ndarray) -> Tensor:
        tokens, _ = patchify(image_fn(indices), encoder.hyper.patch_size)
        return next_patch_loss(encoder, tokens)

    return _run("generative", encoder.variant, loss_fn, optimizer, n_items, rng, steps, lr, warmup,
                min(batch, n_items), log_every)
