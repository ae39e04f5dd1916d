"""
Servicios de dominio del codificador visual: troceado en parches y tronco transformer.

Los dos objetivos de preentrenamiento comparten el mismo tronco; sólo cambian
las cabezas, que se descartan al fusionar.
"""
import math
from typing import List, Optional, Tuple

import numpy as np

from ..exceptions import ConfigurationError, DimensionError
from ..models.experiment import EncoderVariant, Hyperparameters
from ..models.parameters import ParameterStore
from ..models.positions import PeScheme
from ..models.rng import RngStream, Streams
from ..models.scene import Vocab
from ..models.tensor import Tensor
from . import ops
from .rope_service import assign_positions, rotation_angles
from .transformer import causal_mask, init_block, init_layer_norm, rotation_tables, transformer_block

TRUNK_PREFIXES = ("encoder.patch_embed.", "encoder.blocks.", "encoder.ln_f.")
HEAD_PREFIX = "encoder.head."
INITIAL_LOG_TEMPERATURE = math.log(1 / 0.07)
MAX_LOG_TEMPERATURE = math.log(100.0)


def patchify(image, patch_size: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """
    Divide una imagen C×S×S (o un lote B×C×S×S) en parches en orden row-major.

    Cada parche se aplana en orden (canal, y, x).

    Args:
        image: Tensor o arreglo de imagen(es)
        patch_size (int): Lado del parche; debe dividir S

    Returns:
        Tuple[np.ndarray, Tuple[int, int]]: Tokens (P, C·ps²) o (B, P, C·ps²) y la rejilla (filas, columnas)
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    batched = data.ndim == 4
    if not batched:
        data = data[None]
    b, ch, h, w = data.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ConfigurationError(f"patch_size={patch_size} no divide la imagen {h}×{w}")
    rows, cols = h // patch_size, w // patch_size
    tokens = (data.reshape(b, ch, rows, patch_size, cols, patch_size)
              .transpose(0, 2, 4, 1, 3, 5)
              .reshape(b, rows * cols, ch * patch_size * patch_size))
    return (tokens if batched else tokens[0]), (rows, cols)


def unpatchify(tokens: np.ndarray, grid: Tuple[int, int], patch_size: int, channels: int = 3) -> np.ndarray:
    """Inversa exacta de ``patchify`` para una imagen."""
    rows, cols = grid
    return (np.asarray(tokens).reshape(rows, cols, channels, patch_size, patch_size)
            .transpose(2, 0, 3, 1, 4)
            .reshape(channels, rows * patch_size, cols * patch_size))


class VisionEncoder:
    """
    Codificador ViT mínimo: proyección de parches, bloques pre-norm con RoPE 1D
    sobre el orden de los parches y normalización final.
    """

    def __init__(self, variant: EncoderVariant, hyper: Hyperparameters, store: ParameterStore):
        self.variant = variant
        self.hyper = hyper
        self.store = store
        positions = assign_positions(0, hyper.patch_grid, PeScheme.ROPE_1D)
        angles = rotation_angles(positions, PeScheme.ROPE_1D, hyper.enc_dim // hyper.enc_heads, hyper.rope_base)
        self._angles = angles

    @classmethod
    def initialize(cls, variant: EncoderVariant, hyper: Hyperparameters, seed: int,
                   dtype=np.float32) -> "VisionEncoder":
        """
        Inicializa tronco y cabeza. El tronco usa el mismo flujo para ambos
        objetivos, de modo que con la misma semilla arranca idéntico.
        """
        store = ParameterStore()
        rng = RngStream(seed, Streams.ENCODER_INIT)
        patch_dim = 3 * hyper.patch_size ** 2
        d = hyper.enc_dim
        store.add("encoder.patch_embed.weight", rng.normal((patch_dim, d), hyper.init_scale, dtype))
        store.add("encoder.patch_embed.bias", np.zeros(d, dtype=dtype))
        for i in range(hyper.enc_layers):
            init_block(store, f"encoder.blocks.{i}", d, hyper.mlp_ratio, rng, hyper.init_scale,
                       hyper.enc_layers, dtype)
        init_layer_norm(store, "encoder.ln_f", d, dtype)

        head_rng = RngStream(seed, Streams.ENCODER_HEAD_INIT)
        if variant == EncoderVariant.CONTRASTIVE_GLOBAL:
            store.add("encoder.head.contrastive.proj",
                      head_rng.normal((d, hyper.contrastive_dim), 1.0 / math.sqrt(d), dtype))
            store.add("encoder.head.contrastive.log_temp", np.full(1, INITIAL_LOG_TEMPERATURE, dtype=dtype))
        else:
            store.add("encoder.head.generative.weight", head_rng.normal((d, patch_dim), hyper.init_scale, dtype))
            store.add("encoder.head.generative.bias", np.zeros(patch_dim, dtype=dtype))
        return cls(variant, hyper, store)

    def trunk_names(self) -> List[str]:
        return [n for n in self.store.names() if n.startswith(TRUNK_PREFIXES)]

    def head_names(self) -> List[str]:
        return self.store.names(HEAD_PREFIX)

    def trunk_census(self) -> int:
        return sum(self.store[n].data.size for n in self.trunk_names())

    def astype(self, dtype) -> "VisionEncoder":
        return VisionEncoder(self.variant, self.hyper, self.store.astype(dtype))

    def features(self, tokens, causal: bool = False, capture: Optional[List[np.ndarray]] = None) -> Tensor:
        """
        Aplica el tronco a tokens de parche (B, P, C·ps²).

        Args:
            tokens: Tensor o arreglo de tokens
            causal (bool): Máscara causal sobre el orden de los parches (objetivo generativo)
            capture (Optional[List[np.ndarray]]): Recibe la atención de cada capa

        Returns:
            Tensor: Características (B, P, enc_dim)
        """
        if not isinstance(tokens, Tensor):
            tokens = Tensor(np.asarray(tokens, dtype=self.store["encoder.patch_embed.weight"].dtype))
        length = tokens.shape[1]
        if length != self._angles.shape[0]:
            raise DimensionError("Número de parches distinto del de la rejilla", (length,), (self._angles.shape[0],))
        x = ops.linear(tokens, self.store["encoder.patch_embed.weight"], self.store["encoder.patch_embed.bias"])
        cos, sin = rotation_tables(self._angles, x.dtype)
        mask = causal_mask(length) if causal else None
        for i in range(self.hyper.enc_layers):
            x = transformer_block(x, self.store, f"encoder.blocks.{i}", self.hyper.enc_heads, cos, sin, mask, capture)
        return ops.layer_norm(x, self.store["encoder.ln_f.gain"], self.store["encoder.ln_f.bias"])

    def encode_batch(self, images) -> Tensor:
        """Características (B, P, enc_dim) de un lote de imágenes B×3×S×S."""
        tokens, _ = patchify(images, self.hyper.patch_size)
        return self.features(tokens)

    def encode(self, image) -> Tensor:
        """
        H_v de una imagen: una fila por parche, en orden row-major.

        Returns:
            Tensor: Forma (P, enc_dim)
        """
        data = image.data if isinstance(image, Tensor) else np.asarray(image)
        features = self.encode_batch(data[None])
        return ops.reshape(features, features.shape[1:])


class CaptionEncoder:
    """Bolsa de embeddings de palabras para el lado de texto del objetivo contrastivo."""

    def __init__(self, store: ParameterStore):
        self.store = store

    @classmethod
    def initialize(cls, vocab_size: int, dim: int, seed: int, dtype=np.float32) -> "CaptionEncoder":
        store = ParameterStore()
        rng = RngStream(seed, Streams.CAPTION_INIT)
        store.add("caption.embed", rng.normal((vocab_size, dim), 1.0 / math.sqrt(dim), dtype))
        return cls(store)

    def astype(self, dtype) -> "CaptionEncoder":
        return CaptionEncoder(self.store.astype(dtype))

    def encode(self, captions: List[List[int]]) -> Tensor:
        """Media de los embeddings de cada descripción (B, d), sin contar PAD."""
        table = self.store["caption.embed"]
        bag = np.zeros((len(captions), table.shape[0]), dtype=table.dtype)
        for i, ids in enumerate(captions):
            ids = [t for t in ids if t != Vocab.PAD]
            if not ids:
                raise DimensionError("Descripción vacía", (i,), (0,))
            np.add.at(bag[i], ids, 1.0 / len(ids))
        return ops.matmul(Tensor(bag), table)
