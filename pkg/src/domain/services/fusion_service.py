"""
Servicios de dominio del modelo fusionado: proyección W, modelo de lenguaje
decodificador, disposición de la secuencia multimodal, pérdida y generación.

Disposición de la secuencia: [parches de imagen; pregunta; respuesta; EOS].
En la vista de ids los huecos de imagen llevan el id reservado IMG; sus
embeddings de entrada son las filas de H_v proyectadas.
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigurationError, ContractViolation, DimensionError
from ..models.experiment import VariantConfig
from ..models.parameters import ParameterStore
from ..models.positions import PeScheme, PosIndex
from ..models.rng import RngStream, Streams
from ..models.scene import Vocab
from ..models.tensor import Tensor
from . import ops
from .encoder_service import VisionEncoder
from .rope_service import assign_positions, rotation_angles, shuffle_image_positions, text_positions
from .transformer import causal_mask, init_block, init_layer_norm, rotation_tables, transformer_block

ENCODER_GROUP = "encoder."
PROJECTION_GROUP = "projection."
LM_GROUP = "lm."
GROUPS = (ENCODER_GROUP, PROJECTION_GROUP, LM_GROUP)


@dataclass
class MultimodalSequence:
    """Secuencia de entrada de un ítem: ids, posiciones y longitudes de cada tramo."""
    token_ids: np.ndarray
    positions: List[PosIndex]
    image_len: int
    question_len: int
    answer_len: int = 0
    image_embeddings: Optional[Tensor] = None

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def answer_start(self) -> int:
        return self.image_len + self.question_len

    def loss_rows(self) -> List[Tuple[int, int]]:
        """Pares (posición que predice, id objetivo) de los tokens de respuesta (EOS incluido)."""
        return [(i - 1, int(self.token_ids[i])) for i in range(self.answer_start, self.length)]

    def mask(self) -> np.ndarray:
        return causal_mask(self.length)


def project(features: Tensor, weight: Tensor) -> Tensor:
    """Proyección lineal H_v·W al espacio de embeddings del modelo de lenguaje."""
    if features.shape[-1] != weight.shape[0]:
        raise DimensionError("H_v y W no son compatibles", features.shape, weight.shape)
    return ops.matmul(features, weight)


def build_sequence(image_embeddings: Optional[Tensor], question_ids: Sequence[int],
                   answer_ids: Optional[Sequence[int]], pe_scheme: PeScheme, patch_grid: Tuple[int, int],
                   max_len: int, image_permutation: Optional[Sequence[int]] = None) -> MultimodalSequence:
    """
    Construye la secuencia [imagen; pregunta; respuesta; EOS] y sus posiciones.

    Args:
        image_embeddings (Optional[Tensor]): H_v (P, d); None si las calcula el modelo
        question_ids (Sequence[int]): Ids de la pregunta
        answer_ids (Optional[Sequence[int]]): Ids de la respuesta; None en inferencia (sin EOS)
        pe_scheme (PeScheme): Esquema posicional del modelo de lenguaje
        patch_grid (Tuple[int, int]): Rejilla de parches
        max_len (int): Longitud máxima del contexto
        image_permutation (Optional[Sequence[int]]): Reordenación de las posiciones de imagen

    Returns:
        MultimodalSequence: Secuencia lista para el modelo
    """
    num_patches = patch_grid[0] * patch_grid[1]
    if image_embeddings is not None and image_embeddings.shape[0] != num_patches:
        raise DimensionError("H_v no coincide con la rejilla de parches", image_embeddings.shape, patch_grid)
    answer = [] if answer_ids is None else list(answer_ids) + [Vocab.EOS]
    text = list(question_ids) + answer
    length = num_patches + len(text)
    if length > max_len:
        raise ConfigurationError(f"La secuencia ({length} tokens) supera max_seq_len={max_len}")
    positions = assign_positions(0, patch_grid, pe_scheme, suffix_len=len(text))
    if image_permutation is not None:
        positions = shuffle_image_positions(positions, None, image_permutation)
    token_ids = np.array([Vocab.IMG] * num_patches + text, dtype=np.int64)
    return MultimodalSequence(token_ids=token_ids, positions=positions, image_len=num_patches,
                              question_len=len(question_ids), answer_len=len(answer),
                              image_embeddings=image_embeddings)


def _padded_positions(positions: List[PosIndex], length: int) -> List[PosIndex]:
    if len(positions) >= length:
        return positions
    last = max(max(p.x, p.y) for p in positions) + 1 if positions else 0
    return positions + text_positions(length - len(positions), start=last)


class FusionModel:
    """
    Tronco del codificador + W + modelo de lenguaje decodificador, con un único
    almacén de parámetros agrupado por prefijo (``encoder.``, ``projection.``, ``lm.``).
    """

    def __init__(self, variant: VariantConfig, vocab: Vocab, store: ParameterStore):
        self.variant = variant
        self.hyper = variant.hyper
        self.vocab = vocab
        self.store = store
        self.encoder = VisionEncoder(variant.encoder, variant.hyper, store)
        self._head_dim = self.hyper.lm_dim // self.hyper.lm_heads

    @classmethod
    def initialize(cls, variant: VariantConfig, vocab: Vocab, encoder: VisionEncoder,
                   dtype=np.float32) -> "FusionModel":
        """
        Ensambla el modelo a partir de un codificador preentrenado (sólo el tronco).

        La inicialización del modelo de lenguaje depende sólo de la semilla, por lo
        que las celdas que difieren en el esquema posicional arrancan idénticas.
        """
        hyper = variant.hyper
        store = ParameterStore()
        for name in encoder.trunk_names():
            store.add(name, np.array(encoder.store[name].data, dtype=dtype, copy=True))
        proj_rng = RngStream(variant.seed, Streams.PROJECTION_INIT)
        store.add("projection.weight",
                  proj_rng.normal((hyper.enc_dim, hyper.lm_dim), 1.0 / math.sqrt(hyper.enc_dim), dtype))
        lm_rng = RngStream(variant.seed, Streams.LM_INIT)
        store.add("lm.embed", lm_rng.normal((len(vocab), hyper.lm_dim), hyper.init_scale, dtype))
        for i in range(hyper.lm_layers):
            init_block(store, f"lm.blocks.{i}", hyper.lm_dim, hyper.mlp_ratio, lm_rng, hyper.init_scale,
                       hyper.lm_layers, dtype)
        init_layer_norm(store, "lm.ln_f", hyper.lm_dim, dtype)
        return cls(variant, vocab, store)

    def astype(self, dtype) -> "FusionModel":
        return FusionModel(self.variant, self.vocab, self.store.astype(dtype))

    def group_names(self, group: str) -> List[str]:
        return self.store.names(group)

    def group_digests(self) -> Dict[str, str]:
        return {group.rstrip("."): self.store.digest(self.group_names(group)) for group in GROUPS}

    def metadata(self) -> Dict:
        return {'kind': 'fusion', 'variant': self.variant.to_dict(), 'vocab': list(self.vocab.tokens)}

    @contextmanager
    def inference(self) -> Iterator["FusionModel"]:
        """Desactiva temporalmente el registro de gradientes de todos los parámetros."""
        flags = {name: self.store[name].requires_grad for name in self.store}
        for name in self.store:
            self.store[name].requires_grad = False
        try:
            yield self
        finally:
            for name, flag in flags.items():
                self.store[name].requires_grad = flag

    # --- Pasada hacia delante ----------------------------------------------

    def _angles(self, position_lists: List[List[PosIndex]]) -> np.ndarray:
        tables = [rotation_angles(p, self.variant.pe, self._head_dim, self.hyper.rope_base) for p in position_lists]
        if all(np.array_equal(tables[0], t) for t in tables[1:]):
            return tables[0]
        return np.stack(tables)[:, None, :, :]

    def _decode(self, x: Tensor, angles: np.ndarray, capture: Optional[List[np.ndarray]]) -> Tensor:
        cos, sin = rotation_tables(angles, x.dtype)
        mask = causal_mask(x.shape[1])
        for i in range(self.hyper.lm_layers):
            x = transformer_block(x, self.store, f"lm.blocks.{i}", self.hyper.lm_heads, cos, sin, mask, capture)
        return ops.layer_norm(x, self.store["lm.ln_f.gain"], self.store["lm.ln_f.bias"])

    def logits(self, hidden: Tensor) -> Tensor:
        """Cabeza de salida atada a la tabla de embeddings."""
        return ops.matmul(hidden, ops.transpose_last(self.store["lm.embed"]))

    def image_features(self, images: np.ndarray) -> Tensor:
        """H_v (B, P, enc_dim) de un lote de imágenes."""
        return self.encoder.encode_batch(images)

    def hidden_states(self, sequences: List[MultimodalSequence], images: Optional[np.ndarray] = None,
                      image_features: Optional[Tensor] = None,
                      capture: Optional[List[np.ndarray]] = None) -> Tensor:
        """
        Estados finales (B, T, lm_dim) de un lote rellenado a la derecha con PAD.

        H_v se toma, por orden de preferencia, de ``image_features``, de
        ``images`` (pasando por el codificador) o de cada secuencia.
        """
        if not sequences:
            raise ContractViolation("Lote vacío")
        num_patches = sequences[0].image_len
        length = max(s.length for s in sequences)
        if length > self.hyper.max_seq_len:
            raise ConfigurationError(f"Lote de longitud {length} > max_seq_len={self.hyper.max_seq_len}")
        if image_features is None:
            if images is not None:
                image_features = self.image_features(images)
            else:
                missing = [i for i, s in enumerate(sequences) if s.image_embeddings is None]
                if missing:
                    raise ContractViolation(f"Secuencias sin H_v: {missing[:5]}")
                image_features = ops.concat([ops.reshape(s.image_embeddings, (1,) + s.image_embeddings.shape)
                                             for s in sequences], axis=0)
        if image_features.shape[:2] != (len(sequences), num_patches):
            raise DimensionError("H_v no coincide con el lote", image_features.shape, (len(sequences), num_patches))

        text_ids = np.full((len(sequences), length - num_patches), Vocab.PAD, dtype=np.int64)
        for b, seq in enumerate(sequences):
            text_ids[b, :seq.length - num_patches] = seq.token_ids[num_patches:]
        image_part = project(image_features, self.store["projection.weight"])
        text_part = ops.embedding_lookup(self.store["lm.embed"], text_ids)
        x = ops.concat([image_part, text_part], axis=1)
        angles = self._angles([_padded_positions(s.positions, length) for s in sequences])
        return self._decode(x, angles, capture)

    def forward(self, sequences: List[MultimodalSequence], images: Optional[np.ndarray] = None,
                image_features: Optional[Tensor] = None, capture: Optional[List[np.ndarray]] = None) -> Tensor:
        """Logits (B, T, V) del lote."""
        return self.logits(self.hidden_states(sequences, images, image_features, capture))

    def forward_text(self, token_lists: List[List[int]]) -> Tensor:
        """Logits (B, T, V) de secuencias sólo de texto con posiciones (t, t)."""
        length = max(len(t) for t in token_lists)
        if length > self.hyper.max_seq_len:
            raise ConfigurationError(f"Texto de longitud {length} > max_seq_len={self.hyper.max_seq_len}")
        ids = np.full((len(token_lists), length), Vocab.PAD, dtype=np.int64)
        for b, tokens in enumerate(token_lists):
            ids[b, :len(tokens)] = tokens
        x = ops.embedding_lookup(self.store["lm.embed"], ids)
        return self.logits(self._decode(x, self._angles([text_positions(length)]), None))


def forward_loss(model: FusionModel, sequences: List[MultimodalSequence],
                 images: Optional[np.ndarray] = None) -> Tensor:
    """
    Entropía cruzada media sobre los tokens de respuesta (EOS incluido) del lote.

    Las posiciones de imagen, de pregunta y de relleno no contribuyen.
    """
    rows: List[int] = []
    targets: List[int] = []
    logits = model.forward(sequences, images=images)
    batch, length, vocab_size = logits.shape
    for b, seq in enumerate(sequences):
        for position, target in seq.loss_rows():
            rows.append(b * length + position)
            targets.append(target)
    if not rows:
        raise ContractViolation("El lote no contiene tokens de respuesta")
    flat = ops.reshape(logits, (batch * length, vocab_size))
    return ops.cross_entropy(ops.gather_rows(flat, rows), targets)


def text_loss(model: FusionModel, token_lists: List[List[int]]) -> Tensor:
    """Entropía cruzada de siguiente token sobre texto puro (calentamiento del modelo de lenguaje)."""
    logits = model.forward_text(token_lists)
    batch, length, vocab_size = logits.shape
    rows = [b * length + i for b, tokens in enumerate(token_lists) for i in range(len(tokens) - 1)]
    targets = [tokens[i + 1] for tokens in token_lists for i in range(len(tokens) - 1)]
    if not rows:
        raise ContractViolation("Secuencias de texto sin objetivos")
    flat = ops.reshape(logits, (batch * length, vocab_size))
    return ops.cross_entropy(ops.gather_rows(flat, rows), targets)


def generate_answers(model: FusionModel, images: np.ndarray, questions: List[List[int]],
                     max_tokens: Optional[int] = None,
                     image_permutations: Optional[List[Optional[Sequence[int]]]] = None) -> List[List[int]]:
    """
    Decodificación voraz por lotes; cada ítem se detiene en EOS o tras ``max_tokens``.

    Returns:
        List[List[int]]: Ids generados por ítem, sin EOS
    """
    max_tokens = model.hyper.max_answer_tokens if max_tokens is None else max_tokens
    permutations = image_permutations or [None] * len(questions)
    generated: List[List[int]] = [[] for _ in questions]
    done = [False] * len(questions)
    num_patches = model.hyper.num_patches
    with model.inference():
        features = model.image_features(images)
        for _ in range(max_tokens):
            for b, question in enumerate(questions):
                if num_patches + len(question) + len(generated[b]) >= model.hyper.max_seq_len:
                    done[b] = True
            if all(done):
                break
            sequences = [build_sequence(None, q + g, None, model.variant.pe, model.hyper.patch_grid,
                                        model.hyper.max_seq_len, perm)
                         for q, g, perm in zip(questions, generated, permutations)]
            logits = model.forward(sequences, image_features=features).data
            for b, seq in enumerate(sequences):
                if done[b]:
                    continue
                token = int(np.argmax(logits[b, seq.length - 1]))
                if token == Vocab.EOS:
                    done[b] = True
                else:
                    generated[b].append(token)
    return generated


def generate_answer(model: FusionModel, image, question_ids: List[int],
                    max_tokens: Optional[int] = None) -> List[int]:
    """Respuesta voraz para un solo ítem."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return generate_answers(model, data[None], [list(question_ids)], max_tokens)[0]
