"""
Módulo que define los modelos de la matriz de experimentos y sus resultados.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..exceptions import ConfigurationError
from .positions import PeScheme
from .scene import Task


class EncoderVariant(str, Enum):
    """Objetivo de preentrenamiento del codificador visual (el tronco es idéntico)."""
    CONTRASTIVE_GLOBAL = "contrastive"
    GENERATIVE_PATCH = "generative"


@dataclass(frozen=True)
class Hyperparameters:
    """
    Dimensiones, pasos y tasas de aprendizaje compartidos por todas las celdas.
    """
    image_size: int = 64
    patch_size: int = 8
    grid_rows: int = 8
    grid_cols: int = 8
    enc_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    contrastive_dim: int = 64
    lm_dim: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    mlp_ratio: int = 4
    max_seq_len: int = 128
    rope_base: float = 10000.0
    init_scale: float = 0.02
    batch_size: int = 16
    contrastive_batch: int = 32
    encoder_steps: int = 500
    encoder_lr: float = 1e-3
    warmup_lm_steps: int = 300
    warmup_lm_lr: float = 1e-3
    stage1_steps: int = 200
    stage1_lr: float = 1e-3
    stage2_epochs: int = 2
    stage2_lr: float = 3e-4
    lr_warmup_steps: int = 20
    max_answer_tokens: int = 4
    log_every: int = 50

    @property
    def grid(self) -> Tuple[int, int]:
        return (self.grid_rows, self.grid_cols)

    @property
    def patch_grid(self) -> Tuple[int, int]:
        return (self.image_size // self.patch_size, self.image_size // self.patch_size)

    @property
    def num_patches(self) -> int:
        rows, cols = self.patch_grid
        return rows * cols

    def validate(self) -> "Hyperparameters":
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError("image_size debe ser divisible por patch_size")
        if self.image_size % self.grid_rows != 0 or self.image_size % self.grid_cols != 0:
            raise ConfigurationError("image_size debe ser divisible por la cuadrícula de la escena")
        for dim, heads, label in ((self.enc_dim, self.enc_heads, "enc"), (self.lm_dim, self.lm_heads, "lm")):
            if dim % heads != 0 or (dim // heads) % 4 != 0:
                raise ConfigurationError(f"{label}_dim/{label}_heads debe ser múltiplo de 4 (RoPE 2D)")
        if self.num_patches >= self.max_seq_len:
            raise ConfigurationError("max_seq_len no admite ni los tokens de imagen")
        return self

    def encoder_fields(self) -> Dict[str, Any]:
        """Campos que determinan el codificador preentrenado (clave de caché)."""
        keys = ("image_size", "patch_size", "grid_rows", "grid_cols", "enc_dim", "enc_layers", "enc_heads",
                "contrastive_dim", "mlp_ratio", "rope_base", "init_scale", "contrastive_batch",
                "batch_size", "encoder_steps", "encoder_lr", "lr_warmup_steps")
        return {k: getattr(self, k) for k in keys}


@dataclass(frozen=True)
class VariantConfig:
    """Una celda de la matriz: objetivo del codificador × esquema posicional × semilla."""
    encoder: EncoderVariant
    pe: PeScheme
    seed: int
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    @property
    def variant_id(self) -> str:
        return f"{self.encoder.value}-{self.pe.value}"

    @property
    def cell_id(self) -> str:
        return f"{self.variant_id}-s{self.seed}"

    def encoder_cache_key(self, data_fingerprint: str) -> str:
        """Hash del contenido que produce el codificador; no depende del esquema posicional."""
        payload = {'encoder': self.encoder.value, 'seed': self.seed, 'hyper': self.hyper.encoder_fields(),
                   'data': data_fingerprint}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        return {'encoder': self.encoder.value, 'pe': self.pe.value, 'seed': self.seed, 'hyper': asdict(self.hyper)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VariantConfig":
        return cls(encoder=EncoderVariant(data['encoder']), pe=PeScheme.parse(data['pe']), seed=int(data['seed']),
                   hyper=Hyperparameters(**data.get('hyper', {})))


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool:
            value = raw.strip().lower()
            if value not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return value in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigurationError(f"Valor inválido para {key}: '{raw}'") from e


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Configuración completa de una ejecución de la matriz.

    Se serializa como archivo clave=valor (sintaxis dotenv) con claves en mayúsculas.
    """
    data_dir: str = "data"
    out_dir: str = "results"
    encoders: Tuple[EncoderVariant, ...] = (EncoderVariant.CONTRASTIVE_GLOBAL, EncoderVariant.GENERATIVE_PATCH)
    pe_schemes: Tuple[PeScheme, ...] = (PeScheme.ROPE_1D, PeScheme.ROPE_2D)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    jobs: int = 1
    data_seed: int = 1234
    train_size: int = 5000
    eval_size: int = 1000
    tasks: Tuple[Task, ...] = (Task.RELATION, Task.COUNT, Task.LOCATE)
    min_objects: int = 2
    max_objects: int = 5
    diagnostics: bool = True
    diagnostic_items: int = 200
    probe_seed: int = 99
    deterministic_csv: bool = True
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    _LIST_KEYS = ("encoders", "pe_schemes", "seeds", "tasks")

    def cells(self) -> List[VariantConfig]:
        """Expansión determinista de la cuadrícula × semillas."""
        return [VariantConfig(encoder=e, pe=p, seed=s, hyper=self.hyper)
                for e in self.encoders for p in self.pe_schemes for s in self.seeds]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean) if clean else self

    def to_env(self) -> Dict[str, str]:
        env: Dict[str, str] = {}
        for f in fields(self):
            if f.name == "hyper":
                continue
            value = getattr(self, f.name)
            if f.name in self._LIST_KEYS:
                env[f.name.upper()] = ",".join(v.value if isinstance(v, Enum) else str(v) for v in value)
            else:
                env[f.name.upper()] = _format(value)
        for f in fields(self.hyper):
            env[f.name.upper()] = _format(getattr(self.hyper, f.name))
        return env

    def to_env_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_env().items())

    @classmethod
    def from_env(cls, values: Dict[str, Optional[str]]) -> "ExperimentConfig":
        own = {f.name: f for f in fields(cls) if f.name != "hyper"}
        hyper_types = {f.name: f.type for f in fields(Hyperparameters)}
        kwargs: Dict[str, Any] = {}
        hyper_kwargs: Dict[str, Any] = {}
        for raw_key, raw_value in values.items():
            key = raw_key.lower()
            if raw_value is None:
                raise ConfigurationError(f"Clave sin valor: {raw_key}")
            if key == "encoders":
                kwargs[key] = tuple(_parse_enum(EncoderVariant, v, raw_key) for v in _split(raw_value))
            elif key == "pe_schemes":
                kwargs[key] = tuple(_parse_enum(PeScheme.parse, v, raw_key) for v in _split(raw_value))
            elif key == "seeds":
                kwargs[key] = tuple(_coerce(v, int, raw_key) for v in _split(raw_value))
            elif key == "tasks":
                kwargs[key] = tuple(Task.parse_list(raw_value))
            elif key in own:
                kwargs[key] = _coerce(raw_value, own[key].type, raw_key)
            elif key in hyper_types:
                hyper_kwargs[key] = _coerce(raw_value, hyper_types[key], raw_key)
            else:
                raise ConfigurationError(f"Clave de configuración desconocida: {raw_key}")
        config = cls(**kwargs, hyper=Hyperparameters(**hyper_kwargs).validate())
        if not config.encoders or not config.pe_schemes or not config.seeds or not config.tasks:
            raise ConfigurationError("La matriz debe tener al menos un codificador, esquema, semilla y tarea")
        return config


def _split(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parse_enum(parser, value: str, key: str):
    try:
        return parser(value)
    except ValueError as e:
        raise ConfigurationError(f"Valor inválido para {key}: '{value}'") from e


RESULT_COLUMNS = ("variant", "encoder", "pe", "seed", "task", "accuracy", "n_items", "wall_ms")


@dataclass
class EvalRecord:
    """Exactitud de una variante y semilla en una tarea."""
    variant: str
    encoder: str
    pe: str
    seed: int
    task: str
    accuracy: float
    n_items: int
    wall_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"Exactitud fuera de [0, 1]: {self.accuracy}")

    @classmethod
    def from_counts(cls, variant: VariantConfig, task: Task, correct: int, n_items: int,
                    wall_ms: float = 0.0) -> "EvalRecord":
        return cls(variant=variant.variant_id, encoder=variant.encoder.value, pe=variant.pe.value,
                   seed=variant.seed, task=task.value, accuracy=correct / n_items if n_items else 0.0,
                   n_items=n_items, wall_ms=wall_ms)

    def to_dict(self) -> Dict[str, Any]:
        return {c: getattr(self, c) for c in RESULT_COLUMNS}


@dataclass
class AttentionTrace:
    """
    Atención desde la posición que predice la primera respuesta hacia los tokens de imagen.

    ``weights`` tiene forma (capas, cabezas, P); ``row_sums`` guarda la suma de
    cada fila completa de softmax (sobre todo el prefijo) por capa y cabeza.
    """
    variant: str
    seed: int
    item_index: int
    task: str
    weights: np.ndarray
    row_sums: np.ndarray
    target_patches: List[int]

    @property
    def image_mass(self) -> float:
        return float(self.weights.sum(axis=-1).mean())

    @property
    def target_mass(self) -> float:
        if not self.target_patches:
            return 0.0
        return float(self.weights[..., self.target_patches].sum(axis=-1).mean())

    @property
    def target_fraction(self) -> float:
        """Fracción de la masa sobre la imagen que cae en los parches del objetivo."""
        image = self.weights.sum(axis=-1)
        target = self.weights[..., self.target_patches].sum(axis=-1) if self.target_patches else np.zeros_like(image)
        return float(np.mean(target / np.maximum(image, 1e-12)))

    @property
    def null_fraction(self) -> float:
        """Fracción esperada bajo atención uniforme sobre los parches."""
        return len(self.target_patches) / self.weights.shape[-1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'variant': self.variant,
            'seed': self.seed,
            'item': self.item_index,
            'task': self.task,
            'image_mass': self.image_mass,
            'target_mass': self.target_mass,
            'target_fraction': self.target_fraction,
            'null_fraction': self.null_fraction,
            'max_row_sum_error': float(np.abs(self.row_sums - 1.0).max()),
        }
