"""
Módulo para generar los conjuntos de datos sintéticos de la matriz.
"""
import hashlib
import json
import os
from typing import Dict, List, Optional, Sequence, Tuple

from ...domain.exceptions import ConfigurationError
from ...domain.models.rng import RngStream, Streams
from ...domain.models.scene import QARecord, SceneConstraints, SceneSpec, Task
from ...domain.services.scene_service import generate_records, sample_scene
from ...utils.logger import get_logger
from ..repositories.dataset_repository import DatasetRepository
from ..repositories.results_repository import atomic_write_text

logger = get_logger("data")

SPLITS = ("train", "eval")
MANIFEST = "manifest.json"


def data_stream_id(split: str, task: Task) -> int:
    """Id de flujo disjunto por (partición, tarea)."""
    return Streams.DATA + 16 * SPLITS.index(split) + list(Task).index(task)


def caption_stream_id(split: str) -> int:
    return Streams.DATA + 16 * SPLITS.index(split) + 8


class DatasetBuilder:
    """
    Genera las particiones de entrenamiento y evaluación de cada tarea y su manifiesto.
    """

    def __init__(self, data_dir: str):
        """
        Inicializa el generador.

        Args:
            data_dir (str): Directorio de salida
        """
        self.data_dir = data_dir
        self.repository = DatasetRepository(data_dir)

    def build(self, seed: int, train_size: int, eval_size: int, tasks: Sequence[Task],
              constraints: SceneConstraints = SceneConstraints(), grid: Tuple[int, int] = (8, 8),
              image_size: int = 64) -> Dict:
        """
        Genera todos los archivos; la misma semilla produce los mismos bytes.

        Returns:
            Dict: Contenido del manifiesto
        """
        if train_size < 1 or eval_size < 1:
            raise ConfigurationError("Los tamaños de partición deben ser positivos")
        sizes = {'train': train_size, 'eval': eval_size}
        counts: Dict[str, Dict[str, int]] = {}
        for split in SPLITS:
            counts[split] = {}
            for task in tasks:
                rng = RngStream(seed, data_stream_id(split, task))
                records = generate_records(task, sizes[split], rng, constraints, grid)
                path = self.repository.save(split, task, records)
                counts[split][task.value] = len(records)
                logger.info(f"Generados {len(records)} ítems de {task.value} ({split}) en {path}")
        manifest = {
            'seed': seed,
            'grid': list(grid),
            'image_size': image_size,
            'tasks': [t.value for t in tasks],
            'sizes': sizes,
            'counts': counts,
            'constraints': {'min_objects': constraints.min_objects, 'max_objects': constraints.max_objects,
                            'shapes': list(constraints.shapes), 'colors': list(constraints.colors)},
        }
        atomic_write_text(os.path.join(self.data_dir, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    def manifest(self) -> Dict:
        path = os.path.join(self.data_dir, MANIFEST)
        if not os.path.exists(path):
            raise ConfigurationError(f"No hay datos generados en {self.data_dir} (ejecute gen-data)")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def fingerprint(self) -> str:
        """Huella del conjunto de datos (hash del manifiesto)."""
        path = os.path.join(self.data_dir, MANIFEST)
        if not os.path.exists(path):
            raise ConfigurationError(f"No hay datos generados en {self.data_dir} (ejecute gen-data)")
        with open(path, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()[:16]

    def load(self, split: str, tasks: Sequence[Task], limit: Optional[int] = None) -> List[QARecord]:
        """Registros de varias tareas; ``limit`` recorta cada tarea por separado."""
        records: List[QARecord] = []
        for task in tasks:
            if not self.repository.exists(split, task):
                raise ConfigurationError(f"Falta {self.repository.path(split, task)} (ejecute gen-data)")
            items = self.repository.load(split, task)
            records.extend(items[:limit] if limit is not None else items)
        return records

    def caption_scenes(self, split: str, n: int) -> List[SceneSpec]:
        """
        Escenas para el preentrenamiento contrastivo y la etapa 1, derivadas de la
        semilla del manifiesto en un flujo propio.
        """
        manifest = self.manifest()
        c = manifest['constraints']
        constraints = SceneConstraints(min_objects=c['min_objects'], max_objects=c['max_objects'],
                                       shapes=tuple(c['shapes']), colors=tuple(c['colors']))
        rng = RngStream(manifest['seed'], caption_stream_id(split))
        grid = tuple(manifest['grid'])
        return [sample_scene(rng, constraints, grid) for _ in range(n)]
