"""
Repositorio de conjuntos de datos de preguntas en formato JSONL (un QARecord por línea).
"""
import json
import os
from typing import List

from ...domain.exceptions import ConfigurationError, DatasetParseError
from ...domain.models.scene import QARecord, Task


class DatasetRepository:
    """
    Lee y escribe los archivos ``<split>_<task>.jsonl`` de un directorio de datos.
    """

    def __init__(self, data_dir: str):
        """
        Inicializa el repositorio.

        Args:
            data_dir (str): Directorio de los archivos JSONL
        """
        self.data_dir = data_dir

    def path(self, split: str, task: Task) -> str:
        return os.path.join(self.data_dir, f"{split}_{task.value}.jsonl")

    def exists(self, split: str, task: Task) -> bool:
        return os.path.exists(self.path(split, task))

    def load(self, split: str, task: Task) -> List[QARecord]:
        return read_jsonl(self.path(split, task))

    def load_tasks(self, split: str, tasks: List[Task]) -> List[QARecord]:
        """Concatena los registros de varias tareas en el orden dado."""
        records: List[QARecord] = []
        for task in tasks:
            records.extend(self.load(split, task))
        return records

    def save(self, split: str, task: Task, records: List[QARecord]) -> str:
        os.makedirs(self.data_dir, exist_ok=True)
        path = self.path(split, task)
        write_jsonl(records, path)
        return path


def write_jsonl(records: List[QARecord], path: str) -> None:
    """Escribe los registros en UTF-8; un objeto JSON por línea, terminada en salto de línea."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), ensure_ascii=False, separators=(",", ":")))
            f.write("\n")
    os.replace(tmp_path, path)


def read_jsonl(path: str) -> List[QARecord]:
    """
    Lee un archivo JSONL de registros.

    Raises:
        DatasetParseError: Con el número de línea (desde 1) de la primera línea mal formada
    """
    records: List[QARecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(QARecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError, IndexError, ConfigurationError) as e:
                raise DatasetParseError(str(e) or type(e).__name__, number) from e
    return records
