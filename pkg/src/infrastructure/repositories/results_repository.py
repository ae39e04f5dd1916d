"""
Repositorio de resultados de la matriz: CSV agregados, manifiesto y directorios por celda.
"""
import json
import os
from typing import Dict, List, Optional

import pandas as pd

from ...domain.models.experiment import RESULT_COLUMNS, EvalRecord
from ...domain.services.report_service import ReportService


def atomic_write_text(path: str, text: str) -> None:
    """Escribe en un temporal del mismo directorio y lo renombra sobre el destino."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp_path, path)


class ResultsRepository:
    """
    Organiza el directorio de salida de una ejecución.

    ``manifest.jsonl`` es la única fuente de verdad sobre las celdas
    terminadas; sólo lo escribe el proceso coordinador.
    """

    MANIFEST = "manifest.jsonl"

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def cell_dir(self, cell_id: str) -> str:
        path = os.path.join(self.out_dir, "cells", cell_id)
        os.makedirs(path, exist_ok=True)
        return path

    def encoder_cache_path(self, cache_key: str) -> str:
        return os.path.join(self.out_dir, "cache", "encoders", f"{cache_key}.ckpt")

    # --- Manifiesto --------------------------------------------------------

    def read_manifest(self) -> List[Dict]:
        path = self.path(self.MANIFEST)
        if not os.path.exists(path):
            return []
        with open(path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def append_manifest(self, entry: Dict) -> None:
        entries = self.read_manifest() + [entry]
        atomic_write_text(self.path(self.MANIFEST),
                          "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))

    def completed_cells(self) -> Dict[str, Dict]:
        """Última entrada 'done' por celda cuyo archivo de registros sigue presente."""
        done: Dict[str, Dict] = {}
        for entry in self.read_manifest():
            cell = entry.get('cell')
            if entry.get('status') == "done" and os.path.exists(self.cell_records_path(cell)):
                done[cell] = entry
            elif entry.get('status') == "failed":
                done.pop(cell, None)
        return done

    # --- Registros por celda ----------------------------------------------

    def cell_records_path(self, cell_id: str) -> str:
        return os.path.join(self.out_dir, "cells", cell_id, "records.json")

    def save_cell_records(self, cell_id: str, records: List[EvalRecord]) -> None:
        self.cell_dir(cell_id)
        atomic_write_text(self.cell_records_path(cell_id),
                          json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True))

    def load_cell_records(self, cell_id: str) -> List[EvalRecord]:
        with open(self.cell_records_path(cell_id), "r", encoding="utf-8") as f:
            return [EvalRecord(**row) for row in json.load(f)]

    # --- CSV ---------------------------------------------------------------

    def write_results(self, records: List[EvalRecord], deterministic: bool = True) -> str:
        """
        Escribe ``results.csv`` ordenado; con ``deterministic`` los tiempos van a
        ``timings.csv`` y wall_ms se escribe como 0 para que el archivo sea estable.
        """
        df = ReportService().results_frame(records)
        if deterministic:
            df[["variant", "seed", "task", "wall_ms"]].to_csv(self.path("timings.csv"), index=False)
            df = df.assign(wall_ms=0.0)
        path = self.path("results.csv")
        atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
        return path

    def read_results(self, path: Optional[str] = None) -> pd.DataFrame:
        df = pd.read_csv(path or self.path("results.csv"))
        missing = [c for c in RESULT_COLUMNS if c not in df.columns]
        if missing:
            raise ValueError(f"Faltan columnas en results.csv: {missing}")
        return df

    def write_rows(self, name: str, rows: List[Dict], columns: Optional[List[str]] = None,
                   sort_by: Optional[List[str]] = None, directory: Optional[str] = None) -> str:
        df = pd.DataFrame(rows, columns=columns)
        if sort_by and not df.empty:
            df = df.sort_values(sort_by, kind="mergesort").reset_index(drop=True)
        path = os.path.join(directory or self.out_dir, name)
        atomic_write_text(path, df.to_csv(index=False, lineterminator="\n"))
        return path

    def read_rows(self, name: str, directory: Optional[str] = None) -> Optional[pd.DataFrame]:
        path = os.path.join(directory or self.out_dir, name)
        return pd.read_csv(path) if os.path.exists(path) else None

    def save_figure(self, fig, name: str) -> str:
        path = os.path.join(self.out_dir, "figures", name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fig.savefig(path, dpi=150, bbox_inches="tight")
        return path
