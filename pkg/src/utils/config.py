"""
Configuración de la aplicación.
"""
import os
import shutil
from typing import Optional

from dotenv import dotenv_values, load_dotenv

from ..domain.exceptions import ConfigurationError
from ..domain.models.experiment import ExperimentConfig

# Cargar variables de entorno desde archivo .env si existe
load_dotenv()

# Configuración general
APP_NAME = "Spatial Lab"
APP_VERSION = "1.0.0"
APP_DESCRIPTION = "Laboratorio de razonamiento espacial en modelos visión-lenguaje a escala de escritorio"

# Rutas de archivos
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
DATA_DIR = os.getenv("DATA_DIR", os.path.join(BASE_DIR, "data"))
RESULTS_DIR = os.getenv("RESULTS_DIR", os.path.join(BASE_DIR, "results"))
DEFAULT_CONFIG = os.getenv("EXPERIMENT_CONFIG", os.path.join(BASE_DIR, "configs", "default_matrix.env"))

# Ejecución
JOBS = int(os.getenv("JOBS", 1))
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
EVAL_BATCH_SIZE = int(os.getenv("EVAL_BATCH_SIZE", 32))


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """
    Lee un archivo de configuración clave=valor (sintaxis dotenv).

    Las rutas de datos y resultados toman por defecto DATA_DIR y RESULTS_DIR.

    Args:
        path (Optional[str]): Ruta del archivo; None usa sólo los valores por defecto

    Returns:
        ExperimentConfig: Configuración validada
    """
    values = {'DATA_DIR': DATA_DIR, 'OUT_DIR': RESULTS_DIR, 'JOBS': str(JOBS)}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"No existe el archivo de configuración: {path}")
        values.update(dotenv_values(path))
    return ExperimentConfig.from_env(values)


def save_experiment_config(config: ExperimentConfig, path: str, source: Optional[str] = None) -> None:
    """
    Deja la configuración en el directorio de la ejecución: copia literal del
    archivo de origen si existe, o la serialización canónica en caso contrario.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if source is not None and os.path.exists(source):
        if os.path.abspath(source) != os.path.abspath(path):
            shutil.copyfile(source, path)
        return
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(config.to_env_text())
