"""
Configuración de logging para la aplicación.
"""
import logging
import os
import sys
from datetime import datetime

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _resolve_level(level):
    if level is not None:
        return level
    name = os.getenv("LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def setup_logger(name=None, level=None):
    """
    Configura y devuelve un logger.
    
    Args:
        name (str): Nombre del logger
        level (int): Nivel de logging (por defecto LOG_LEVEL del entorno)
        
    Returns:
        logging.Logger: Logger configurado
    """
    level = _resolve_level(level)

    # Crear directorio de logs si no existe
    log_dir = os.getenv("LOG_DIR") or os.path.join(
        os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "logs"
    )
    os.makedirs(log_dir, exist_ok=True)

    # Nombre del archivo de log
    log_file = os.path.join(log_dir, f"{datetime.now().strftime('%Y-%m-%d')}.log")

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Evitar duplicación de handlers
    if not logger.handlers:
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(level)
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(console_handler)

        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

        # Los hijos (spatial_lab.x) ya escriben a través del padre
        logger.propagate = False

    return logger


def get_logger(area):
    """Devuelve el logger hijo de un área (p. ej. 'training'); hereda los handlers de app_logger."""
    return logging.getLogger(f"spatial_lab.{area}")


# Logger principal de la aplicación
app_logger = setup_logger("spatial_lab")
