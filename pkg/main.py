#!/usr/bin/env python3
"""
Script principal del laboratorio de razonamiento espacial.
"""
import os
import sys

# Un hilo de BLAS por proceso: los resultados no dependen de --jobs
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

# Asegurarse de que el directorio actual esté en el PYTHONPATH
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

# Importar después de configurar el entorno
from src.application.cli.cli_app import run_cli  # noqa: E402


def main():
    """
    Función principal.

    Returns:
        int: Código de salida
    """
    return run_cli(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
