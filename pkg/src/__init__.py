"""
Laboratorio de razonamiento espacial 2D para modelos visión-lenguaje a escala de escritorio.
"""

__version__ = "1.0.0"
