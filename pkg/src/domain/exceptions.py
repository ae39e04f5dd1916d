"""
Excepciones del dominio del laboratorio espacial.
"""


class SpatialLabError(Exception):
    """Error base de la aplicación."""


class ConfigurationError(SpatialLabError):
    """Configuración inválida o inconsistente (código de salida 2 en la CLI)."""


class VocabMismatchError(ConfigurationError):
    """El vocabulario del checkpoint no coincide con el del conjunto de datos."""


class DimensionError(SpatialLabError, ValueError):
    """Formas incompatibles entre operandos."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class NonFiniteError(SpatialLabError, FloatingPointError):
    """Aparición de NaN o Inf en un tensor."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (paso {step})"
        super().__init__(message)
        self.step = step


class GradCheckEvaluationError(SpatialLabError):
    """La función evaluada en la verificación de gradientes no es finita."""


class GenerationSkip(SpatialLabError):
    """La escena no admite la pregunta pedida; el llamador debe muestrear otra."""


class DatasetParseError(SpatialLabError):
    """Línea mal formada en un archivo JSONL."""

    def __init__(self, message, line_number):
        super().__init__(f"línea {line_number}: {message}")
        self.line_number = line_number


class CheckpointFormatError(SpatialLabError):
    """Archivo de checkpoint corrupto o de versión desconocida."""


class FreezeContractError(SpatialLabError):
    """Se modificaron parámetros que debían permanecer congelados."""


class ContractViolation(SpatialLabError):
    """Precondición de una operación incumplida."""
