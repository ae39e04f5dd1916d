"""
Repositorio de checkpoints en formato binario propio.

Disposición (little-endian):
    magic b"SPLB" | uint32 versión | uint32 longitud de metadatos | metadatos JSON UTF-8
    uint32 número de tensores
    por tensor: uint16 longitud del nombre | nombre UTF-8 | uint8 ndim | uint32 × ndim dimensiones
    por tensor, en el mismo orden: datos float32 row-major
"""
import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

from ...domain.exceptions import CheckpointFormatError
from ...domain.models.parameters import ParameterStore

MAGIC = b"SPLB"
VERSION = 1


def save_checkpoint(path: str, store: ParameterStore, metadata: Dict) -> None:
    """
    Guarda los parámetros del almacén como float32, de forma atómica.

    Args:
        path (str): Ruta del archivo
        store (ParameterStore): Parámetros, en su orden de inserción
        metadata (Dict): Metadatos serializables (vocabulario, variante...)
    """
    arrays = store.to_arrays()
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, data in arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
    for data in arrays.values():
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointFormatError("Checkpoint truncado")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Lee un checkpoint.

    Returns:
        Tuple[Dict[str, np.ndarray], Dict]: Arreglos float32 por nombre (en orden) y metadatos

    Raises:
        CheckpointFormatError: Magic, versión o longitud incorrectos
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read())
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path} no es un checkpoint (magic incorrecto)")
    version, meta_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"Versión de checkpoint no soportada: {version}")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise CheckpointFormatError(f"Metadatos ilegibles: {e}") from e
    (count,) = reader.unpack("<I")
    header = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        header.append((name, tuple(shape)))
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in header:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(reader.payload):
        raise CheckpointFormatError("Bytes sobrantes al final del checkpoint")
    return arrays, metadata


def load_store(path: str) -> Tuple[ParameterStore, Dict]:
    arrays, metadata = load_checkpoint(path)
    return ParameterStore.from_arrays(arrays), metadata
