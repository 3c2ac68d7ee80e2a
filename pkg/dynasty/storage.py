"""
On-disk bundle format shared by datasets and checkpoints.

A bundle is a directory holding:

- `manifest.json`: free-form metadata plus an ordered `tensors` list, each entry giving the
  tensor `name`, `shape`, `dtype` (always `<f8`), byte `offset` and `nbytes`.
- `data.bin`: the tensors as raw little-endian 64-bit floats, row-major, concatenated in
  manifest order.

Round trips are bit-exact.
"""
from __future__ import annotations
import json
import math
import hashlib
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple, Union
import numpy as np
from .exceptions import DynastyDataError


MANIFEST_NAME = "manifest.json"
BLOB_NAME = "data.bin"
DTYPE = "<f8"


def json_dump_pretty(obj: Any) -> str:
    """
    Pretty print a JSON object with stable key order.
    """

    return json.dumps(obj, indent=4, sort_keys=True)


def write_bundle(
    directory: Union[str, Path],
    arrays: Mapping[str, np.ndarray],
    meta: Dict[str, Any],
) -> Path:
    """
    Write named arrays and metadata as a bundle directory.

    Args:
        directory: Target directory. Created if missing.
        arrays: Tensors to store, in the order they should appear in the manifest.
        meta: JSON-serialisable metadata stored alongside the tensor entries.

    Returns:
        Path to the bundle directory.
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    with open(directory / BLOB_NAME, "wb") as blob:
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=DTYPE)
            raw = data.tobytes(order="C")
            blob.write(raw)
            entries.append(
                {
                    "name": name,
                    "shape": list(data.shape),
                    "dtype": DTYPE,
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            offset += len(raw)

    manifest = dict(meta)
    manifest["tensors"] = entries
    with open(directory / MANIFEST_NAME, "w") as manifest_file:
        manifest_file.write(json_dump_pretty(manifest))
        manifest_file.write("\n")
    return directory


def read_bundle(directory: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a bundle directory written by `write_bundle`.

    Returns:
        The arrays by name (manifest order) and the remaining metadata.

    Raises:
        FileNotFoundError: If the manifest or blob is missing.
        DynastyDataError: If the manifest is malformed or disagrees with the blob.
    """

    directory = Path(directory)
    with open(directory / MANIFEST_NAME) as manifest_file:
        try:
            manifest = json.load(manifest_file)
        except json.decoder.JSONDecodeError as e:
            raise DynastyDataError(f"Malformed manifest in '{directory}': {e}") from e
    if not isinstance(manifest, dict):
        raise DynastyDataError(f"Malformed manifest in '{directory}': expected a JSON object.")
    raw = (directory / BLOB_NAME).read_bytes()

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.pop("tensors", []):
        try:
            name, shape = entry["name"], tuple(entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError) as e:
            raise DynastyDataError(f"Malformed tensor entry in '{directory}': {entry!r}") from e
        if entry.get("dtype", DTYPE) != DTYPE:
            raise DynastyDataError(
                f"Tensor '{name}' has dtype '{entry.get('dtype')}'. Only '{DTYPE}' is supported."
            )
        if nbytes != 8 * math.prod(shape) or offset + nbytes > len(raw):
            raise DynastyDataError(
                f"Tensor '{name}' (shape {list(shape)}, offset {offset}) does not fit the blob in '{directory}'."
            )
        arrays[name] = (
            np.frombuffer(raw, dtype=DTYPE, count=nbytes // 8, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
    return arrays, manifest


def content_hash(paths: Iterable[Union[str, Path]]) -> str:
    """
    SHA-256 over the bytes of the given files and directories (directories hashed file by file in sorted order).
    """

    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for file in files:
            digest.update(file.name.encode())
            digest.update(file.read_bytes())
    return digest.hexdigest()
