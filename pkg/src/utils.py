"""Shared helpers: payload arrays, region copies and atomic JSON files."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import PayloadSizeError
from .geometry import relative_slices
from .model import volume

if TYPE_CHECKING:
    from .model import DatasetDecl, Region


def payload_array(
    payload: bytes | bytearray | memoryview | np.ndarray, decl: DatasetDecl, region: Region
) -> np.ndarray:
    """View a flat payload as an array shaped like ``region``.

    Args:
        payload: Raw C-order little-endian bytes, or an array with the right
            number of elements.
        decl: Declaration supplying the element kind.
        region: The region the payload covers.

    Returns:
        An array of ``decl.dtype`` with shape ``region.extent``.

    Raises:
        PayloadSizeError: the payload does not hold exactly ``volume(region)``
            elements.
    """
    expected = volume(region) * decl.width
    if isinstance(payload, np.ndarray):
        if payload.dtype != decl.dtype:
            msg = f"{decl.name}: array of {payload.dtype}, dataset holds {decl.dtype}"
            raise PayloadSizeError(msg)
        arr = np.ascontiguousarray(payload)
        if arr.size != volume(region):
            msg = f"{decl.name}: {arr.size} elements for region {region} of {volume(region)}"
            raise PayloadSizeError(msg)
        return arr.reshape(region.extent)
    if len(payload) != expected:
        msg = f"{decl.name}: payload of {len(payload)} bytes, region {region} needs {expected}"
        raise PayloadSizeError(msg)
    return np.frombuffer(payload, dtype=decl.dtype).reshape(region.extent)


def copy_region(
    dst: np.ndarray, dst_region: Region, src: np.ndarray, src_region: Region, part: Region
) -> None:
    """Copy the cells of ``part`` from ``src`` into ``dst``.

    ``src`` and ``dst`` are arrays laid out over ``src_region`` and
    ``dst_region``; ``part`` must lie inside both.
    """
    dst[relative_slices(dst_region, part)] = src[relative_slices(src_region, part)]


def extract(src: np.ndarray, src_region: Region, part: Region) -> bytes:
    """C-order bytes of ``part`` cut out of an array laid out over ``src_region``."""
    return np.ascontiguousarray(src[relative_slices(src_region, part)]).tobytes()


def write_json_atomic(path: Path, doc: Any) -> None:
    """Write ``doc`` as JSON by writing a temporary file and renaming it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
        Path(tmp).replace(path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
