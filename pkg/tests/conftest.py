"""Shared fixtures for chunkstream tests.

Everything runs on synthetic arrays in ``tmp_path``; stream tests bind
loopback sockets only.
"""

from __future__ import annotations

import pytest

from src.config import EngineConfig
from src.distribution import RankMeta
from src.model import DatasetDecl


@pytest.fixture()
def decl_1d():
    """A 1-D float64 particle record of 20 cells."""
    return DatasetDecl("particles/e/position/x", "f8", (20,))


@pytest.fixture()
def decl_2d():
    """A 6 x 8 float32 mesh."""
    return DatasetDecl("meshes/E/x", "f4", (6, 8))


@pytest.fixture()
def two_hosts():
    """Writers 0 on host A and 1 on host B; readers 0 on A, 1 and 2 on B."""
    writers = [RankMeta(0, "hostA"), RankMeta(1, "hostB")]
    readers = [RankMeta(0, "hostA"), RankMeta(1, "hostB"), RankMeta(2, "hostB")]
    return writers, readers


@pytest.fixture()
def file_cfg():
    return EngineConfig(engine="file", rendezvous_timeout_s=1.0)


@pytest.fixture()
def stream_cfg():
    """Stream config with short timeouts; contact file next to the series name."""
    return EngineConfig(
        engine="stream",
        queue_policy="block",
        queue_depth=4,
        rendezvous_timeout_s=5.0,
        close_timeout_s=5.0,
    )


@pytest.fixture()
def series(tmp_path):
    """Series name inside ``tmp_path``, usable by both engines."""
    return str(tmp_path / "sim")
