"""Atomic file writes and worker-count plumbing."""

from __future__ import annotations

import os
import tempfile


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def worker_count(default: int | None = None) -> int:
    """Worker cap from FEWSEG_THREADS, falling back to the CPU count."""
    env = os.environ.get("FEWSEG_THREADS", "")
    if env.strip():
        n = int(env)
        if n < 1:
            raise ValueError(f"FEWSEG_THREADS must be >= 1, got {n}")
        return n
    if default is not None:
        return default
    return os.cpu_count() or 1
