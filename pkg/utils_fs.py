"""
CCMForge Filesystem Utilities

Artifacts (operators, datasets, checkpoints, reports) are written whole or
not at all, and identified by the sha256 of their bytes:
- atomic_write_bytes / _text / _json: temp file in the target directory, fsync, os.replace
- file_lock: exclusive advisory lock (fcntl / msvcrt) guarding read-modify-write of status files
- hash_paths / hash_directory: content hashes used for determinism checks and stage skipping
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Iterator

# Operators at side 128 run to hundreds of megabytes; hash them in pieces
_HASH_CHUNK = 1 << 20
_SCRATCH_SUFFIXES = (".tmp", ".lock")


# =============================================================================
# Atomic Writes
# =============================================================================

def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write `data` to `path` so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        "wb", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False
    ) as tmp:
        scratch = Path(tmp.name)
        try:
            tmp.write(data)
            tmp.flush()
            os.fsync(tmp.fileno())
        except BaseException:
            tmp.close()
            scratch.unlink(missing_ok=True)
            raise
    try:
        os.replace(scratch, path)
    except OSError:
        scratch.unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str, *, encoding: str = "utf-8") -> None:
    atomic_write_bytes(path, text.encode(encoding))


def atomic_write_json(path: Path, data: Any, *, indent: int = 2) -> None:
    # Sorted keys make manifests and status files byte-stable
    atomic_write_text(path, json.dumps(data, indent=indent, sort_keys=True, ensure_ascii=False))


# =============================================================================
# Locking
# =============================================================================

if os.name == "nt":
    import msvcrt

    def _lock_handle(handle) -> None:
        handle.seek(0, os.SEEK_END)
        if handle.tell() == 0:
            handle.write("0")
            handle.flush()
        handle.seek(0)
        msvcrt.locking(handle.fileno(), msvcrt.LK_NBLCK, 1)

    def _unlock_handle(handle) -> None:
        handle.seek(0)
        msvcrt.locking(handle.fileno(), msvcrt.LK_UNLCK, 1)

else:
    import fcntl

    def _lock_handle(handle) -> None:
        fcntl.flock(handle.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)

    def _unlock_handle(handle) -> None:
        fcntl.flock(handle.fileno(), fcntl.LOCK_UN)


@contextmanager
def file_lock(
    lock_path: Path,
    *,
    timeout_s: float | None = 60.0,
    poll_interval_s: float = 0.05,
) -> Iterator[None]:
    """
    Hold an exclusive advisory lock on `lock_path` for the duration of the block.

    The lock lives on its own path, so the guarded status file can be
    replaced atomically while it is held. The operating system releases
    it when the holder exits, so a crashed stage never leaves it behind.
    """
    lock_path = Path(lock_path)
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()

    with open(lock_path, "a+", encoding="utf-8") as handle:
        while True:
            try:
                _lock_handle(handle)
                break
            except OSError:
                if timeout_s is not None and (time.monotonic() - start) >= timeout_s:
                    raise TimeoutError(f"timed out waiting for lock {lock_path}")
                time.sleep(poll_interval_s)

        try:
            yield
        finally:
            try:
                _unlock_handle(handle)
            except OSError:
                pass


# =============================================================================
# Content Hashes
# =============================================================================

def _feed_file(h: "hashlib._Hash", path: Path) -> None:
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_HASH_CHUNK), b""):
            h.update(chunk)


def hash_paths(paths: Iterable[Path], *, root: Path | None = None) -> str:
    """
    sha256 over file contents in sorted path order; missing paths are ignored.

    With `root`, each file's relative name is mixed in too, so renames change
    the digest.
    """
    h = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        if not path.is_file():
            continue
        if root is not None:
            h.update(path.relative_to(root).as_posix().encode("utf-8"))
        _feed_file(h, path)
    return h.hexdigest()


def hash_directory(directory: Path, *, exclude: tuple[str, ...] = (".status",)) -> str:
    """Hash every file below `directory` except excluded top-level entries and scratch files."""
    directory = Path(directory)
    files = [
        p for p in directory.rglob("*")
        if p.is_file()
        and p.relative_to(directory).parts[0] not in exclude
        and not p.name.endswith(_SCRATCH_SUFFIXES)
    ]
    return hash_paths(files, root=directory)
