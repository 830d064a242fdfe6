"""
Shared helpers: logging setup, canonical hashing and small file utilities.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

import orjson
from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)

_LOGGING_CONFIGURED = False


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger with a rich handler.

    Args:
        level: Log level name; falls back to CAFLOW_LOG_LEVEL, then INFO.
    """
    global _LOGGING_CONFIGURED
    level_name = (level or os.environ.get("CAFLOW_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    root.setLevel(level_name)
    if _LOGGING_CONFIGURED:
        return
    handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    _LOGGING_CONFIGURED = True


def canonical_json_bytes(payload: Any) -> bytes:
    """Serialize to JSON with sorted keys so hashes ignore field order."""
    return orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    """Hash a file in chunks."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def derive_seed(seed: int, *tags: Any) -> int:
    """Independent 63-bit seed for a named sub-stream of a run."""
    digest = hashlib.sha256(canonical_json_bytes([int(seed), *[str(t) for t in tags]])).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def write_bytes_atomic(path: Union[str, Path], data: bytes) -> Path:
    """Write through a temporary sibling so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; used for byte-stable CSV cells."""
    return repr(float(value))
