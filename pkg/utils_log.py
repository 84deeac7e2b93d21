"""
CCMForge Logging

Module loggers writing to a per-process log file under LOG_DIR.
Progress for humans is printed as `[TAG] message`; diagnostics go here.
"""

import logging
import os

from config import LOG_DIR, LOG_LEVEL

_ROOT_NAME = "ccmforge"


def _configure_root() -> logging.Logger:
    root = logging.getLogger(_ROOT_NAME)
    if not root.handlers:
        LOG_DIR.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(LOG_DIR / f"ccmforge_{os.getpid()}.log", encoding="utf-8")
        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
        root.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
    return root


def get_logger(name: str) -> logging.Logger:
    """Return the `ccmforge.<name>` logger, attaching the file handler on first use."""
    _configure_root()
    return logging.getLogger(f"{_ROOT_NAME}.{name}")
