#!/usr/bin/env python3
"""
⚙️ Process settings for the ViG tools
Reads the environment (and a local .env) and sets up logging and thread caps.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

import psutil
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass
class Settings:
    threads: int
    log_level: str = "INFO"
    serial: bool = False


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Build Settings from VIG_* environment variables."""
    load_dotenv(env_file)

    raw_threads = os.getenv("VIG_THREADS")
    threads = _default_threads()
    if raw_threads:
        try:
            threads = max(1, int(raw_threads))
        except ValueError:
            logger.warning(f"⚠️ Ignoring non-integer VIG_THREADS={raw_threads!r}")

    serial = os.getenv("VIG_SERIAL", "").strip().lower() in {"1", "true", "yes"}
    level = os.getenv("VIG_LOG_LEVEL", "INFO").upper()
    return Settings(threads=threads, log_level=level, serial=serial)


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def apply_thread_cap(threads: int) -> None:
    """Cap BLAS threads; only effective before numpy is first imported."""
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)
    logger.debug(f"🧵 Thread cap set to {threads}")
