"""
Environment-driven settings for recency-lab.

Values come from the process environment, optionally seeded from a `.env`
file in the working directory.
"""

import os
from pathlib import Path
from typing import Optional

import torch

from recency_lab.utils.logger import logger


def setup_environment(env_file: str = ".env") -> None:
    """Load `.env` if it exists and fill in defaults"""
    env_path = Path(env_file)
    if env_path.exists():
        from dotenv import load_dotenv
        load_dotenv(env_path)

    os.environ.setdefault("RECENCY_LAB_RUN_ROOT", "runs")
    os.environ.setdefault("RECENCY_LAB_THREADS", "1")
    os.environ.setdefault("RECENCY_LAB_CACHE_ENABLED", "true")
    os.environ.setdefault("RECENCY_LAB_ACTS_CACHE_SIZE", "16")
    os.environ.setdefault("LOG_LEVEL", "INFO")


def run_root() -> Path:
    return Path(os.getenv("RECENCY_LAB_RUN_ROOT", "runs"))


def thread_cap() -> int:
    return max(1, int(os.getenv("RECENCY_LAB_THREADS", "1")))


def cache_enabled() -> bool:
    return os.getenv("RECENCY_LAB_CACHE_ENABLED", "true").lower() == "true"


def acts_cache_size() -> int:
    return int(os.getenv("RECENCY_LAB_ACTS_CACHE_SIZE", "16"))


def configure_torch(threads: Optional[int] = None) -> None:
    """Pin torch to a fixed thread count and deterministic kernels."""
    n = threads or thread_cap()
    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug(f"torch configured with {n} thread(s), deterministic algorithms on")
