import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} - {message}"

QUIET_LIBRARIES = ("torch", "numexpr", "filelock")


class InterceptHandler(logging.Handler):
    """Route stdlib logging records (torch, scipy warnings) into loguru"""

    def emit(self, record):
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1
        logger.opt(depth=depth, exception=record.exc_info).log(level, record.getMessage())


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Console sink on stderr (stdout is kept for command results) plus an optional rotating file."""
    logger.remove()
    logger.add(sys.stderr, level=level, format=CONSOLE_FORMAT, colorize=True, backtrace=True, diagnose=False)
    if log_file:
        logger.add(log_file, level=level, format=FILE_FORMAT, rotation="10 MB", retention="1 week",
                   compression="zip")

    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
    for name in QUIET_LIBRARIES:
        logging.getLogger(name).setLevel(logging.WARNING)


@contextmanager
def run_log(run_dir: Path, level: str = "DEBUG") -> Iterator[Path]:
    """Mirror every message into <run_dir>/run.log while the block runs."""
    path = Path(run_dir) / "run.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    sink = logger.add(path, level=level, format=FILE_FORMAT, encoding="utf-8")
    try:
        yield path
    finally:
        logger.remove(sink)


setup_logging(os.getenv("LOG_LEVEL", "INFO"), os.getenv("LOG_FILE"))

__all__ = ["logger", "run_log", "setup_logging"]
