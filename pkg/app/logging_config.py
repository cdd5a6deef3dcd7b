"""
Logging Configuration Module
One stdout handler with a fixed format for the CLI and the library
"""

import logging
import sys
from typing import Optional

from app.config import LOG_LEVEL


def setup_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


def progress_enabled(logger: logging.Logger) -> bool:
    """tqdm bars only when INFO messages would be shown."""
    return logger.isEnabledFor(logging.INFO)
