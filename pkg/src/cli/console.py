import logging
import os
import sys
from typing import Optional, Sequence

from src.core.report_builder import render_table

LOG_ENV_VAR = "ATTREX_LOG"
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConsoleHandler(logging.StreamHandler):
    """Stream handler writing log records to stderr, leaving stdout for tables"""

    def __init__(self):
        super().__init__(stream=sys.stderr)
        self.setFormatter(logging.Formatter(LOG_FORMAT, datefmt='%H:%M:%S'))


def resolve_level(value: Optional[str]) -> Optional[int]:
    """Log level named by the environment value, None if unrecognised"""
    name = (value or "INFO").strip().upper()
    return getattr(logging, name) if name in LOG_LEVELS else None


def setup_logging() -> ConsoleHandler:
    """Install the console handler on the root logger at the ATTREX_LOG level"""
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, ConsoleHandler)]:
        root.removeHandler(handler)
    handler = ConsoleHandler()
    root.addHandler(handler)

    raw = os.environ.get(LOG_ENV_VAR)
    level = resolve_level(raw)
    root.setLevel(level if level is not None else logging.INFO)
    if level is None:
        logging.getLogger(__name__).warning(f"Unknown {LOG_ENV_VAR} value '{raw}', using INFO")
    return handler


def print_table(title: str, header: Sequence[str], rows: Sequence[Sequence[str]]):
    print(title)
    print(render_table(header, rows))
    print()
