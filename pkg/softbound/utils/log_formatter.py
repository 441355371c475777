"""Utility for formatting and colorizing log records on the terminal."""

import logging
import sys
from typing import Dict, Optional, TextIO


class LogFormatter(logging.Formatter):
    """Formatter that colors records by level when writing to a terminal."""

    # ANSI color codes per level
    LEVEL_COLOR_CODES: Dict[int, str] = {
        logging.DEBUG: '\033[0;36m',    # Cyan
        logging.INFO: '\033[0;32m',     # Green
        logging.WARNING: '\033[0;33m',  # Yellow
        logging.ERROR: '\033[0;31m',    # Red
        logging.CRITICAL: '\033[1;31m', # Bold red
    }
    RESET = '\033[0m'

    def __init__(self, use_color: bool = True):
        super().__init__('%(levelname)s %(name)s: %(message)s')
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        """
        Format a record, wrapping it in its level color if enabled.

        Args:
            record: Log record to format

        Returns:
            Formatted line
        """
        line = super().format(record)
        if not self.use_color:
            return line
        code = self.LEVEL_COLOR_CODES.get(record.levelno)
        return f'{code}{line}{self.RESET}' if code else line


def verbosity_level(verbosity: int) -> int:
    """Map -v count to a level: WARNING, INFO, then DEBUG."""
    if verbosity <= 0:
        return logging.WARNING
    if verbosity == 1:
        return logging.INFO
    return logging.DEBUG


def configure_logging(verbosity: int = 0, stream: Optional[TextIO] = None) -> logging.Handler:
    """
    Install the colorized formatter on the package logger.

    Args:
        verbosity: Number of -v flags given
        stream: Output stream (stderr by default)

    Returns:
        The installed handler
    """
    stream = sys.stderr if stream is None else stream
    handler = logging.StreamHandler(stream)
    handler.setFormatter(LogFormatter(use_color=hasattr(stream, 'isatty') and stream.isatty()))
    logger = logging.getLogger('softbound')
    for old in list(logger.handlers):
        logger.removeHandler(old)
    logger.addHandler(handler)
    logger.setLevel(verbosity_level(verbosity))
    return handler
