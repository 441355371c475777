"""Utilities package initialization."""

from softbound.utils.log_formatter import LogFormatter, configure_logging

__all__ = ['LogFormatter', 'configure_logging']
