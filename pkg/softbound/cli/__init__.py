"""Command-line package initialization."""

from softbound.cli.commands import build_parser, main

__all__ = ['build_parser', 'main']
