"""Presentation layer - Giao diện dòng lệnh và báo cáo."""

from presentation.cli import build_parser, main
from presentation.logging_config import configure_logging

__all__ = [
    'build_parser',
    'main',
    'configure_logging',
]
