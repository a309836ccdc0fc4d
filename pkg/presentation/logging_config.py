"""Logging config - Handler stderr duy nhất cho toàn bộ ứng dụng."""

import logging
import sys

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int = 0) -> logging.Logger:
    """Cấu hình root logger.

    Args:
        verbosity: 1 = DEBUG (-v), -1 = WARNING (-q), 0 = INFO

    Returns:
        Root logger đã cấu hình
    """
    level = logging.INFO
    if verbosity > 0:
        level = logging.DEBUG
    elif verbosity < 0:
        level = logging.WARNING
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    return root
