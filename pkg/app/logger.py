import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Optional

import json_logging

from app.logs_fields_config import init_json_logger
from app.settings import settings

_initialised = False


def init_logger(name: Optional[str] = None, log_dir: Optional[str] = None) -> None:
    """Install JSON formatting and a rotating file handler on the root logger.

    Safe to call more than once; later calls only add a file handler for a new
    log directory.
    """
    global _initialised
    if not _initialised and settings.LOG_JSON:
        init_json_logger()
        json_logging.init_non_web(enable_json=True)
    _initialised = True

    log_dir = log_dir or settings.LOG_DIR
    os.makedirs(log_dir, exist_ok=True)
    log_file_path = os.path.join(log_dir, f'{name or settings.TITLE}.log')

    logger = logging.getLogger()
    logger.setLevel(getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))
    for handler in logger.handlers:
        if isinstance(handler, RotatingFileHandler) and handler.baseFilename == os.path.abspath(log_file_path):
            return

    rotate_file_handler = RotatingFileHandler(log_file_path, maxBytes=268000000, backupCount=1)
    if settings.LOG_JSON:
        rotate_file_handler.setFormatter(json_logging.JSONLogFormatter())
    logger.addHandler(rotate_file_handler)
