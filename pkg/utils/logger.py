# utils/logger.py

import logging
import os
import sys
from datetime import datetime

LOGGER_NAME = 'pedalign'


def setup_logger(log_file=None, console_level=logging.INFO, file_level=logging.DEBUG, log_dir=None):
    """
    Set up logging for the application.

    Console output goes to standard error so stdout stays free for
    machine-readable results.

    Args:
        log_file: Path to the log file (default: None)
        console_level: Logging level for console output
        file_level: Logging level for file output
        log_dir: When set and log_file is None, a timestamped file is created here

    Returns:
        Configured logger
    """
    if log_file is None and log_dir:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = os.path.join(log_dir, f"pedalign_{timestamp}.log")

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    # Remove existing handlers if any
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        try:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(file_level)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
            logger.info(f"Logging to file: {log_file}")
        except OSError as e:
            logger.warning(f"Could not create log file {log_file}: {e}")

    return logger


def get_logger(name=None):
    """
    Get the application logger, or a child of it for a module.

    Args:
        name: Module name, e.g. __name__ ("backend.losses" -> "pedalign.backend.losses")
    """
    if not name:
        return logging.getLogger(LOGGER_NAME)
    return logging.getLogger(f"{LOGGER_NAME}.{name}")
