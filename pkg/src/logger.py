import logging
import os
import sys

from loki_logger_handler.loki_logger_handler import LokiLoggerHandler

# Verbosity of the package logger, one of error, warn, info, debug
HMAP_LOG = os.environ.get("HMAP_LOG", "warn").lower()

LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

# Name of the logger every module logger hangs off
PACKAGE_LOGGER = __name__.split(".")[0]

# Module-level logger
logger = None


def setup_logger(level=None):
    """
    Sets up and configures the package logger.

    Ships records to Loki when LOKI_URL is set, otherwise logs to stdout.
    Calling it again only adjusts the level.

    Args:
        level (str, optional): One of error, warn, info, debug. Defaults to HMAP_LOG.

    Returns:
        logging.Logger: The configured package logger.
    """
    global logger
    level_name = (level or os.environ.get("HMAP_LOG", HMAP_LOG)).lower()
    numeric_level = LEVELS.get(level_name, logging.WARNING)

    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(numeric_level)

    if logger.handlers:
        for handler in logger.handlers:
            handler.setLevel(numeric_level)
        return logger

    LOKI_URL = os.getenv("LOKI_URL")

    if LOKI_URL:
        loki_handler = LokiLoggerHandler(
            url=LOKI_URL,
            labels={"app": "hmap-planner"}
        )
        loki_handler.setLevel(numeric_level)
        logger.addHandler(loki_handler)
        logger.info("Configured Loki logging.")
    else:
        local_handler = logging.StreamHandler(sys.stdout)
        local_handler.setLevel(numeric_level)

        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        local_handler.setFormatter(formatter)

        logger.addHandler(local_handler)
        logger.info("Loki credentials not provided, falling back to local logging.")

    return logger
