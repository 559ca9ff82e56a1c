import logging
import os
from datetime import datetime
from config.settings import LOG_LEVEL, LOG_FORMAT, LOG_DIR, LOG_TO_FILE

# Loggers created through setup_logger, so a run log can be attached to all of them
_LOGGERS = {}


def setup_logger(name: str) -> logging.Logger:
    """
    Setup logger
    :param name: Logger name
    :return: Configured logger
    """
    # Create logger
    logger = logging.getLogger(name)
    logger.setLevel(LOG_LEVEL)
    _LOGGERS[name] = logger

    # If handlers already exist, don't add them again
    if logger.handlers:
        return logger

    # Create console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(LOG_LEVEL)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    # Create file handler
    if LOG_TO_FILE:
        os.makedirs(LOG_DIR, exist_ok=True)
        log_file = os.path.join(LOG_DIR, f'{datetime.now().strftime("%Y%m%d")}.log')
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(LOG_LEVEL)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def attach_run_log(run_dir: str) -> logging.Handler:
    """
    Mirror every project logger into <run_dir>/train.log
    :param run_dir: Run directory
    :return: The handler, so the caller can detach it with detach_run_log
    """
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, 'train.log'), encoding='utf-8')
    handler.setLevel(LOG_LEVEL)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    for logger in _LOGGERS.values():
        logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    for logger in _LOGGERS.values():
        if handler in logger.handlers:
            logger.removeHandler(handler)
    handler.close()
