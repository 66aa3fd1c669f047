import logging
import os

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level=None):
    """Install one stream handler on the root logger."""
    level = level or os.getenv("RCI_SYSID_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    root = logging.getLogger()
    root.handlers.clear()
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    # jax is chatty at INFO about backends
    logging.getLogger("jax").setLevel(max(level, logging.WARNING))
    return root


def progress_enabled():
    """tqdm bars only when INFO records would be shown."""
    return logging.getLogger().getEffectiveLevel() <= logging.INFO
