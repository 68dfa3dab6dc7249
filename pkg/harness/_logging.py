from __future__ import annotations

import logging
import os
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler


# Package root logger, whatever name the package is imported under.
_ROOT = __name__.split(".")[0]
_CONSOLE_HANDLER_NAME = "ionreadout.console"
_FILE_HANDLER_NAME = "ionreadout.file"
_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [%(threadName)s]: %(message)s"


def configure_logging(
    out_dir: str | os.PathLike[str] | None = None,
    level: int = logging.INFO,
    console: Console | None = None,
) -> Path | None:
    """Attach a rich stderr handler and, when `out_dir` is given, a `run.log` file handler.

    Calling again replaces the handlers installed by a previous call.
    """
    logger = logging.getLogger(_ROOT)
    close_logging()
    logger.setLevel(min(level, logging.DEBUG) if out_dir is not None else level)

    rich_handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=False,
    )
    rich_handler.name = _CONSOLE_HANDLER_NAME
    rich_handler.setLevel(level)
    logger.addHandler(rich_handler)

    if out_dir is None:
        return None
    path = _resolve_log_path(out_dir)
    file_handler = logging.FileHandler(path, encoding="utf-8")
    file_handler.name = _FILE_HANDLER_NAME
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(fmt=_LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    logger.addHandler(file_handler)
    return path


def close_logging() -> None:
    logger = logging.getLogger(_ROOT)
    for handler in list(logger.handlers):
        if handler.name not in (_CONSOLE_HANDLER_NAME, _FILE_HANDLER_NAME):
            continue
        logger.removeHandler(handler)
        try:
            handler.flush()
        finally:
            handler.close()


def _resolve_log_path(out_dir: str | os.PathLike[str]) -> Path:
    path = Path(out_dir).expanduser().resolve() / "run.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.touch(exist_ok=True)
    return path
