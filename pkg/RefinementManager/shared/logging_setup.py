import logging
import os
import sys
import threading
import time
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Optional


ROOT_LOGGER = "evr"

_LEVEL_MAP = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARNING": logging.WARNING,
    "WARN": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
    "NOTSET": logging.NOTSET,
}


def _resolve_log_dir(base_dir: Path, cfg: Dict[str, Any]) -> Optional[Path]:
    log_cfg = (cfg or {}).get("logging") or {}
    d = str(log_cfg.get("dir") or "").strip()
    if not d:
        return None

    p = Path(os.path.expanduser(d))
    if not p.is_absolute():
        p = (base_dir / p).resolve()
    return p


def level_from_name(name: Any, default: int = logging.WARNING) -> int:
    return _LEVEL_MAP.get(str(name or "").strip().upper(), default)


def setup_logging(
    service_name: str,
    cfg: Dict[str, Any],
    base_dir: Optional[Path] = None,
    level_override: Optional[str] = None,
) -> logging.Logger:
    """Configure the `evr` logger tree for one entry point.

    - Console output on stderr (stdout carries reports, JSON and CSV)
    - When logging.dir is set: per-service rotating log <service>.<YYYY-MM-DD>.log
      plus a shared rotating latest.log

    Controlled via config/settings.json:

      "logging": { "dir": "${EVR_LOG_DIR}", "level": "WARNING" }

    `base_dir` should be the RefinementManager directory.
    """

    if base_dir is None:
        base_dir = Path(__file__).resolve().parents[1]

    log_cfg = (cfg or {}).get("logging") or {}
    level = level_from_name(level_override or log_cfg.get("level"))
    max_bytes = int(log_cfg.get("max_bytes") or 5 * 1024 * 1024)
    backup_count = int(log_cfg.get("backup_count") or 5)

    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(level)
    logger.propagate = False

    # Idempotent: clear old handlers
    for h in list(logger.handlers):
        try:
            logger.removeHandler(h)
            h.close()
        except Exception:
            pass

    fmt = logging.Formatter(
        fmt="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    # Console
    sh = logging.StreamHandler(stream=sys.stderr)
    sh.setLevel(level)
    sh.setFormatter(fmt)
    logger.addHandler(sh)

    logs_dir = _resolve_log_dir(base_dir, cfg)
    service_file = None
    if logs_dir is not None:
        logs_dir.mkdir(parents=True, exist_ok=True)
        date_str = time.strftime("%Y-%m-%d")
        service_file = logs_dir / f"{service_name}.{date_str}.log"

        # Per-service rotating file
        fh = RotatingFileHandler(service_file, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        fh.setLevel(level)
        fh.setFormatter(fmt)
        logger.addHandler(fh)

        # "latest.log" rotating file (combined across commands)
        lh = RotatingFileHandler(logs_dir / "latest.log", maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        lh.setLevel(level)
        lh.setFormatter(fmt)
        logger.addHandler(lh)

    _install_global_exception_hooks(logger)

    logger.debug(
        "Logging initialized: service=%s level=%s logs_dir=%s service_file=%s",
        service_name,
        logging.getLevelName(level),
        str(logs_dir) if logs_dir else "(console only)",
        str(service_file) if service_file else "-",
    )

    return logger


def _install_global_exception_hooks(logger: logging.Logger) -> None:
    """Route uncaught exceptions (main thread and worker threads) to the log."""

    def on_main(exctype, value, tb) -> None:
        logger.critical("Unhandled exception", exc_info=(exctype, value, tb))

    def on_thread(args: threading.ExceptHookArgs) -> None:
        name = args.thread.name if args.thread is not None else "(unknown)"
        logger.critical(
            "Unhandled exception in thread %s", name,
            exc_info=(args.exc_type, args.exc_value, args.exc_traceback),
        )

    sys.excepthook = on_main
    threading.excepthook = on_thread
